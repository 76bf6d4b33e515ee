"""Ten hand-written multi-block functions with loops and calls.

Each entry pairs a program with a handful of concrete environments.  Running
every environment through the interpreter and taking the union of the
normalized intra-procedural graphs gives the dynamic edge set D used to
estimate the static analyzer's precision and recall.  Pointer arguments always
point at disjoint buffers in a dedicated arena.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .dynflow import intraprocedural_dfg
from .interp import Environment, MemRegion, run
from .isa import Program, parse_program

ARENA_BASE = 0x03000000
ARENA_SIZE = 0x10000
ARENA = MemRegion("arena", ARENA_BASE, ARENA_SIZE)


def buf(k: int) -> int:
    """Address of the k-th 256-byte buffer in the arena."""
    return ARENA_BASE + 0x100 * k


def _qwords(base: int, values) -> dict[int, int]:
    out = {}
    for n, v in enumerate(values):
        for k, b in enumerate((v & (2**64 - 1)).to_bytes(8, "little")):
            out[base + 8 * n + k] = b
    return out


def _dwords(base: int, values) -> dict[int, int]:
    out = {}
    for n, v in enumerate(values):
        for k, b in enumerate((v & 0xFFFFFFFF).to_bytes(4, "little")):
            out[base + 4 * n + k] = b
    return out


def _bytes(base: int, data: bytes) -> dict[int, int]:
    return {base + k: b for k, b in enumerate(data)}


@dataclass
class MiniCase:
    name: str
    text: str
    envs: list[Environment] = field(default_factory=list)

    def program(self) -> Program:
        return parse_program(self.text)


def _env(regs: dict[str, int], seed: dict[int, int] | None = None) -> Environment:
    junk = {r: 0x5A5A0000 + n for n, r in enumerate(
        ("rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "r8", "r9", "r10", "r11",
         "r12", "r13", "r14", "r15"))}
    junk.update(regs)
    return Environment(junk, seed or {}, regions=(ARENA,))


SUM_ARRAY = """\
sum_array:
 push rbp
 mov rbp, rsp
 sub rsp, 0x20
 mov [rbp-0x18], rdi
 mov DWORD PTR [rbp-0x1c], esi
 mov DWORD PTR [rbp-0x4], 0
 mov DWORD PTR [rbp-0x8], 0
 jmp .sa_cond
.sa_body:
 mov eax, DWORD PTR [rbp-0x8]
 mov rdx, [rbp-0x18]
 mov ecx, DWORD PTR [rdx+rax*4]
 add DWORD PTR [rbp-0x4], ecx
 add DWORD PTR [rbp-0x8], 1
.sa_cond:
 mov eax, DWORD PTR [rbp-0x8]
 cmp eax, DWORD PTR [rbp-0x1c]
 jnz .sa_body
 mov edi, DWORD PTR [rbp-0x4]
 call report
 mov eax, DWORD PTR [rbp-0x4]
 mov rsp, rbp
 pop rbp
 ret
"""

INIT_POINT = """\
init_point:
 push rbx
 mov rbx, rdi
 mov DWORD PTR [rbx], esi
 mov DWORD PTR [rbx+0x4], edx
 mov DWORD PTR [rbx+0x8], 0
 test esi, esi
 jz .ip_skip
 mov rdi, rbx
 call log_point
.ip_skip:
 mov eax, DWORD PTR [rbx]
 add eax, DWORD PTR [rbx+0x4]
 mov DWORD PTR [rbx+0x8], eax
 mov eax, DWORD PTR [rbx+0x8]
 pop rbx
 ret
"""

LIST_LENGTH = """\
list_length:
 xor eax, eax
.ll_loop:
 test rdi, rdi
 jz .ll_done
 add eax, 1
 mov rdi, [rdi+0x8]
 jmp .ll_loop
.ll_done:
 mov rdi, rax
 push rax
 call record_length
 pop rax
 ret
"""

COPY_BYTES = """\
copy_bytes:
 xor ecx, ecx
 jmp .cb_cond
.cb_body:
 mov al, BYTE PTR [rsi+rcx]
 mov BYTE PTR [rdi+rcx], al
 add rcx, 1
.cb_cond:
 cmp rcx, rdx
 jnz .cb_body
 mov al, BYTE PTR [rdi]
 ret
"""

ALLOC_PAIR = """\
alloc_pair:
 push rbx
 push r12
 push r13
 mov r13, rdi
 mov r12, rsi
 mov edi, 0x10
 call malloc
 test rax, rax
 jz .ap_fail
 mov rbx, rax
 mov [rbx], r13
 mov [rbx+0x8], r12
 mov edi, 0x10
 call malloc
 mov rcx, [rbx]
 mov [rax], rcx
 mov rcx, [rbx+0x8]
 mov [rax+0x8], rcx
 mov r12, rax
 mov rdi, rbx
 call free
 mov rax, [r12+0x8]
 add rax, [r12]
 jmp .ap_out
.ap_fail:
 xor eax, eax
.ap_out:
 pop r13
 pop r12
 pop rbx
 ret
"""

COUNT_MATCHES = """\
count_matches:
 push rbx
 push r12
 push r13
 push r14
 mov rbx, rdi
 mov r12, rsi
 mov r13, rdx
 xor r14d, r14d
.cm_loop:
 test r12, r12
 jz .cm_done
 sub r12, 1
 mov dil, BYTE PTR [rbx+r12]
 mov rsi, r13
 call char_eq
 add r14, rax
 jmp .cm_loop
.cm_done:
 mov rax, r14
 pop r14
 pop r13
 pop r12
 pop rbx
 ret
char_eq:
 xor eax, eax
 cmp dil, sil
 jnz .ce_out
 mov eax, 1
.ce_out:
 ret
"""

STACK_BUFFER = """\
stack_buffer:
 push rbp
 mov rbp, rsp
 sub rsp, 0x30
 mov QWORD PTR [rbp-0x8], 0x1234
 mov [rbp-0x10], rsi
 xor ecx, ecx
 jmp .sb_cond
.sb_body:
 mov al, BYTE PTR [rdi+rcx]
 mov BYTE PTR [rbp+rcx-0x30], al
 add rcx, 1
.sb_cond:
 cmp rcx, [rbp-0x10]
 jnz .sb_body
 lea rdi, [rbp-0x30]
 mov rsi, [rbp-0x10]
 call checksum
 mov rdx, [rbp-0x8]
 cmp rdx, 0x1234
 jz .sb_ok
 call abort
.sb_ok:
 mov rsp, rbp
 pop rbp
 ret
checksum:
 xor eax, eax
 xor ecx, ecx
.ck_loop:
 cmp rcx, rsi
 jz .ck_done
 add al, BYTE PTR [rdi+rcx]
 add rcx, 1
 jmp .ck_loop
.ck_done:
 ret
"""

BUMP_TABLE = """\
.data counter 8
.data table 64
bump_table:
 mov rax, [rip+counter]
 add rax, 1
 mov [rip+counter], rax
 lea rdx, [rip+table]
 xor ecx, ecx
.bt_loop:
 mov [rdx+rcx*8], rax
 add rcx, 1
 cmp rcx, rdi
 jnz .bt_loop
 push rdx
 call flush
 pop rdx
 mov rax, [rip+counter]
 add rax, [rdx]
 ret
"""

STR_UPPER = """\
str_upper:
 push rbx
 mov rbx, rdi
.su_loop:
 mov al, BYTE PTR [rbx]
 test al, al
 jz .su_done
 and al, 0xdf
 mov BYTE PTR [rbx], al
 add rbx, 1
 jmp .su_loop
.su_done:
 mov rdi, rbx
 call puts
 pop rbx
 ret
"""

ACCUMULATE = """\
accumulate:
 push rbx
 push r12
 push r13
 mov rbx, rdi
 mov r12, rsi
 mov r13, rdx
 mov QWORD PTR [rbx], 0
 mov QWORD PTR [rbx+0x8], 0
.ac_loop:
 test r13, r13
 jz .ac_done
 sub r13, 1
 mov rax, [r12+r13*8]
 add [rbx], rax
 add QWORD PTR [rbx+0x8], 1
 mov rdi, rbx
 call observe
 jmp .ac_loop
.ac_done:
 mov rax, [rbx]
 mov rdx, [rbx+0x8]
 pop r13
 pop r12
 pop rbx
 ret
"""


def _list_seed(base: int, n: int) -> dict[int, int]:
    seed = {}
    for k in range(n):
        nxt = base + 0x10 * (k + 1) if k + 1 < n else 0
        seed.update(_qwords(base + 0x10 * k, [k, nxt]))
    return seed


def mini_corpus() -> list[MiniCase]:
    a, b = buf(0), buf(4)
    return [
        MiniCase("sum_array", SUM_ARRAY, [
            _env({"rdi": a, "rsi": n}, _dwords(a, range(1, n + 1))) for n in (0, 1, 3, 5)]),
        MiniCase("init_point", INIT_POINT, [
            _env({"rdi": a, "rsi": x, "rdx": 7}) for x in (0, 4)]),
        MiniCase("list_length", LIST_LENGTH, [
            _env({"rdi": 0}), _env({"rdi": a}, _list_seed(a, 1)), _env({"rdi": a}, _list_seed(a, 4))]),
        MiniCase("copy_bytes", COPY_BYTES, [
            _env({"rdi": a, "rsi": b, "rdx": n}, _bytes(b, b"hello world")) for n in (1, 2, 5)]),
        MiniCase("alloc_pair", ALLOC_PAIR, [
            _env({"rdi": 3, "rsi": 9}), _env({"rdi": -1, "rsi": 2})]),
        MiniCase("count_matches", COUNT_MATCHES, [
            _env({"rdi": a, "rsi": n, "rdx": ord("l")}, _bytes(a, b"hello")) for n in (0, 2, 5)]),
        MiniCase("stack_buffer", STACK_BUFFER, [
            _env({"rdi": a, "rsi": n}, _bytes(a, b"abcdefgh")) for n in (1, 3, 8)]),
        MiniCase("bump_table", BUMP_TABLE, [_env({"rdi": n}) for n in (1, 2, 4)]),
        MiniCase("str_upper", STR_UPPER, [
            _env({"rdi": a}, _bytes(a, s)) for s in (b"\0", b"ab\0", b"tExt\0")]),
        MiniCase("accumulate", ACCUMULATE, [
            _env({"rdi": a, "rsi": b, "rdx": n}, _qwords(b, range(10, 10 + n))) for n in (0, 1, 3)]),
    ]


def dynamic_edges(case: MiniCase, program: Program | None = None) -> set[tuple[int, int, str]]:
    """Union over the case's environments of intra-procedural edges of its entry function."""
    p = program or case.program()
    edges: set[tuple[int, int, str]] = set()
    for env in case.envs:
        events, _ = run(p, case.name, env)
        intra, _ = intraprocedural_dfg([events], p, case.name)
        edges |= intra.edge_set()
    return edges
