import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binflow.fixtures import listing, marked
from binflow.interp import (
    HEAP_BASE, STACK_INIT, Access, Environment, InconclusiveOracle, MemoryFault, MemRegion,
    StepLimitExceeded, TraceEvent, UndefinedRegisterError, Verdict, default_regions, emit_trace,
    execute, expand, oracle_data_flow, read_trace, run,
)
from binflow.isa import parse_program

ARG = MemRegion("arg", 0x1000, 0x100)


def _env(**regs):
    return Environment(regs, regions=(ARG,))


def test_byte_store_then_load():
    p = listing("unconditional")
    w, r = marked(p)
    events = execute(p, "f_target", _env(rdi=0x1000, rdx=5))
    mem = [e for e in events if e.channel == "mem" and e.instr_addr in (w, r)]
    assert [(e.instr_addr, e.access, e.location, e.size) for e in mem] == [
        (w, Access.WRITE, 0x1000, 1), (r, Access.READ, 0x1000, 1)]
    regs = {(e.access, e.channel) for e in events if e.channel != "mem" and e.instr_addr in (w, r)}
    assert {(Access.READ, "rdx"), (Access.READ, "rdi"), (Access.WRITE, "rax")} <= regs


def test_load_returns_stored_value():
    p = parse_program("f:\n mov [rdi], dl\n mov al, [rdi]\n ret\n")
    _, st_ = run(p, "f", _env(rdi=0x1000, rdx=0x1234, rax=0xFFFF))
    assert st_.regs["rax"] == 0xFF34


def test_clear_idiom_logs_read_and_writes_zero():
    p = parse_program("f:\n xor rbx, rbx\n ret\n")
    events, st_ = run(p, "f", _env(rbx=77))
    assert st_.regs["rbx"] == 0
    first = [e for e in events if e.instr_addr == events[0].instr_addr]
    assert any(e.access is Access.READ and e.channel == "rbx" for e in first)
    assert any(e.access is Access.WRITE and e.channel == "rbx" for e in first)


def test_push_pop_pair():
    p = parse_program("f:\n push rbx\n pop rcx\n ret\n")
    events, st_ = run(p, "f", _env(rbx=9))
    mem = [e for e in events if e.channel == "mem"]
    assert mem[0].access is Access.WRITE and mem[1].access is Access.READ
    # the final ret reads the return slot the harness pushed below STACK_INIT
    entry_rsp = mem[2].location
    assert entry_rsp == STACK_INIT - 8 and st_.regs["rsp"] == STACK_INIT
    assert mem[0].location == mem[1].location == entry_rsp - 8
    assert st_.regs["rcx"] == 9


def test_thirty_two_bit_write_zero_extends():
    p = parse_program("f:\n mov eax, 1\n ret\n")
    _, st_ = run(p, "f", _env(rax=2**64 - 1))
    assert st_.regs["rax"] == 1


def test_errors():
    p = parse_program("f:\n mov rax, rbx\n ret\n")
    with pytest.raises(UndefinedRegisterError):
        execute(p, "f", Environment())
    p = parse_program("f:\n mov al, [rdi]\n ret\n")
    with pytest.raises(MemoryFault):
        execute(p, "f", Environment({"rdi": 0x10}))
    p = parse_program("f:\n.l:\n jmp .l\n")
    with pytest.raises(StepLimitExceeded):
        execute(p, "f", Environment(), step_limit=50)


def test_undefined_policy_expands():
    env = Environment({"rdi": 1}, undefined_policy={"rsi": (1, 2), "rdx": (3,)})
    envs = expand(env)
    assert len(envs) == 2
    assert {e.initial_regs["rsi"] for e in envs} == {1, 2}


def test_oracle_possible_flow():
    p = listing("possible")
    w, r = marked(p)
    env = Environment({"rdi": 0x1080, "rdx": 1}, undefined_policy={"rsi": tuple(range(-4, 5))},
                      regions=(ARG,))
    assert oracle_data_flow(p, w, r, [env]) is Verdict.SOMETIMES


def test_oracle_impossible_flow():
    p = listing("impossible")
    w, r = marked(p)
    envs = [_env(rdi=a, rdx=1) for a in (0x1008, 0x1010, 0x10F0)]
    assert oracle_data_flow(p, w, r, envs) is Verdict.NEVER


def test_oracle_callee_effects():
    p = listing("callee_reads")
    assert oracle_data_flow(p, *marked(p), [Environment()]) is Verdict.ALWAYS
    p = listing("callee_overwrites")
    assert oracle_data_flow(p, *marked(p), [Environment()]) is Verdict.NEVER


def test_oracle_inconclusive():
    p = listing("unconditional")
    w, r = marked(p)
    with pytest.raises(InconclusiveOracle):
        oracle_data_flow(p, w, r, [Environment({"rdi": 0x10, "rdx": 1})])
    with pytest.raises(ValueError):
        oracle_data_flow(p, w, r, [])


def test_trace_jsonl():
    p = listing("unconditional")
    sink = io.StringIO()
    emit_trace([], sink)
    assert sink.getvalue() == ""
    env = _env(rdi=0x1000, rdx=5)
    a, b = io.StringIO(), io.StringIO()
    emit_trace(execute(p, "f_target", env), a)
    emit_trace(execute(p, "f_target", env), b)
    assert a.getvalue() == b.getvalue()
    body = [e for e in read_trace(io.StringIO(a.getvalue())) if e.instr_addr in marked(p)]
    assert sum(e.channel == "mem" for e in body) == 2
    assert {e.channel for e in body if e.channel != "mem"} == {"rdx", "rdi", "rax"}
    assert read_trace(io.StringIO(a.getvalue())) == execute(p, "f_target", env)


def test_trace_event_validation():
    with pytest.raises(ValueError):
        TraceEvent(1, Access.READ, "mem", "rax", 8, 0)
    with pytest.raises(ValueError):
        TraceEvent(1, Access.READ, "rax", "rax", 0, 0)
    with pytest.raises(ValueError):
        read_trace(io.StringIO('{"instr_addr": 1}\n'))


ALLOC_LOOP = """\
f:
 push rbx
 mov rbx, rdi
.l:
 mov rdi, rsi
 call malloc
 mov BYTE PTR [rax], 1
 sub rbx, 1
 jnz .l
 pop rbx
 ret
"""


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 200))
def test_allocations_disjoint(n, size):
    p = parse_program(ALLOC_LOOP)
    _, st_ = run(p, "f", Environment({"rdi": n, "rsi": size, "rbx": 0}))
    spans = sorted(st_.allocations)
    assert len(spans) == n
    for (a, s), (b, _) in zip(spans, spans[1:]):
        assert a + s <= b
    stack, heap = default_regions(p)[:2]
    for a, s in spans:
        assert heap.contains(a, s) and not stack.contains(a, 1)
        assert a >= HEAP_BASE


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 15), st.sampled_from([1, 2, 4, 8]), st.integers(0, 2**64 - 1)),
                min_size=1, max_size=8),
       st.integers(0, 15), st.sampled_from([1, 2, 4, 8]))
def test_reads_return_last_written_bytes(writes, roff, rw):
    names = {1: "BYTE", 2: "WORD", 4: "DWORD", 8: "QWORD"}
    lines = ["f:"]
    for off, w, v in writes:
        lines.append(f" mov rax, {v:#x}")
        lines.append(f" mov {names[w]} PTR [rdi+{off:#x}], {'al ax eax rax'.split()[[1, 2, 4, 8].index(w)]}")
    lines.append(f" mov {'al ax eax rax'.split()[[1, 2, 4, 8].index(rw)]}, {names[rw]} PTR [rdi+{roff:#x}]")
    lines.append(" ret")
    p = parse_program("\n".join(lines) + "\n")
    _, st_ = run(p, "f", _env(rdi=0x1000))
    shadow = {}
    for off, w, v in writes:
        for k in range(w):
            shadow[off + k] = (v >> (8 * k)) & 0xFF
    expect = sum(shadow.get(roff + k, 0) << (8 * k) for k in range(rw))
    assert st_.regs["rax"] & ((1 << (8 * rw)) - 1) == expect
