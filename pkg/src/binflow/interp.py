"""Concrete interpreter for the assembly subset, producing access traces.

Every executed instruction logs one :class:`TraceEvent` per register or memory
access, reads before writes.  The traces feed the dynamic data-flow graph
builder and the brute-force data-flow oracle.

Memory layout (all regions disjoint):

    stack    [STACK_TOP - STACK_SIZE, STACK_TOP), rsp starts at STACK_INIT
    globals  the program's .data objects, rounded out to whole pages
    heap     [HEAP_BASE, HEAP_END), 16-byte aligned, HEAP_GUARD bytes between blocks
    extra    regions declared by the environment (e.g. memory behind foreign pointers)
"""
from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Sequence

from .isa import (
    ALU, Imm, Instruction, MemExpr, Program, Register, SymbolRef, access_width,
)

MASK64 = (1 << 64) - 1

STACK_TOP = 0x7FFF0000
STACK_SIZE = 0x100000
STACK_INIT = STACK_TOP - 0x1000
GLOBAL_BASE = 0x600000
HEAP_BASE = 0x01000000
HEAP_END = 0x02000000
HEAP_GUARD = 0x100
RET_SENTINEL = 0xDEADBEEFCAFE0000
EXTERNAL_RETURN = 0


class ExecutionError(RuntimeError):
    pass


class MemoryFault(ExecutionError):
    pass


class UndefinedRegisterError(ExecutionError):
    pass


class StepLimitExceeded(ExecutionError):
    pass


class InconclusiveOracle(ValueError):
    pass


@dataclass(frozen=True)
class MemRegion:
    name: str
    start: int
    size: int

    @property
    def end(self) -> int:
        return self.start + self.size

    def contains(self, addr: int, size: int = 1) -> bool:
        return self.start <= addr and addr + size <= self.end


@dataclass(frozen=True)
class Environment:
    """Initial machine state chosen by the harness.

    Registers absent from ``initial_regs`` are undefined.  Reading one is an
    error unless ``undefined_policy`` lists candidate values for it; a single
    execution takes the first candidate, and :func:`expand` enumerates all.
    """
    initial_regs: dict[str, int] = field(default_factory=dict)
    memory_seed: dict[int, int] = field(default_factory=dict)
    undefined_policy: dict[str, tuple[int, ...]] = field(default_factory=dict)
    regions: tuple[MemRegion, ...] = ()

    def __hash__(self):
        return hash((tuple(sorted(self.initial_regs.items())), tuple(sorted(self.memory_seed.items()))))


def expand(env: Environment) -> list[Environment]:
    """All concrete environments obtained by binding every policy register."""
    names = sorted(r for r in env.undefined_policy if r not in env.initial_regs)
    if not names:
        return [env]
    out = []
    for values in itertools.product(*(env.undefined_policy[n] for n in names)):
        regs = dict(env.initial_regs)
        regs.update((n, v & MASK64) for n, v in zip(names, values))
        out.append(replace(env, initial_regs=regs, undefined_policy={}))
    return out


class Access(str, enum.Enum):
    WRITE = "Write"
    READ = "Read"


@dataclass(frozen=True)
class TraceEvent:
    instr_addr: int
    access: Access
    channel: str  # canonical register name or "mem"
    location: int | str  # memory address or canonical register name
    size: int
    context: int
    callee: str | None = None  # set on events performed by an external callee stub

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("event size must be positive")
        if (self.channel == "mem") != isinstance(self.location, int):
            raise ValueError("mem channel requires an address location")

    def to_json(self) -> dict:
        d = {"instr_addr": self.instr_addr, "access": self.access.value, "channel": self.channel,
             "location": self.location, "size": self.size, "context": self.context}
        if self.callee is not None:
            d["callee"] = self.callee
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TraceEvent":
        try:
            return cls(int(d["instr_addr"]), Access(d["access"]), str(d["channel"]), d["location"],
                       int(d["size"]), int(d["context"]), d.get("callee"))
        except (KeyError, TypeError) as e:
            raise ValueError(f"malformed trace event {d!r}") from e


@dataclass
class MachineState:
    regs: dict[str, int]
    defined: set[str]
    memory: dict[int, int]
    call_stack: list[tuple[int, int]]
    alloc_cursor: int = HEAP_BASE
    zf: bool = False
    allocations: list[tuple[int, int]] = field(default_factory=list)


def default_regions(p: Program) -> list[MemRegion]:
    regions = [MemRegion("stack", STACK_TOP - STACK_SIZE, STACK_SIZE),
               MemRegion("heap", HEAP_BASE, HEAP_END - HEAP_BASE)]
    if p.globals:
        lo = min(a for a, _ in p.globals.values()) & ~0xFFF
        hi = (max(a + s for a, s in p.globals.values()) + 0xFFF) & ~0xFFF
        regions.append(MemRegion("globals", lo, hi - lo))
    return regions


class _Machine:
    def __init__(self, p: Program, env: Environment, step_limit: int):
        self.p = p
        self.env = env
        self.step_limit = step_limit
        self.regions = default_regions(p) + list(env.regions)
        regs = {r: v & MASK64 for r, v in env.initial_regs.items()}
        regs.setdefault("rsp", STACK_INIT)
        self.st = MachineState(regs, set(regs), {}, [])
        for a, b in env.memory_seed.items():
            self._check(a, 1)
            self.st.memory[a] = b & 0xFF
        self.events: list[TraceEvent] = []
        self.ctx = 0
        self.next_ctx = 1
        self.index = {}
        for f in p.functions.values():
            for n, i in enumerate(f.instrs):
                self.index[i.addr] = (f, n)

    # -- primitive access ------------------------------------------------

    def _log(self, i: Instruction, access: Access, channel: str, loc, size: int,
             ctx: int | None = None, callee: str | None = None):
        self.events.append(TraceEvent(i.addr, access, channel, loc, size,
                                      self.ctx if ctx is None else ctx, callee))

    def _check(self, addr: int, size: int):
        for r in self.regions:
            if r.contains(addr, size):
                return
        raise MemoryFault(f"access of {size} bytes at 0x{addr:x} outside declared regions")

    def reg_value(self, canon: str) -> int:
        st = self.st
        if canon not in st.defined:
            pol = self.env.undefined_policy.get(canon)
            if not pol:
                raise UndefinedRegisterError(f"read of undefined register {canon}")
            st.regs[canon] = pol[0] & MASK64
            st.defined.add(canon)
        return st.regs[canon]

    def read_reg(self, i: Instruction, r: Register, log: bool = True) -> int:
        if log:
            self._log(i, Access.READ, r.canonical, r.canonical, r.size)
        if r.canonical == "rip":
            f, n = self.index[i.addr]
            return f.instrs[n + 1].addr if n + 1 < len(f.instrs) else i.addr + 1
        return self.reg_value(r.canonical) & ((1 << r.width) - 1)

    def write_reg(self, i: Instruction, r: Register, value: int, ctx=None, callee=None):
        st = self.st
        value &= (1 << r.width) - 1
        if r.width >= 32:
            # 32-bit writes zero-extend into the full register
            st.regs[r.canonical] = value
            size = 8
        else:
            old = st.regs.get(r.canonical, 0) if r.canonical in st.defined else 0
            keep = MASK64 ^ ((1 << r.width) - 1)
            st.regs[r.canonical] = (old & keep) | value
            size = r.size
        st.defined.add(r.canonical)
        self._log(i, Access.WRITE, r.canonical, r.canonical, size, ctx, callee)

    def read_mem(self, i: Instruction, addr: int, size: int, ctx=None, callee=None) -> int:
        self._check(addr, size)
        self._log(i, Access.READ, "mem", addr, size, ctx, callee)
        return int.from_bytes(bytes(self.st.memory.get(addr + k, 0) for k in range(size)), "little")

    def write_mem(self, i: Instruction, addr: int, size: int, value: int, ctx=None, callee=None):
        self._check(addr, size)
        self._log(i, Access.WRITE, "mem", addr, size, ctx, callee)
        for k, b in enumerate((value & ((1 << (8 * size)) - 1)).to_bytes(size, "little")):
            self.st.memory[addr + k] = b

    def address(self, i: Instruction, m: MemExpr) -> int:
        addr = m.disp
        if m.symbol is not None:
            addr += self.p.global_address(m.symbol)
            if m.base is not None and m.base.canonical == "rip":
                # rip-relative symbol reference: the symbol already names the target
                self._log(i, Access.READ, "rip", "rip", 8)
                base = None
            else:
                base = m.base
        else:
            base = m.base
        if base is not None:
            addr += self.read_reg(i, base)
        if m.index is not None:
            addr += self.read_reg(i, m.index) * m.scale
        return addr & MASK64

    # -- operands ----------------------------------------------------------

    def load(self, i: Instruction, op, width: int) -> int:
        """Read an operand; ``width`` in bytes is used for immediates."""
        if isinstance(op, Register):
            return self.read_reg(i, op)
        if isinstance(op, Imm):
            return op.value & ((1 << (8 * width)) - 1)
        if isinstance(op, MemExpr):
            return self.read_mem(i, self.address(i, op), access_width(op, i))
        raise ExecutionError(f"cannot load {op}")

    # -- execution -----------------------------------------------------------

    def run(self, entry: str) -> list[TraceEvent]:
        if entry not in self.p.functions:
            raise KeyError(f"unknown entry function {entry!r}")
        f = self.p.functions[entry]
        if not f.instrs:
            raise ExecutionError(f"function {entry} is empty")
        st = self.st
        # the harness's own call into the entry function is not traced
        rsp = (self.reg_value("rsp") - 8) & MASK64
        self._check(rsp, 8)
        for k, b in enumerate(RET_SENTINEL.to_bytes(8, "little")):
            st.memory[rsp + k] = b
        st.regs["rsp"] = rsp
        pc = f.entry
        steps = 0
        while pc is not None:
            steps += 1
            if steps > self.step_limit:
                raise StepLimitExceeded(f"step limit {self.step_limit} exceeded at 0x{pc:x}")
            if pc not in self.index:
                raise ExecutionError(f"control transfer to 0x{pc:x} outside the program")
            pc = self.step(pc)
        return self.events

    def _next(self, addr: int) -> int:
        f, n = self.index[addr]
        if n + 1 >= len(f.instrs):
            raise ExecutionError(f"fell off the end of {f.name} at 0x{addr:x}")
        return f.instrs[n + 1].addr

    def _return_addr(self, addr: int) -> int:
        f, n = self.index[addr]
        return f.instrs[n + 1].addr if n + 1 < len(f.instrs) else addr + 1

    def step(self, pc: int) -> int | None:
        i = self.index[pc][0].instrs[self.index[pc][1]]
        m, ops = i.mnemonic, i.operands
        st = self.st
        if m == "nop":
            return self._next(pc)
        if m == "mov":
            dst, src = ops
            w = access_width(dst, i) if not isinstance(dst, Register) else dst.size
            self.store(i, dst, self.load(i, src, w), w)
            return self._next(pc)
        if m == "lea":
            dst, src = ops
            self.write_reg(i, dst, self.address(i, src))
            return self._next(pc)
        if m in ALU or m in ("cmp", "test", "shl", "shr"):
            dst, src = ops
            w = access_width(dst, i)
            bits = 8 * w
            clear = i.is_clear_idiom()
            if isinstance(dst, MemExpr):
                addr = self.address(i, dst)
                if isinstance(src, Register):
                    b = self.read_reg(i, src)
                else:
                    b = src.value & ((1 << bits) - 1)
                a = self.read_mem(i, addr, w)
            else:
                addr = None
                if clear:
                    self._log(i, Access.READ, dst.canonical, dst.canonical, dst.size)
                    a = b = 0
                else:
                    a = self.read_reg(i, dst)
                    b = self.load(i, src, w)
            mask = (1 << bits) - 1
            if m in ("add",):
                r = (a + b) & mask
            elif m in ("sub", "cmp"):
                r = (a - b) & mask
            elif m in ("and", "test"):
                r = a & b
            elif m == "or":
                r = a | b
            elif m == "xor":
                r = a ^ b
            elif m == "shl":
                r = (a << (b & 63)) & mask
            else:
                r = (a >> (b & 63)) & mask
            st.zf = r == 0
            if m not in ("cmp", "test"):
                if addr is not None:
                    self.write_mem(i, addr, w, r)
                else:
                    self.write_reg(i, dst, r)
            return self._next(pc)
        if m == "push":
            (src,) = ops
            rsp = self.read_reg(i, Register("rsp", "rsp", 64))
            v = self.load(i, src, 8)
            self.write_mem(i, rsp - 8, 8, v)
            self.write_reg(i, Register("rsp", "rsp", 64), rsp - 8)
            return self._next(pc)
        if m == "pop":
            (dst,) = ops
            rsp = self.read_reg(i, Register("rsp", "rsp", 64))
            v = self.read_mem(i, rsp, 8)
            self.store(i, dst, v, 8)
            self.write_reg(i, Register("rsp", "rsp", 64), rsp + 8)
            return self._next(pc)
        if m == "jmp":
            return i.target.addr
        if m in ("jz", "jnz"):
            taken = st.zf if m == "jz" else not st.zf
            return i.target.addr if taken else self._next(pc)
        if m == "call":
            return self.call(i)
        if m == "ret":
            return self.ret(i)
        raise ExecutionError(f"unsupported instruction {i}")

    def store(self, i: Instruction, dst, v: int, w: int):
        if isinstance(dst, Register):
            self.write_reg(i, dst, v)
        else:
            self.write_mem(i, self.address(i, dst), w, v)

    def call(self, i: Instruction) -> int:
        RSP = Register("rsp", "rsp", 64)
        ref: SymbolRef = i.target
        ret_addr = self._return_addr(i.addr)
        rsp = self.read_reg(i, RSP)
        self.write_mem(i, rsp - 8, 8, ret_addr)
        self.write_reg(i, RSP, rsp - 8)
        callee = self.p.function_by_entry(ref.addr) if ref.addr is not None else None
        if callee is None and ref.name in self.p.functions:
            callee = self.p.functions[ref.name]
        if callee is not None and callee.instrs:
            self.st.call_stack.append((ret_addr, self.ctx))
            self.ctx = self.next_ctx
            self.next_ctx += 1
            return callee.entry
        # external callee stub, executed in its own activation
        name = self.p.callee_name(ref) or str(ref)
        ctx = self.next_ctx
        self.next_ctx += 1
        if name in self.p.allocator_symbols:
            self._log(i, Access.READ, "rdi", "rdi", 8, ctx, name)
            size = self.reg_value("rdi")
            base = (self.st.alloc_cursor + 15) & ~15
            end = base + max(size, 1)
            if end > HEAP_END:
                raise MemoryFault("heap exhausted")
            self.st.allocations.append((base, max(size, 1)))
            self.st.alloc_cursor = end + HEAP_GUARD
            result = base
        else:
            result = EXTERNAL_RETURN
        rsp = rsp - 8
        self._log(i, Access.READ, "rsp", "rsp", 8, ctx, name)
        self.read_mem(i, rsp, 8, ctx, name)
        self.write_reg(i, Register("rax", "rax", 64), result, ctx, name)
        self.write_reg(i, RSP, rsp + 8, ctx, name)
        return ret_addr

    def ret(self, i: Instruction) -> int | None:
        RSP = Register("rsp", "rsp", 64)
        rsp = self.read_reg(i, RSP)
        target = self.read_mem(i, rsp, 8)
        self.write_reg(i, RSP, rsp + 8)
        if not self.st.call_stack:
            if target != RET_SENTINEL:
                raise ExecutionError(f"corrupted return address 0x{target:x} at 0x{i.addr:x}")
            return None
        expected, ctx = self.st.call_stack.pop()
        if target != expected:
            raise ExecutionError(f"corrupted return address 0x{target:x} at 0x{i.addr:x}")
        self.ctx = ctx
        return target


def run(p: Program, entry: str, env: Environment, step_limit: int = 100_000
        ) -> tuple[list[TraceEvent], MachineState]:
    """Execute ``entry`` and return the trace together with the final state."""
    if step_limit <= 0:
        raise ValueError("step_limit must be positive")
    mach = _Machine(p, env, step_limit)
    return mach.run(entry), mach.st


def execute(p: Program, entry: str, env: Environment, step_limit: int = 100_000) -> list[TraceEvent]:
    return run(p, entry, env, step_limit)[0]


class Verdict(str, enum.Enum):
    ALWAYS = "Always"
    SOMETIMES = "Sometimes"
    NEVER = "Never"


def observed_flow(events: Iterable[TraceEvent], write_addr: int, read_addr: int) -> tuple[bool, bool]:
    """(both executed, flow observed) for one trace.

    A flow is observed when some byte read by ``read_addr`` was last written
    by ``write_addr``.
    """
    last: dict[int, int] = {}
    wrote = read = flow = False
    for e in events:
        if e.channel != "mem":
            continue
        if e.access is Access.WRITE:
            for k in range(e.size):
                last[e.location + k] = e.instr_addr
            wrote |= e.instr_addr == write_addr
        elif e.instr_addr == read_addr:
            read = True
            if any(last.get(e.location + k) == write_addr for k in range(e.size)):
                flow = True
    return wrote and read, flow


def oracle_data_flow(p: Program, write_addr: int, read_addr: int, env_space: Sequence[Environment],
                     entry: str = "f_target", step_limit: int = 100_000) -> Verdict:
    """Brute-force degree of the flow write→read over concrete environments.

    Environments with policy registers are expanded first.  Executions that
    fault on memory are skipped; if no execution reaches both instructions
    the verdict is inconclusive and an error is raised.
    """
    if not env_space:
        raise ValueError("env_space must not be empty")
    seen = hits = 0
    for env in env_space:
        for concrete in expand(env):
            try:
                events = execute(p, entry, concrete, step_limit)
            except MemoryFault:
                continue
            both, flow = observed_flow(events, write_addr, read_addr)
            if both:
                seen += 1
                hits += flow
    if seen == 0:
        raise InconclusiveOracle(
            f"instructions 0x{write_addr:x}/0x{read_addr:x} never executed together")
    if hits == seen:
        return Verdict.ALWAYS
    return Verdict.NEVER if hits == 0 else Verdict.SOMETIMES


def emit_trace(events: Iterable[TraceEvent], sink: IO[str]) -> None:
    for e in events:
        sink.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def read_trace(source: IO[str]) -> list[TraceEvent]:
    out = []
    for n, line in enumerate(source, 1):
        line = line.strip()
        if not line:
            continue
        try:
            out.append(TraceEvent.from_json(json.loads(line)))
        except (json.JSONDecodeError, ValueError) as e:
            raise ValueError(f"trace line {n}: {e}") from None
    return out
