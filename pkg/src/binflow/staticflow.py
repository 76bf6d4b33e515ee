"""Intra-procedural static data-flow analysis (reaching definitions).

Register values are tracked in a small affine domain (constants, a symbol
plus an offset, or Top).  Memory definitions are keyed by abstract address.
How an address is resolved and how calls are modeled depends on
:class:`AnalysisConfig`:

* baseline: an address built from an unknown value is concretized to the single
  constant ``ADDR_CONC``, so all such addresses alias one another; stack
  addresses relative to the entry stack pointer are tracked exactly; a call
  kills every memory definition.
* ``c1_calling_convention``: memory definitions survive calls.
* ``c2_stack_preservation``: the call's return-address push is suppressed and
  the stack pointer after the call equals the one before it.
* ``f_field_disunion``: only the unknown base is concretized, as a region of
  its own, so distinct constant offsets from one base do not alias and
  different bases never alias.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Union

from .dynflow import DataFlowGraph, Scope
from .isa import (
    ALU, CALLER_SAVED, CFG, GPRS, Function, Imm, Instruction, MemExpr, Program, Register,
    SymbolRef, build_cfg,
)

ADDR_CONC = 0x0DEAD000
MASK64 = (1 << 64) - 1
CONCRETE = "<concrete>"
TOP_REGION = "<top>"
STACK_SYMBOL = "rsp0"


class AnalysisError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# values


@dataclass(frozen=True)
class Const:
    value: int

    def __post_init__(self):
        object.__setattr__(self, "value", self.value & MASK64)


@dataclass(frozen=True)
class Sym:
    base: str
    offset: int | None = 0  # None: unknown offset from the base


class _Top:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self) -> str:
        return "TOP"

    def __reduce__(self):
        return (_Top, ())


TOP = _Top()
SymValue = Union[Const, Sym, _Top]


def _signed(v: int) -> int:
    return v - (1 << 64) if v >> 63 else v


def add_values(a: SymValue, b: SymValue) -> SymValue:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if isinstance(a, Sym) and isinstance(b, Const):
        return Sym(a.base, None if a.offset is None else a.offset + _signed(b.value))
    if isinstance(a, Const) and isinstance(b, Sym):
        return add_values(b, a)
    return TOP


def neg_value(a: SymValue) -> SymValue:
    return Const(-a.value) if isinstance(a, Const) else TOP


def scale_value(a: SymValue, s: int) -> SymValue:
    if s == 1:
        return a
    return Const(a.value * s) if isinstance(a, Const) else TOP


def join_values(a: SymValue, b: SymValue) -> SymValue:
    if a == b:
        return a
    if isinstance(a, Sym) and isinstance(b, Sym) and a.base == b.base:
        return Sym(a.base, None)
    return TOP


def value_leq(a: SymValue, b: SymValue) -> bool:
    return a == b or b is TOP or (isinstance(a, Sym) and isinstance(b, Sym)
                                  and a.base == b.base and b.offset is None)


# ---------------------------------------------------------------------------
# addresses


@dataclass(frozen=True)
class AbsAddress:
    region: str  # CONCRETE, TOP_REGION, or a base symbol
    offset: int | None  # None: unknown offset within the region
    width: int

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("width must be positive")

    def covers(self, other: "AbsAddress") -> bool:
        """Every concrete location of ``other`` is a location of ``self``."""
        if self.region == TOP_REGION:
            return True
        if self.region != other.region:
            return False
        if self.offset is None:
            return True
        if other.offset is None:
            return False
        return self.offset <= other.offset and other.offset + other.width <= self.offset + self.width


class Alias(str, enum.Enum):
    MUST = "Must"
    MAY = "May"
    NO = "No"


def alias(a: AbsAddress, b: AbsAddress, config: "AnalysisConfig | None" = None) -> Alias:
    if a.region == TOP_REGION or b.region == TOP_REGION:
        return Alias.MAY
    if a.region != b.region:
        return Alias.NO
    if a.offset is None or b.offset is None:
        return Alias.MAY
    if a.offset < b.offset + b.width and b.offset < a.offset + a.width:
        return Alias.MUST
    return Alias.NO


@dataclass(frozen=True)
class Definition:
    writer: int
    addr: AbsAddress


@dataclass(frozen=True)
class AnalysisConfig:
    c1_calling_convention: bool = False
    c2_stack_preservation: bool = False
    f_field_disunion: bool = False
    passes_per_block: int = 4  # fixpoint bound K: at most K * |blocks| passes

    @property
    def name(self) -> str:
        c = self.c1_calling_convention and self.c2_stack_preservation
        parts = ("C" if c else "".join(n for n, on in (("C1", self.c1_calling_convention),
                                                      ("C2", self.c2_stack_preservation)) if on))
        parts += "F" if self.f_field_disunion else ""
        return f"angr_{parts}" if parts else "angr"


PRESETS = {
    "baseline": AnalysisConfig(),
    "angr": AnalysisConfig(),
    "c": AnalysisConfig(True, True, False),
    "angr-c": AnalysisConfig(True, True, False),
    "f": AnalysisConfig(False, False, True),
    "angr-f": AnalysisConfig(False, False, True),
    "cf": AnalysisConfig(True, True, True),
    "angr-cf": AnalysisConfig(True, True, True),
}


def preset(name: str) -> AnalysisConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# abstract state

Writers = tuple[frozenset, ...]
_NO_WRITERS: Writers = (frozenset(),) * 8


@dataclass
class AbsState:
    regs: dict[str, SymValue]
    writers: dict[str, Writers]  # per-byte register writers, for register edges
    mem: dict[Definition, SymValue]  # live definitions and the values they stored
    epoch: str | None = "entry"  # generation of untouched memory; None after conflicting joins

    @property
    def rsp_bias(self) -> int | None:
        """Stack pointer offset from its entry value, when known."""
        v = self.regs.get("rsp")
        return v.offset if isinstance(v, Sym) and v.base == STACK_SYMBOL else None

    def copy(self) -> "AbsState":
        return AbsState(dict(self.regs), dict(self.writers), dict(self.mem), self.epoch)


def entry_state() -> AbsState:
    regs = {r: Sym(f"{r}0", 0) for r in GPRS}
    return AbsState(regs, {r: _NO_WRITERS for r in GPRS}, {})


def join(s1: AbsState, s2: AbsState) -> AbsState:
    regs = {r: join_values(s1.regs[r], s2.regs[r]) for r in s1.regs}
    writers = {r: tuple(a | b for a, b in zip(s1.writers[r], s2.writers[r])) for r in s1.writers}
    # a definition live on one side only may not have happened: its value is unknown
    mem = {d: v if d in s2.mem else TOP for d, v in s1.mem.items()}
    for d, v in s2.mem.items():
        mem[d] = join_values(s1.mem[d], v) if d in s1.mem else TOP
    epoch = s1.epoch if s1.epoch == s2.epoch else None
    return AbsState(regs, writers, mem, epoch)


def state_leq(s1: AbsState, s2: AbsState) -> bool:
    """Partial order of the lattice: ``s2`` over-approximates ``s1``."""
    if not all(value_leq(s1.regs[r], s2.regs[r]) for r in s1.regs):
        return False
    if not all(a <= b for r in s1.writers for a, b in zip(s1.writers[r], s2.writers[r])):
        return False
    if s1.epoch != s2.epoch and s2.epoch is not None:
        return False
    for d, v in s1.mem.items():
        if not any(d2.writer == d.writer and d2.addr.covers(d.addr) and value_leq(v, v2)
                   for d2, v2 in s2.mem.items()):
            return False
    return True


# ---------------------------------------------------------------------------
# transfer


@dataclass
class _Ctx:
    config: AnalysisConfig
    program: Program | None
    next_addr: dict[int, int] = field(default_factory=dict)
    edges: set = field(default_factory=set)
    call_args: dict[int, tuple[str, ...]] = field(default_factory=dict)


def _read_reg(s: AbsState, r: Register, at: int, ctx: _Ctx) -> SymValue:
    if r.canonical == "rip":
        return Const(ctx.next_addr.get(at, at + 1))
    for b in range(r.size):
        for w in s.writers[r.canonical][b]:
            ctx.edges.add((w, at, r.canonical))
    v = s.regs[r.canonical]
    if r.width == 64:
        return v
    return Const(v.value & ((1 << r.width) - 1)) if isinstance(v, Const) else TOP


def _write_reg(s: AbsState, r: Register, v: SymValue, at: int | None) -> None:
    c = r.canonical
    mine = frozenset() if at is None else frozenset({at})
    if r.width == 64:
        s.regs[c] = v
        s.writers[c] = (mine,) * 8
    elif r.width == 32:
        s.regs[c] = Const(v.value & 0xFFFFFFFF) if isinstance(v, Const) else TOP
        s.writers[c] = (mine,) * 8
    else:
        old = s.regs[c]
        mask = (1 << r.width) - 1
        if isinstance(old, Const) and isinstance(v, Const):
            s.regs[c] = Const((old.value & ~mask) | (v.value & mask))
        else:
            s.regs[c] = TOP
        s.writers[c] = (mine,) * r.size + s.writers[c][r.size:]


def resolve_address(s: AbsState, m: MemExpr, config: AnalysisConfig, width: int,
                    program: Program | None = None, next_addr: int | None = None,
                    reader: "callable | None" = None) -> AbsAddress:
    """Abstract address of ``m`` (see the module docstring for the two modes)."""
    read = reader or (lambda r: s.regs[r.canonical] if r.width == 64 else TOP)
    const = m.disp
    if m.symbol is not None:
        if program is None:
            raise AnalysisError(f"symbol {m.symbol} needs a program")
        const += program.global_address(m.symbol)
    terms: list[SymValue] = []
    base_val = None
    if m.base is not None:
        if m.base.canonical == "rip":
            if m.symbol is None:
                const += next_addr if next_addr is not None else 0
        else:
            base_val = read(m.base)
            terms.append(base_val)
    if m.index is not None:
        terms.append(scale_value(read(m.index), m.scale))
    total: SymValue = Const(const)
    for t in terms:
        total = add_values(total, t)

    if isinstance(total, Const):
        return AbsAddress(CONCRETE, total.value, width)
    if not config.f_field_disunion:
        if isinstance(total, Sym) and total.base == STACK_SYMBOL and total.offset is not None:
            return AbsAddress(STACK_SYMBOL, total.offset, width)
        return AbsAddress(CONCRETE, ADDR_CONC, width)
    indexed = m.index is not None and not isinstance(terms[-1], Const)
    if isinstance(total, Sym) and not indexed:
        return AbsAddress(total.base, total.offset, width)
    if isinstance(base_val, Sym):
        return AbsAddress(base_val.base, None, width)
    if isinstance(base_val, Const) or (base_val is None and m.symbol is not None):
        return AbsAddress(CONCRETE, None, width)
    return AbsAddress(TOP_REGION, None, width)


def _store(s: AbsState, a: AbsAddress, v: SymValue, at: int) -> None:
    if a.region != TOP_REGION and a.offset is not None:
        lo, hi = a.offset, a.offset + a.width
        for d in [d for d in s.mem if d.addr.region == a.region and d.addr.offset is not None]:
            dlo, dhi = d.addr.offset, d.addr.offset + d.addr.width
            if dhi <= lo or hi <= dlo:
                continue
            s.mem.pop(d)
            # keep the bytes of the old definition that this write leaves intact
            for plo, phi in ((dlo, min(dhi, lo)), (max(dlo, hi), dhi)):
                if phi > plo:
                    piece = Definition(d.writer, AbsAddress(a.region, plo, phi - plo))
                    s.mem[piece] = TOP
    s.mem[Definition(at, a)] = v


def _load(s: AbsState, a: AbsAddress, at: int, ctx: _Ctx) -> SymValue:
    hits = []
    for d, v in s.mem.items():
        al = alias(d.addr, a, ctx.config)
        if al is not Alias.NO:
            ctx.edges.add((d.writer, at, "mem"))
            hits.append((d, v, al))
    if len(hits) == 1 and hits[0][0].addr == a:
        return hits[0][1]
    if hits or s.epoch is None or a.offset is None or a.region == TOP_REGION:
        return TOP
    if a.region == CONCRETE and a.offset == ADDR_CONC:
        return TOP
    return Sym(f"[{a.region}{a.offset:+#x}:{a.width}]@{s.epoch}", 0)


def _width(op, i: Instruction) -> int:
    from .isa import access_width
    return access_width(op, i)


def apply_call(s: AbsState, callee: SymbolRef, config: AnalysisConfig, at: int,
               program: Program | None = None, ctx: _Ctx | None = None) -> AbsState:
    """State after a call to an out-of-scope callee."""
    s = s.copy()
    name = program.callee_name(callee) if program else callee.name
    allocators = program.allocator_symbols if program else frozenset({"malloc"})
    if ctx is not None:
        ctx.call_args[at] = tuple(r for r in ("rdi", "rsi", "rdx", "rcx", "r8", "r9")
                                  if any(s.writers[r]))
    rsp = s.regs["rsp"]
    if not config.c1_calling_convention:
        s.mem = {}
        s.epoch = f"call@{at:x}"
    if not config.c2_stack_preservation:
        # the pushed return address stays; nothing in scope pops it
        ret_slot = add_values(rsp, Const(-8))
        a = resolve_address(s, MemExpr(Register("rsp", "rsp", 64), disp=-8, width=8), config, 8,
                            program, reader=lambda r: s.regs[r.canonical])
        _store(s, a, Const(at), at)
        s.regs["rsp"] = ret_slot
    s.writers["rsp"] = _NO_WRITERS
    for r in CALLER_SAVED:
        s.regs[r] = Sym(f"{r}@{at:x}", 0)
        s.writers[r] = _NO_WRITERS
    tag = "heap" if name in allocators else "ret"
    s.regs["rax"] = Sym(f"{tag}@{at:x}", 0)
    return s


def eval_instruction(s: AbsState, i: Instruction, config: AnalysisConfig,
                     program: Program | None = None, ctx: _Ctx | None = None
                     ) -> tuple[AbsState, set]:
    """Transfer function of one instruction: new state and the edges it induces."""
    ctx = ctx or _Ctx(config, program)
    before = set(ctx.edges)
    s2 = _eval(s.copy(), i, ctx)
    return s2, ctx.edges - before


def _eval(s: AbsState, i: Instruction, ctx: _Ctx) -> AbsState:
    m, ops, at = i.mnemonic, i.operands, i.addr
    cfg, prog = ctx.config, ctx.program
    nxt = ctx.next_addr.get(at, at + 1)
    RSP = Register("rsp", "rsp", 64)

    def addr_of(mem: MemExpr, width: int) -> AbsAddress:
        return resolve_address(s, mem, cfg, width, prog, nxt, reader=lambda r: _read_reg(s, r, at, ctx))

    def value_of(op, width: int) -> SymValue:
        if isinstance(op, Imm):
            return Const(op.value & ((1 << (8 * width)) - 1)) if width < 8 else Const(op.value)
        if isinstance(op, Register):
            return _read_reg(s, op, at, ctx)
        return _load(s, addr_of(op, width), at, ctx)

    if m in ("nop", "jmp", "jz", "jnz"):
        return s
    if m == "mov":
        dst, src = ops
        w = _width(dst, i)
        if isinstance(dst, Register):
            _write_reg(s, dst, value_of(src, w), at)
        else:
            a = addr_of(dst, w)
            v = value_of(src, w)
            _store(s, a, v if w == 8 or isinstance(v, Const) else TOP, at)
        return s
    if m == "lea":
        dst, mem = ops
        a_val = Const(mem.disp + (prog.global_address(mem.symbol) if mem.symbol else 0))
        if mem.base is not None:
            a_val = add_values(a_val, _read_reg(s, mem.base, at, ctx) if mem.base.canonical != "rip"
                               else (Const(0) if mem.symbol else Const(nxt)))
        if mem.index is not None:
            a_val = add_values(a_val, scale_value(_read_reg(s, mem.index, at, ctx), mem.scale))
        _write_reg(s, dst, a_val, at)
        return s
    if m in ALU or m in ("cmp", "test", "shl", "shr"):
        dst, src = ops
        w = _width(dst, i)
        if i.is_clear_idiom():
            _write_reg(s, dst, Const(0), at)
            return s
        if isinstance(dst, MemExpr):
            a = addr_of(dst, w)
            b = value_of(src, w)
            old = _load(s, a, at, ctx)
        else:
            a = None
            old = _read_reg(s, dst, at, ctx)
            b = value_of(src, w)
        if m == "add":
            r = add_values(old, b)
        elif m == "sub":
            r = add_values(old, neg_value(b)) if isinstance(b, Const) else TOP
        else:
            r = TOP
        if m in ("cmp", "test"):
            return s
        if a is not None:
            _store(s, a, r if w == 8 else TOP, at)
        else:
            _write_reg(s, dst, r, at)
        return s
    if m == "push":
        (src,) = ops
        rsp = _read_reg(s, RSP, at, ctx)
        v = value_of(src, 8)
        new_rsp = add_values(rsp, Const(-8))
        a = resolve_address(s, MemExpr(RSP, disp=-8, width=8), cfg, 8, prog, nxt,
                            reader=lambda r: rsp)
        _store(s, a, v, at)
        _write_reg(s, RSP, new_rsp, at)
        return s
    if m == "pop":
        (dst,) = ops
        rsp = _read_reg(s, RSP, at, ctx)
        a = resolve_address(s, MemExpr(RSP, width=8), cfg, 8, prog, nxt, reader=lambda r: rsp)
        v = _load(s, a, at, ctx)
        if isinstance(dst, Register):
            _write_reg(s, dst, v, at)
        else:
            _store(s, addr_of(dst, 8), v, at)
        _write_reg(s, RSP, add_values(rsp, Const(8)), at)
        return s
    if m == "call":
        _read_reg(s, RSP, at, ctx)
        return apply_call(s, i.target, cfg, at, prog, ctx)
    if m == "ret":
        rsp = _read_reg(s, RSP, at, ctx)
        a = resolve_address(s, MemExpr(RSP, width=8), cfg, 8, prog, nxt, reader=lambda r: rsp)
        _load(s, a, at, ctx)
        _write_reg(s, RSP, add_values(rsp, Const(8)), at)
        return s
    raise AnalysisError(f"unsupported instruction {i}")


# ---------------------------------------------------------------------------
# fixpoint


@dataclass
class AnalysisResult:
    dfg: DataFlowGraph
    passes: int
    call_args: dict[int, tuple[str, ...]]  # argument registers defined at each call


def _rpo(cfg: CFG) -> list[int]:
    succ = {b.leader: cfg.successors(b.leader) for b in cfg.blocks}
    seen, order = set(), []

    def visit(n):
        stack = [(n, iter(succ[n]))]
        seen.add(n)
        while stack:
            node, it = stack[-1]
            for m in it:
                if m not in seen:
                    seen.add(m)
                    stack.append((m, iter(succ[m])))
                    break
            else:
                order.append(node)
                stack.pop()

    if cfg.blocks:
        visit(cfg.blocks[0].leader)
    order.reverse()
    return order


def analyze(p: Program, f: Function, cfg: CFG | None = None, config: AnalysisConfig | None = None
            ) -> AnalysisResult:
    config = config or AnalysisConfig()
    cfg = cfg or build_cfg(f)
    ctx = _Ctx(config, p)
    for a, b in zip(f.instrs, f.instrs[1:]):
        ctx.next_addr[a.addr] = b.addr
    by_addr = {i.addr: i for i in f.instrs}
    order = _rpo(cfg)
    preds = {b.leader: cfg.predecessors(b.leader) for b in cfg.blocks}
    entry = cfg.blocks[0].leader if cfg.blocks else None
    out: dict[int, AbsState] = {}
    limit = config.passes_per_block * max(1, len(cfg.blocks))

    def block_in(leader: int) -> AbsState | None:
        states = [out[q] for q in preds[leader] if q in out]
        if leader == entry:
            states.insert(0, entry_state())
        if not states:
            return None
        s = states[0]
        for t in states[1:]:
            s = join(s, t)
        return s

    def run_block(leader: int, s: AbsState, collect: _Ctx) -> AbsState:
        for a in cfg.block(leader).addrs:
            s = _eval(s, by_addr[a], collect)
        return s

    ins: dict[int, AbsState] = {}
    passes = 0
    changed = True
    while changed:
        passes += 1
        if passes > limit:
            raise AnalysisError(
                f"{f.name}: no fixpoint after {limit} passes over {len(cfg.blocks)} blocks "
                f"(bound {config.passes_per_block} per block)")
        changed = False
        scratch = _Ctx(config, p, ctx.next_addr)
        for leader in order:
            s = block_in(leader)
            if s is None:
                continue
            # entry states only grow; joining with the previous one widens
            # offsets that change from pass to pass
            if leader in ins:
                s = join(ins[leader], s)
            ins[leader] = s
            new = run_block(leader, s.copy(), scratch)
            if out.get(leader) != new:
                out[leader] = new
                changed = True

    for leader in order:
        if leader in ins:
            run_block(leader, ins[leader].copy(), ctx)

    g = DataFlowGraph(set(f.addrs), function_of={a: f.name for a in f.addrs})
    for (src, dst, ch) in sorted(ctx.edges):
        g.add(src, dst, ch, Scope.INTRA)
    g.nodes = set(f.addrs)
    return AnalysisResult(g, passes, ctx.call_args)


def analyze_function(p: Program, f: Function, cfg: CFG | None = None,
                     config: AnalysisConfig | None = None) -> DataFlowGraph:
    return analyze(p, f, cfg, config).dfg
