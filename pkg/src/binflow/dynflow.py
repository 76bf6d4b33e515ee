"""Dynamic data-flow graphs built from access traces.

Nodes are instruction addresses.  An edge ``src -> dst`` on a channel means
``dst`` read at least one byte of a register or memory location whose last
writer was ``src``.  The scope of an edge records whether writer and reader ran
in the same function activation (Intra), in different ones (Inter), or both
were observed (Both).
"""
from __future__ import annotations

import enum
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence, Union

from .genbench import AliasClass, PointerOrigin
from .interp import Access, TraceEvent, read_trace
from .isa import ARG_REGS, Instruction, MemExpr, Program, Register

HEAP_TOKEN = "heap"
MEM_TOKEN = "mem"


class Scope(str, enum.Enum):
    INTRA = "Intra"
    INTER = "Inter"
    BOTH = "Both"

    def join(self, other: "Scope") -> "Scope":
        return self if self is other else Scope.BOTH


@dataclass(frozen=True)
class DataFlowEdge:
    src: int
    dst: int
    channel: str
    scope: Scope = Scope.INTRA

    @property
    def key(self) -> tuple[int, int, str]:
        return (self.src, self.dst, self.channel)


EdgeKey = tuple[int, int, str]


@dataclass
class DataFlowGraph:
    nodes: set[int] = field(default_factory=set)
    edges: dict[EdgeKey, Scope] = field(default_factory=dict)
    function_of: dict[int, str] = field(default_factory=dict)
    # call sites whose callee was an allocator
    alloc_sites: set[int] = field(default_factory=set)
    # inter-only flows into this graph's nodes, kept after intra extraction:
    # (dst, channel) -> writers
    boundary: dict[tuple[int, str], set[int]] = field(default_factory=dict)

    def add(self, src: int, dst: int, channel: str, scope: Scope) -> None:
        key = (src, dst, channel)
        old = self.edges.get(key)
        self.edges[key] = scope if old is None else old.join(scope)
        self.nodes.update((src, dst))

    def edge_list(self) -> list[DataFlowEdge]:
        return [DataFlowEdge(s, d, c, sc) for (s, d, c), sc in sorted(self.edges.items())]

    def edge_set(self, channel: str | None = None) -> set[EdgeKey]:
        return {k for k in self.edges if channel is None or k[2] == channel}

    def has_edge(self, src: int, dst: int, channel: str = "mem") -> bool:
        return (src, dst, channel) in self.edges

    def incoming(self, dst: int, channel: str) -> list[int]:
        return sorted(s for (s, d, c) in self.edges if d == dst and c == channel)

    def copy(self) -> "DataFlowGraph":
        return DataFlowGraph(set(self.nodes), dict(self.edges), dict(self.function_of),
                             set(self.alloc_sites), {k: set(v) for k, v in self.boundary.items()})

    def to_json(self) -> dict:
        return {"nodes": sorted(self.nodes),
                "edges": [{"src": e.src, "dst": e.dst, "channel": e.channel, "scope": e.scope.value}
                          for e in self.edge_list()]}

    @classmethod
    def from_json(cls, d: dict) -> "DataFlowGraph":
        g = cls(set(int(n) for n in d["nodes"]))
        for e in d["edges"]:
            g.edges[(int(e["src"]), int(e["dst"]), e["channel"])] = Scope(e.get("scope", "Intra"))
        return g

    def __eq__(self, other) -> bool:
        if not isinstance(other, DataFlowGraph):
            return NotImplemented
        return self.nodes == other.nodes and self.edges == other.edges


TraceSource = Union[Sequence[TraceEvent], str, Path]


def _load(trace: TraceSource) -> Sequence[TraceEvent]:
    if isinstance(trace, (str, Path)):
        with open(trace) as fh:
            return read_trace(fh)
    return trace


def build_interprocedural_dfg(traces: Iterable[TraceSource], program: Program | None = None) -> DataFlowGraph:
    """Fold traces into one graph with a byte-granular last-writer map."""
    allocators = program.allocator_symbols if program else frozenset({"malloc"})
    g = DataFlowGraph()
    for trace in traces:
        last: dict[tuple, tuple[int, int]] = {}
        for e in _load(trace):
            g.nodes.add(e.instr_addr)
            if e.callee is not None and e.callee in allocators:
                g.alloc_sites.add(e.instr_addr)
            if e.channel == "rip":
                continue
            if e.channel == "mem":
                keys = [("mem", e.location + k) for k in range(e.size)]
            else:
                keys = [(e.channel, k) for k in range(e.size)]
            if e.access is Access.WRITE:
                for key in keys:
                    last[key] = (e.instr_addr, e.context)
                continue
            found = {}
            for key in keys:
                w = last.get(key)
                if w is not None:
                    scope = Scope.INTRA if w[1] == e.context else Scope.INTER
                    prev = found.get(w[0])
                    found[w[0]] = scope if prev is None else prev.join(scope)
            for src, scope in found.items():
                g.add(src, e.instr_addr, e.channel, scope)
    if program is not None:
        for f in program.functions.values():
            for i in f.instrs:
                g.function_of[i.addr] = f.name
    return g


def extract_intraprocedural(g: DataFlowGraph, f: str, program: Program) -> DataFlowGraph:
    """Subgraph induced by ``f``'s instructions, without inter-only edges."""
    if f not in program.functions:
        raise KeyError(f"unknown function {f!r}")
    addrs = set(program.functions[f].addrs)
    nodes = g.nodes & addrs
    if not nodes:
        raise ValueError(f"function {f} never executed in the traces; graph is inconclusive")
    out = DataFlowGraph(nodes, function_of={a: f for a in addrs}, alloc_sites=set(g.alloc_sites))
    for (s, d, c), scope in g.edges.items():
        if d not in addrs:
            continue
        if s in addrs and scope is not Scope.INTER:
            out.edges[(s, d, c)] = scope
        else:
            out.boundary.setdefault((d, c), set()).add(s)
    for k, v in g.boundary.items():
        if k[0] in addrs:
            out.boundary.setdefault(k, set()).update(v)
    return out


def _stack_slot(op) -> bool:
    return (isinstance(op, MemExpr) and op.base is not None and op.index is None
            and op.base.canonical in ("rsp", "rbp"))


def _saved_register(i: Instruction) -> str | None:
    """Register stored to memory by a full-width save (push r / mov [m], r)."""
    if i.mnemonic == "push" and isinstance(i.operands[0], Register):
        return i.operands[0].canonical
    if (i.mnemonic == "mov" and _stack_slot(i.operands[0])
            and isinstance(i.operands[1], Register) and i.operands[1].width == 64):
        return i.operands[1].canonical
    return None


def _restored_register(i: Instruction) -> str | None:
    if i.mnemonic == "pop" and isinstance(i.operands[0], Register):
        return i.operands[0].canonical
    if (i.mnemonic == "mov" and isinstance(i.operands[0], Register)
            and _stack_slot(i.operands[1]) and i.operands[0].width == 64):
        return i.operands[0].canonical
    return None


def reconnect_save_restore(intra: DataFlowGraph, inter: DataFlowGraph, program: Program, f: str) -> DataFlowGraph:
    """Connect definitions of a register to its uses across a save/restore pair.

    A save ``v`` of register r to a stack slot and its restore ``s`` must be
    linked by a mem edge within one activation.  If both lie in ``f`` a call
    must sit between them (a spill around the call); otherwise both belong to
    a callee, as in a prologue/epilogue pair.
    """
    func = program.functions[f]
    addrs = set(func.addrs)
    calls = [i.addr for i in func.instrs if i.mnemonic == "call"]
    out = intra.copy()
    by_dst: dict[tuple[int, str], list[int]] = defaultdict(list)
    by_src: dict[tuple[int, str], list[int]] = defaultdict(list)
    for (s, d, c) in inter.edges:
        by_dst[(d, c)].append(s)
        by_src[(s, c)].append(d)
    for (v, s, c), scope in inter.edges.items():
        if c != "mem" or scope is Scope.INTER:
            continue
        try:
            iv, is_ = program.instruction(v), program.instruction(s)
        except KeyError:
            continue
        r = _saved_register(iv)
        if r is None or r != _restored_register(is_):
            continue
        if v in addrs and s in addrs and not any(v < a < s for a in calls):
            continue
        if (v in addrs) != (s in addrs):
            continue
        for d in by_dst[(v, r)]:
            if d not in addrs:
                continue
            for u in by_src[(s, r)]:
                if u in addrs and u != s:
                    out.add(d, u, r, Scope.INTRA)
    return out


def eliminate_clear_idioms(g: DataFlowGraph, program: Program, f: str) -> DataFlowGraph:
    """Drop flows into ``xor r, r`` / ``sub r, r``; they define r without using it."""
    out = g.copy()
    for i in program.functions[f].instrs:
        if i.is_clear_idiom():
            r = i.operands[0].canonical
            for key in [k for k in out.edges if k[1] == i.addr and k[2] == r]:
                del out.edges[key]
            out.boundary.pop((i.addr, r), None)
    return out


def normalize(intra: DataFlowGraph, inter: DataFlowGraph, program: Program, f: str) -> DataFlowGraph:
    return eliminate_clear_idioms(reconnect_save_restore(intra, inter, program, f), program, f)


def intraprocedural_dfg(traces: Iterable[TraceSource], program: Program, f: str
                        ) -> tuple[DataFlowGraph, DataFlowGraph]:
    """(normalized intra graph of f, inter graph) from traces."""
    inter = build_interprocedural_dfg(traces, program)
    intra = extract_intraprocedural(inter, f, program)
    return normalize(intra, inter, program, f), inter


# ---------------------------------------------------------------------------
# alias classes


def _value_sources(i: Instruction, reg: str) -> list[str]:
    """Channels whose prior value ``i`` uses to compute the pointer it writes to ``reg``.

    For pointer arithmetic only the base is followed; indexes, added
    registers and shift amounts are offsets, not pointer sources.
    """
    m, ops = i.mnemonic, i.operands
    if i.is_clear_idiom():
        return []
    if m in ("push", "pop", "call", "ret") and reg == "rsp":
        return ["rsp"]
    if m == "pop":
        return ["mem"]
    if m == "lea":
        mem = ops[1]
        return [mem.base.canonical] if mem.base is not None and mem.base.canonical != "rip" else []
    if m == "mov":
        src = ops[1]
        if isinstance(src, Register):
            return [src.canonical]
        if isinstance(src, MemExpr):
            return ["mem"]
        return []
    if m in ("add", "sub", "or", "and", "xor", "shl", "shr"):
        dst = ops[0]
        return [dst.canonical] if isinstance(dst, Register) else ["mem"]
    return []


def _stored_sources(i: Instruction) -> list[str]:
    """Channels whose value ``i`` stores to memory."""
    m, ops = i.mnemonic, i.operands
    if m == "push":
        return [ops[0].canonical] if isinstance(ops[0], Register) else []
    if m == "mov" and isinstance(ops[1], Register):
        return [ops[1].canonical]
    if m in ("add", "sub", "or", "and", "xor", "shl", "shr") and isinstance(ops[0], MemExpr):
        return ["mem"]
    return []


def pointer_roots(g: DataFlowGraph, program: Program, addr: int) -> set[str]:
    """Undefined inputs (registers, ``heap``, ``mem``) the base address at ``addr`` derives from."""
    i = program.instruction(addr)
    mem = i.mem
    if mem is None or i.mnemonic == "lea":
        raise ValueError(f"instruction at 0x{addr:x} is not a memory access")
    if mem.base is None or mem.base.canonical == "rip":
        return set()
    roots: set[str] = set()
    seen: set[tuple[int, str]] = set()
    work = [(addr, mem.base.canonical)]
    while work:
        at, ch = work.pop()
        if (at, ch) in seen:
            continue
        seen.add((at, ch))
        writers = g.incoming(at, ch)
        if not writers:
            outer = g.boundary.get((at, ch), set())
            if ch == "rax" and outer and outer <= g.alloc_sites:
                roots.add(HEAP_TOKEN)
            else:
                roots.add(ch if ch != "mem" else MEM_TOKEN)
            continue
        for w in writers:
            wi = program.instruction(w)
            sources = _stored_sources(wi) if ch == "mem" else _value_sources(wi, ch)
            work.extend((w, s) for s in sources)
    return roots


def origin_of_roots(roots: set[str]) -> PointerOrigin:
    if not roots:
        return PointerOrigin.GLOBAL
    if roots == {"rsp"}:
        return PointerOrigin.STACK
    if roots == {HEAP_TOKEN}:
        return PointerOrigin.HEAP
    if roots <= set(ARG_REGS):
        return PointerOrigin.FOREIGN
    return PointerOrigin.UNKNOWN


def endpoint_origin(g: DataFlowGraph, program: Program, addr: int) -> PointerOrigin:
    return origin_of_roots(pointer_roots(g, program, addr))


def identify_alias_class(g: DataFlowGraph, f: str, edge, program: Program) -> AliasClass:
    """Pointer origins of a mem edge's write and read (edge or (src, dst))."""
    src, dst = (edge.src, edge.dst) if isinstance(edge, DataFlowEdge) else edge[:2]
    if isinstance(edge, DataFlowEdge) and edge.channel != "mem":
        raise ValueError("alias classes are defined for mem edges only")
    for a in (src, dst):
        if program.function_at(a) is None or program.function_at(a).name != f:
            raise ValueError(f"0x{a:x} is not an instruction of {f}")
    return AliasClass(endpoint_origin(g, program, src), endpoint_origin(g, program, dst))


def write_dfg(g: DataFlowGraph, sink: IO[str]) -> None:
    json.dump(g.to_json(), sink, sort_keys=True)
    sink.write("\n")


def read_dfg(source: IO[str]) -> DataFlowGraph:
    return DataFlowGraph.from_json(json.load(source))
