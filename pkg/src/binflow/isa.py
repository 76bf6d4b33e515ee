"""Textual x86-64 subset: registers, operands, instructions, programs and CFGs.

The accepted syntax is Intel-style assembly, one instruction per line::

    f_target:
    1000: mov BYTE PTR [rsp-0x1], dil   ; Write
    1001: mov al, BYTE PTR [rsp-0x1]    ; Read
    1002: ret

A leading ``HEX:`` token is an explicit instruction address; without it the
parser assigns synthetic addresses spaced one apart.  ``name:`` on its own line
starts a function, unless the name starts with ``.`` or ``LAB_`` (local
labels).  ``;`` starts a comment and a line containing only ``...`` marks
elided code and is skipped.

Directives:

    .data NAME SIZE [ADDR]    declare a global data object
    .allocator NAME           treat NAME as a memory allocation function

Ghidra listing conventions are accepted as well: ``local_XX`` stack
displacements (``[RBP + local_10]`` is ``[rbp-0x8]``), ``=>annotation`` suffixes
on operands, ``<EXTERNAL>::name`` call targets and ``LAB_00xxxxxx`` jump targets
(resolved with and without the default image base of 0x100000).
"""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from typing import Iterable, Union

CANONICAL = (
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rsp", "rbp",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15", "rip",
)
GPRS = CANONICAL[:-1]

# System V AMD64 integer argument registers, in order.
ARG_REGS = ("rdi", "rsi", "rdx", "rcx", "r8", "r9")
CALLER_SAVED = ("rax", "rdi", "rsi", "rdx", "rcx", "r8", "r9", "r10", "r11")
CALLEE_SAVED = ("rbx", "rbp", "r12", "r13", "r14", "r15")

MNEMONICS = frozenset({
    "mov", "lea", "add", "sub", "shl", "shr", "or", "and", "xor", "cmp",
    "test", "jmp", "jz", "jnz", "call", "ret", "push", "pop", "nop",
})
BRANCHES = frozenset({"jmp", "jz", "jnz"})
ALU = frozenset({"add", "sub", "or", "and", "xor"})

SIZE_PREFIX = {"byte": 1, "word": 2, "dword": 4, "qword": 8}
PREFIX_NAME = {v: k.upper() for k, v in SIZE_PREFIX.items()}

GHIDRA_IMAGE_BASE = 0x100000


def _alias_table() -> dict[str, tuple[str, int]]:
    table: dict[str, tuple[str, int]] = {}
    for x in "abcd":
        canon = f"r{x}x"
        table.update({canon: (canon, 64), f"e{x}x": (canon, 32),
                      f"{x}x": (canon, 16), f"{x}l": (canon, 8)})
    for x in ("si", "di", "sp", "bp"):
        canon = f"r{x}"
        table.update({canon: (canon, 64), f"e{x}": (canon, 32),
                      x: (canon, 16), f"{x}l": (canon, 8)})
    for n in range(8, 16):
        canon = f"r{n}"
        table.update({canon: (canon, 64), f"r{n}d": (canon, 32),
                      f"r{n}w": (canon, 16), f"r{n}b": (canon, 8)})
    table["rip"] = ("rip", 64)
    return table


REGISTER_ALIASES = _alias_table()
_NAME_BY_WIDTH = {(c, w): n for n, (c, w) in REGISTER_ALIASES.items()}


class ParseError(ValueError):
    def __init__(self, msg: str, line: int = 0, col: int = 0):
        super().__init__(f"{line}:{col}: {msg}" if line else msg)
        self.line = line
        self.col = col


class CFGError(ValueError):
    pass


class WidthError(ValueError):
    pass


@dataclass(frozen=True)
class Register:
    name: str
    canonical: str
    width: int  # bits

    @property
    def size(self) -> int:
        return self.width // 8

    def __str__(self) -> str:
        return self.name


def reg(name: str) -> Register:
    """Resolve a register alias (case-insensitive) to a :class:`Register`."""
    key = name.lower()
    if key not in REGISTER_ALIASES:
        raise ParseError(f"unknown register {name!r}")
    canon, width = REGISTER_ALIASES[key]
    return Register(key, canon, width)


def sub_register(canonical: str, width: int) -> Register:
    """The alias of ``canonical`` with the given width in bits."""
    return reg(_NAME_BY_WIDTH[(canonical, width)])


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self) -> str:
        return _hex(self.value)


@dataclass(frozen=True)
class MemExpr:
    base: Register | None = None
    index: Register | None = None
    scale: int = 1
    disp: int = 0
    width: int | None = None  # bytes, from an explicit size prefix
    symbol: str | None = None  # global data symbol, absolute or rip-relative

    def __post_init__(self):
        if self.scale not in (1, 2, 4, 8):
            raise ParseError(f"invalid scale {self.scale}")
        if self.index is None and self.scale != 1:
            raise ParseError("scale without index register")
        if self.width is not None and self.width not in (1, 2, 4, 8):
            raise ParseError(f"invalid access width {self.width}")
        if self.index is not None and self.index.canonical in ("rsp", "rip"):
            raise ParseError(f"{self.index.name} cannot be an index register")

    @property
    def regs(self) -> tuple[Register, ...]:
        return tuple(r for r in (self.base, self.index) if r is not None)

    def __str__(self) -> str:
        parts = []
        if self.base is not None:
            parts.append(self.base.name)
        if self.symbol is not None:
            parts.append(self.symbol)
        if self.index is not None:
            bare = self.scale == 1 and (self.base is not None or self.symbol is not None)
            parts.append(self.index.name if bare else f"{self.index.name}*{self.scale}")
        body = "+".join(parts)
        if self.disp or not body:
            if not body:
                body = _hex(self.disp)
            elif self.disp < 0:
                body += f"-{_hex(-self.disp)}"
            else:
                body += f"+{_hex(self.disp)}"
        prefix = f"{PREFIX_NAME[self.width]} PTR " if self.width else ""
        return f"{prefix}[{body}]"


@dataclass(frozen=True)
class SymbolRef:
    name: str | None
    addr: int | None = None

    def __str__(self) -> str:
        return self.name if self.name is not None else f"0x{self.addr:x}"


Operand = Union[Register, Imm, MemExpr, SymbolRef]


@dataclass(frozen=True)
class Instruction:
    addr: int
    mnemonic: str
    operands: tuple[Operand, ...] = ()
    label: str | None = None
    comment: str | None = field(default=None, compare=False)

    def __post_init__(self):
        _validate(self)

    @property
    def mem(self) -> MemExpr | None:
        for op in self.operands:
            if isinstance(op, MemExpr):
                return op
        return None

    @property
    def target(self) -> SymbolRef | None:
        if self.mnemonic in BRANCHES or self.mnemonic == "call":
            return self.operands[0]
        return None

    def is_clear_idiom(self) -> bool:
        """``xor r, r`` / ``sub r, r``: sets r to zero without using its value."""
        return (self.mnemonic in ("xor", "sub") and len(self.operands) == 2
                and all(isinstance(o, Register) for o in self.operands)
                and self.operands[0] == self.operands[1])

    def __str__(self) -> str:
        return render_instruction(self)


@dataclass(frozen=True)
class Function:
    name: str
    instrs: tuple[Instruction, ...]

    def __post_init__(self):
        addrs = [i.addr for i in self.instrs]
        if any(b <= a for a, b in zip(addrs, addrs[1:])):
            raise ParseError(f"function {self.name}: addresses not strictly increasing")

    @property
    def entry(self) -> int | None:
        return self.instrs[0].addr if self.instrs else None

    @property
    def addrs(self) -> tuple[int, ...]:
        return tuple(i.addr for i in self.instrs)

    def at(self, addr: int) -> Instruction:
        for i in self.instrs:
            if i.addr == addr:
                return i
        raise KeyError(f"no instruction at 0x{addr:x} in {self.name}")

    def contains(self, addr: int) -> bool:
        return bool(self.instrs) and self.instrs[0].addr <= addr <= self.instrs[-1].addr \
            and any(i.addr == addr for i in self.instrs)


@dataclass(frozen=True)
class Program:
    functions: dict[str, Function] = field(default_factory=dict)
    globals: dict[str, tuple[int, int]] = field(default_factory=dict)
    allocator_symbols: frozenset[str] = frozenset({"malloc"})

    def function_at(self, addr: int) -> Function | None:
        for f in self.functions.values():
            if f.contains(addr):
                return f
        return None

    def instruction(self, addr: int) -> Instruction:
        f = self.function_at(addr)
        if f is None:
            raise KeyError(f"no instruction at 0x{addr:x}")
        return f.at(addr)

    def function_by_entry(self, addr: int) -> Function | None:
        for f in self.functions.values():
            if f.entry == addr:
                return f
        return None

    def callee_name(self, ref: SymbolRef) -> str | None:
        if ref.name is not None:
            return ref.name
        f = self.function_by_entry(ref.addr)
        return f.name if f else None

    def is_internal(self, ref: SymbolRef) -> bool:
        name = self.callee_name(ref)
        return name is not None and name in self.functions

    def global_address(self, symbol: str) -> int:
        return self.globals[symbol][0]


def _hex(v: int) -> str:
    return f"-0x{-v:x}" if v < 0 else f"0x{v:x}"


# ---------------------------------------------------------------------------
# validation


def _kinds(i: Instruction) -> list[type]:
    return [type(o) for o in i.operands]


def _validate(i: Instruction) -> None:
    m, ops = i.mnemonic, i.operands
    if m not in MNEMONICS:
        raise ParseError(f"unknown mnemonic {m!r}")
    n = len(ops)
    mems = sum(isinstance(o, MemExpr) for o in ops)
    if mems > 1:
        raise ParseError(f"{m}: at most one memory operand")
    if m in ("ret", "nop"):
        ok = n == 0
    elif m in BRANCHES or m == "call":
        ok = n == 1 and isinstance(ops[0], SymbolRef)
    elif m == "push":
        ok = n == 1 and isinstance(ops[0], (Register, Imm, MemExpr))
    elif m == "pop":
        ok = n == 1 and isinstance(ops[0], (Register, MemExpr))
    elif m == "lea":
        ok = n == 2 and isinstance(ops[0], Register) and isinstance(ops[1], MemExpr)
    elif m in ("shl", "shr"):
        ok = (n == 2 and isinstance(ops[0], (Register, MemExpr))
              and (isinstance(ops[1], Imm) or (isinstance(ops[1], Register) and ops[1].name == "cl")))
    else:  # mov, alu, cmp, test
        ok = (n == 2 and isinstance(ops[0], (Register, MemExpr))
              and isinstance(ops[1], (Register, Imm, MemExpr)))
        if ok and all(isinstance(o, Register) for o in ops) and ops[0].width != ops[1].width:
            raise ParseError(f"{m}: operand width mismatch {ops[0]} / {ops[1]}")
    if not ok:
        raise ParseError(f"invalid operands for {m}: {', '.join(map(str, ops))}")
    if m in ("push", "pop") and isinstance(ops[0], Register) and ops[0].width != 64:
        raise ParseError(f"{m} needs a 64-bit register")


def access_width(op: Operand, ctx: Instruction) -> int:
    """Width in bytes of a register or memory operand of ``ctx``."""
    if isinstance(op, Register):
        return op.size
    if not isinstance(op, MemExpr):
        raise WidthError(f"operand {op} has no access width")
    if op.width is not None:
        return op.width
    inferred = _infer_mem_width(ctx.mnemonic, (op,) + tuple(o for o in ctx.operands if o is not op))
    if inferred[0].width is not None:
        return inferred[0].width
    raise WidthError(f"ambiguous access width in {render_instruction(ctx)!r}")


# ---------------------------------------------------------------------------
# rendering


def render_instruction(i: Instruction) -> str:
    if not i.operands:
        return i.mnemonic
    return f"{i.mnemonic} {', '.join(str(o) for o in i.operands)}"


def render_program(p: Program, addresses: bool = True) -> str:
    lines = []
    for sym in sorted(p.allocator_symbols - {"malloc"}):
        lines.append(f".allocator {sym}")
    for name, (addr, size) in p.globals.items():
        lines.append(f".data {name} {size} 0x{addr:x}")
    for f in p.functions.values():
        lines.append(f"{f.name}:")
        for i in f.instrs:
            if i.label:
                lines.append(f"{i.label}:")
            text = render_instruction(i)
            if addresses:
                text = f"{i.addr:x}: {text}"
            if i.comment:
                text = f"{text}  ; {i.comment}"
            lines.append(f"    {text}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# parsing

_ADDR_PREFIX = re.compile(r"^(?:0x)?([0-9a-fA-F]+)\s*:\s*(\S.*)$")
_LABEL = re.compile(r"^([A-Za-z_.$][\w.$@]*)\s*:$")
_IDENT = re.compile(r"^[A-Za-z_.$][\w.$@]*$")
_LOCAL = re.compile(r"^local_([0-9a-fA-F]+)$", re.I)
_MEM = re.compile(r"^(?:(byte|word|dword|qword)\s+ptr\s*)?\[(.*)\]$", re.I)
_GHIDRA_ANNOT = re.compile(r"=>[^,\s\]]+")


def _number(tok: str) -> int | None:
    t = tok.strip().lower()
    neg = t.startswith("-")
    if neg or t.startswith("+"):
        t = t[1:].strip()
    try:
        if t.startswith("0x"):
            v = int(t, 16)
        elif t.endswith("h") and re.fullmatch(r"[0-9][0-9a-f]*h", t):
            v = int(t[:-1], 16)
        elif re.fullmatch(r"[0-9]+", t):
            v = int(t)
        else:
            return None
    except ValueError:
        return None
    return -v if neg else v


def _split_operands(text: str) -> list[str]:
    out, depth, cur = [], 0, []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if cur or out:
        out.append("".join(cur).strip())
    return [o for o in out if o]


def _parse_mem(text: str) -> MemExpr | None:
    m = _MEM.match(text.strip())
    if not m:
        return None
    width = SIZE_PREFIX[m.group(1).lower()] if m.group(1) else None
    body = m.group(2).replace(" ", "")
    if not body:
        raise ParseError("empty memory expression")
    terms = re.findall(r"([+-]*)([^+-]+)", body)
    base = index = None
    scale, disp, symbol = 1, 0, None
    for signs, term in terms:
        neg = signs.count("-") % 2 == 1
        if "*" in term:
            a, b = term.split("*", 1)
            if _number(a) is not None:
                a, b = b, a
            s = _number(b)
            if neg or s is None or index is not None:
                raise ParseError(f"bad scaled index {term!r}")
            index, scale = reg(a), s
            continue
        num = _number(term)
        if num is not None:
            disp += -num if neg else num
            continue
        local = _LOCAL.match(term)
        if local:
            # Ghidra: local_XX sits at entry_rsp - XX, i.e. rbp - (XX - 8)
            off = -(int(local.group(1), 16) - 8)
            disp += -off if neg else off
            continue
        if term.lower() in REGISTER_ALIASES:
            if neg:
                raise ParseError(f"negated register in {text!r}")
            r = reg(term)
            if base is None:
                base = r
            elif index is None:
                index = r
            else:
                raise ParseError(f"too many registers in {text!r}")
            continue
        if _IDENT.match(term) and symbol is None and not neg:
            symbol = term
            continue
        raise ParseError(f"bad memory term {term!r}")
    return MemExpr(base, index, scale, disp, width, symbol)


def _parse_operand(text: str, mnemonic: str) -> Operand:
    text = _GHIDRA_ANNOT.sub("", text).strip()
    mem = _parse_mem(text)
    if mem is not None:
        return mem
    if mnemonic in BRANCHES or mnemonic == "call":
        if text.upper().startswith("<EXTERNAL>::"):
            return SymbolRef(text.split("::", 1)[1])
        num = _number(text)
        if num is not None:
            return SymbolRef(None, num)
        if re.fullmatch(r"[0-9a-fA-F]+", text):
            return SymbolRef(None, int(text, 16))
        if _IDENT.match(text):
            return SymbolRef(text)
        raise ParseError(f"bad branch target {text!r}")
    if text.lower() in REGISTER_ALIASES:
        return reg(text)
    num = _number(text)
    if num is not None:
        return Imm(num)
    raise ParseError(f"unknown register or operand {text!r}")


def parse_instruction(text: str, addr: int = 0, label: str | None = None) -> Instruction:
    """Parse one instruction (no address prefix, no comment)."""
    text = text.strip()
    if not text:
        raise ParseError("empty instruction")
    parts = text.split(None, 1)
    mnemonic = parts[0].lower()
    if mnemonic not in MNEMONICS:
        raise ParseError(f"unknown mnemonic {parts[0]!r}")
    ops = tuple(_parse_operand(o, mnemonic) for o in _split_operands(parts[1])) if len(parts) > 1 else ()
    return Instruction(addr, mnemonic, _infer_mem_width(mnemonic, ops), label)


def _infer_mem_width(mnemonic: str, ops: tuple[Operand, ...]) -> tuple[Operand, ...]:
    """Fill in an unprefixed memory width from the paired register (or 8 for push/pop)."""
    if mnemonic == "lea":
        return ops
    out = list(ops)
    for n, op in enumerate(ops):
        if not isinstance(op, MemExpr) or op.width is not None:
            continue
        width = None
        if mnemonic in ("push", "pop"):
            width = 8
        elif mnemonic not in ("shl", "shr"):
            regs = [o for o in ops if isinstance(o, Register)]
            if regs:
                width = regs[0].size
        if width is not None:
            out[n] = dataclasses.replace(op, width=width)
    return tuple(out)


def _is_local_label(name: str) -> bool:
    return name.startswith(".") or name.startswith("LAB_")


def parse_program(text: str, base: int = 0x1000) -> Program:
    """Parse assembly text into a :class:`Program`.

    Instructions without an explicit address get ``previous + 1``.
    """
    funcs: list[tuple[str, list[Instruction]]] = []
    globals_: dict[str, tuple[int, int]] = {}
    allocators = {"malloc"}
    labels: dict[str, int] = {}
    pending_labels: list[tuple[str, int]] = []
    next_addr = base
    data_cursor = 0x600000
    last_addr: int | None = None

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(";", 1)[0]
        comment = raw.split(";", 1)[1].strip() if ";" in raw else None
        line = line.strip()
        if not line or line == "...":
            continue
        col = raw.find(line) + 1
        try:
            if line.startswith(".data") or line.startswith(".allocator"):
                toks = line.split()
                if toks[0] == ".allocator" and len(toks) == 2:
                    allocators.add(toks[1])
                elif toks[0] == ".data" and len(toks) in (3, 4):
                    name, size = toks[1], int(toks[2], 0)
                    if name in globals_:
                        raise ParseError(f"duplicate data symbol {name!r}")
                    if len(toks) == 4:
                        addr = int(toks[3], 0)
                    else:
                        addr = data_cursor
                    data_cursor = max(data_cursor, (addr + size + 15) & ~15)
                    globals_[name] = (addr, size)
                else:
                    raise ParseError(f"bad directive {line!r}")
                continue
            lab = _LABEL.match(line)
            if lab:
                name = lab.group(1)
                if name in labels or name in (n for n, _ in funcs) or name in (n for n, _ in pending_labels):
                    raise ParseError(f"duplicate label {name!r}")
                if _is_local_label(name):
                    pending_labels.append((name, lineno))
                else:
                    if pending_labels:
                        raise ParseError(f"label {pending_labels[0][0]!r} has no instruction")
                    funcs.append((name, []))
                continue
            m = _ADDR_PREFIX.match(line)
            if m and m.group(2).split(None, 1)[0].lower() in MNEMONICS:
                addr, body = int(m.group(1), 16), m.group(2)
            else:
                addr, body = next_addr, line
            if last_addr is not None and addr <= last_addr:
                raise ParseError(f"address 0x{addr:x} not increasing")
            label = pending_labels[-1][0] if pending_labels else None
            for name, _ in pending_labels:
                labels[name] = addr
            pending_labels = []
            instr = parse_instruction(body, addr, label)
            if comment:
                instr = dataclasses.replace(instr, comment=comment)
            if not funcs:
                funcs.append(("_start", []))
            funcs[-1][1].append(instr)
            last_addr, next_addr = addr, addr + 1
        except ParseError as e:
            if e.line:
                raise
            raise ParseError(str(e), lineno, col) from None
    if pending_labels:
        raise ParseError(f"label {pending_labels[0][0]!r} has no instruction", pending_labels[0][1])

    entries = {name: instrs[0].addr for name, instrs in funcs if instrs}
    all_addrs = {i.addr for _, instrs in funcs for i in instrs}

    def resolve(ref: SymbolRef) -> SymbolRef:
        if ref.name is None:
            return ref
        if ref.name in labels:
            return SymbolRef(ref.name, labels[ref.name])
        if ref.name in entries:
            return SymbolRef(ref.name, entries[ref.name])
        m = re.fullmatch(r"LAB_([0-9a-fA-F]+)", ref.name)
        if m:
            a = int(m.group(1), 16)
            for cand in (a, a - GHIDRA_IMAGE_BASE):
                if cand in all_addrs:
                    return SymbolRef(ref.name, cand)
            return SymbolRef(ref.name, a - GHIDRA_IMAGE_BASE if a >= GHIDRA_IMAGE_BASE else a)
        return ref

    functions = {}
    for name, instrs in funcs:
        fixed = []
        for i in instrs:
            if i.target is not None:
                i = dataclasses.replace(i, operands=(resolve(i.target),))
            for op in i.operands:
                if isinstance(op, MemExpr) and op.symbol is not None and op.symbol not in globals_:
                    raise ParseError(f"unknown data symbol {op.symbol!r} at 0x{i.addr:x}")
            fixed.append(i)
        functions[name] = Function(name, tuple(fixed))
    for name, (addr, size) in globals_.items():
        if any(addr <= a < addr + size for a in all_addrs):
            raise ParseError(f"global {name} overlaps code")
    return Program(functions, globals_, frozenset(allocators))


# ---------------------------------------------------------------------------
# control flow


@dataclass(frozen=True)
class Block:
    leader: int
    addrs: tuple[int, ...]


@dataclass(frozen=True)
class CFG:
    blocks: tuple[Block, ...]
    edges: tuple[tuple[int, int, str], ...]  # (src leader, dst leader, kind)

    def block(self, leader: int) -> Block:
        for b in self.blocks:
            if b.leader == leader:
                return b
        raise KeyError(leader)

    def successors(self, leader: int) -> list[int]:
        return [d for s, d, _ in self.edges if s == leader]

    def predecessors(self, leader: int) -> list[int]:
        return [s for s, d, _ in self.edges if d == leader]


def build_cfg(f: Function) -> CFG:
    """Basic blocks and edges of ``f``.  Calls fall through; ret/jmp end blocks."""
    addrs = f.addrs
    if not addrs:
        return CFG((), ())
    index = {a: n for n, a in enumerate(addrs)}
    leaders = {addrs[0]}
    for n, i in enumerate(f.instrs):
        if i.mnemonic in BRANCHES:
            t = i.target.addr
            if t is None or t not in index:
                raise CFGError(f"branch at 0x{i.addr:x} targets {i.target} outside {f.name}")
            leaders.add(t)
        if (i.mnemonic in BRANCHES or i.mnemonic == "ret") and n + 1 < len(addrs):
            leaders.add(addrs[n + 1])
    ordered = sorted(leaders)
    blocks = []
    for k, lead in enumerate(ordered):
        end = index[ordered[k + 1]] if k + 1 < len(ordered) else len(addrs)
        blocks.append(Block(lead, addrs[index[lead]:end]))
    edges = []
    for k, b in enumerate(blocks):
        last = f.instrs[index[b.addrs[-1]]]
        nxt = blocks[k + 1].leader if k + 1 < len(blocks) else None
        if last.mnemonic == "jmp":
            edges.append((b.leader, last.target.addr, "jump"))
        elif last.mnemonic in ("jz", "jnz"):
            if nxt is not None:
                edges.append((b.leader, nxt, "fallthrough"))
            edges.append((b.leader, last.target.addr, "branch-taken"))
        elif last.mnemonic != "ret" and nxt is not None:
            edges.append((b.leader, nxt, "fallthrough"))
    return CFG(tuple(blocks), tuple(edges))


def iter_instructions(p: Program) -> Iterable[Instruction]:
    for f in p.functions.values():
        yield from f.instrs
