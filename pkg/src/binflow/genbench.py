"""Microbenchmark generator: configurations, assembly synthesis, ground truth.

Each test case is a function ``f_target`` holding one marked memory write and
one marked memory read.  The pointers they dereference are created according
to a :class:`TestCaseConfig`; the ground-truth degree of the write→read flow
follows from the configuration alone (see :func:`label_ground_truth`).
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .isa import ARG_REGS, Function, Program, parse_program, render_instruction, sub_register
from .interp import (
    Access, Environment, MemRegion, STACK_INIT, Verdict, execute, oracle_data_flow,
)

MAX_VAR_LEN = 4  # elements reserved for variable-length stack and global arrays
STRUCT_STRIDE = 16  # int32 at offset 0, pointer at offset 8
STRUCT_FIELD_WIDTH = 4
FOREIGN_BASE = 0x02000000
FOREIGN_SIZE = 0x10000
FOREIGN_PTR = FOREIGN_BASE + 0x800
PIN_POOL = ("rbx", "r12", "r13", "r14", "r15")
CALLEE_NAME = "f_callee"
TARGET_NAME = "f_target"


class InvalidConfig(ValueError):
    pass


class PointerOrigin(str, enum.Enum):
    STACK = "Stack"
    HEAP = "Heap"
    FOREIGN = "Foreign"
    GLOBAL = "Global"
    UNKNOWN = "Unknown"  # only produced by dynamic identification

    @property
    def short(self) -> str:
        return "U" if self is PointerOrigin.UNKNOWN else self.value[0]


ORIGINS = (PointerOrigin.STACK, PointerOrigin.HEAP, PointerOrigin.FOREIGN, PointerOrigin.GLOBAL)


@dataclass(frozen=True)
class AliasClass:
    write_origin: PointerOrigin
    read_origin: PointerOrigin

    def __str__(self) -> str:
        return f"({self.write_origin.short}, {self.read_origin.short})"

    def to_list(self) -> list[str]:
        return [self.write_origin.value, self.read_origin.value]

    @classmethod
    def from_list(cls, pair) -> "AliasClass":
        return cls(PointerOrigin(pair[0]), PointerOrigin(pair[1]))


class ElemKind(str, enum.Enum):
    INT = "int"
    FLOAT = "float"
    STRUCT = "struct"


ELEM_TYPES = (
    (ElemKind.INT, 1), (ElemKind.INT, 2), (ElemKind.INT, 4), (ElemKind.INT, 8),
    (ElemKind.FLOAT, 4), (ElemKind.FLOAT, 8), (ElemKind.STRUCT, STRUCT_STRIDE),
)


@dataclass(frozen=True)
class PointerSpec:
    origin: PointerOrigin
    elem_kind: ElemKind
    elem_size: int  # stride in bytes
    length: int | None  # None: variable length passed in a parameter register

    def __post_init__(self):
        if (self.elem_kind, self.elem_size) not in ELEM_TYPES:
            raise InvalidConfig(f"unsupported element type {self.elem_kind.value}{self.elem_size}")
        if self.length not in (1, 2, None):
            raise InvalidConfig(f"unsupported length {self.length}")
        if self.origin is PointerOrigin.UNKNOWN:
            raise InvalidConfig("generated pointers need a concrete origin")

    @property
    def access_width(self) -> int:
        return STRUCT_FIELD_WIDTH if self.elem_kind is ElemKind.STRUCT else self.elem_size

    @property
    def reserved_elems(self) -> int:
        return MAX_VAR_LEN if self.length is None else self.length


@dataclass(frozen=True)
class OffsetTransform:
    kind: str = "none"  # none | const | var
    k: int = 0  # element index for const

    def __post_init__(self):
        if self.kind not in ("none", "const", "var"):
            raise InvalidConfig(f"bad offset transform kind {self.kind!r}")
        if self.kind != "const" and self.k:
            raise InvalidConfig("only const transforms carry an index")

    @property
    def is_var(self) -> bool:
        return self.kind == "var"

    def __str__(self) -> str:
        return {"none": "none", "var": "var"}.get(self.kind, f"const{self.k}")

    @classmethod
    def parse(cls, text: str) -> "OffsetTransform":
        if text in ("none", "var"):
            return cls(text)
        if text.startswith("const"):
            return cls("const", int(text[5:]))
        raise InvalidConfig(f"bad offset transform {text!r}")


NONE = OffsetTransform()
VAR = OffsetTransform("var")


class Expansion(str, enum.Enum):
    SAME = "SamePointer"
    DISTINCT = "DistinctPointers"


class Callee(str, enum.Enum):
    NONE = "NoCall"
    BETWEEN = "CallBetween"


class Frame(str, enum.Enum):
    FP = "FramePointer"
    OMIT = "OmitFramePointer"


class Degree(str, enum.Enum):
    UNCONDITIONAL = "Unconditional"
    POSSIBLE = "Possible"
    IMPOSSIBLE = "Impossible"


class Specification(str, enum.Enum):
    FULL = "FullySpecified"
    UNDER = "Underspecified"


@dataclass(frozen=True)
class TestCaseConfig:
    ptr: PointerSpec
    expansion: Expansion = Expansion.SAME
    write_xform: OffsetTransform = NONE
    read_xform: OffsetTransform = NONE
    callee: Callee = Callee.NONE
    frame: Frame = Frame.OMIT
    # extensions: origin of the second pointer for distinct expansion, and a
    # wider read (mixed-width access) to exercise overlapping byte ranges
    read_origin: PointerOrigin | None = None
    read_width: int | None = None

    __test__ = False  # not a pytest class

    def __post_init__(self):
        validate_config(self)

    @property
    def write_origin(self) -> PointerOrigin:
        return self.ptr.origin

    @property
    def effective_read_origin(self) -> PointerOrigin:
        return self.read_origin or self.ptr.origin

    @property
    def alias_class(self) -> AliasClass:
        return AliasClass(self.write_origin, self.effective_read_origin)

    @property
    def write_width(self) -> int:
        return self.ptr.access_width

    @property
    def read_access_width(self) -> int:
        return self.read_width or self.ptr.access_width

    @property
    def has_var(self) -> bool:
        return self.write_xform.is_var or self.read_xform.is_var

    @property
    def equal_offset(self) -> bool:
        """Both accesses use the same constant element offset."""
        return (not self.has_var) and self.write_xform.k == self.read_xform.k

    def keys(self) -> dict[str, str]:
        """Flat string view used for filtering, grouping and the manifest."""
        return {
            "origin": self.ptr.origin.value,
            "read_origin": self.effective_read_origin.value,
            "elem_kind": self.ptr.elem_kind.value,
            "elem_size": str(self.ptr.elem_size),
            "length": "var" if self.ptr.length is None else str(self.ptr.length),
            "expansion": self.expansion.value,
            "write_xform": str(self.write_xform),
            "read_xform": str(self.read_xform),
            "xforms": "None" if not (self.write_xform.kind != "none" or self.read_xform.kind != "none")
            else f"{self.write_xform}/{self.read_xform}",
            "callee": self.callee.value,
            "frame": self.frame.value,
            "read_width": "native" if self.read_width is None else str(self.read_width),
            "equal_offset": "Yes" if self.equal_offset else "No",
        }


def validate_config(c: TestCaseConfig) -> None:
    p = c.ptr
    for x in (c.write_xform, c.read_xform):
        if x.kind == "const" and p.length is not None and not 0 <= x.k < p.length:
            raise InvalidConfig(f"offset {x.k} outside array of length {p.length}")
        if x.kind == "const" and p.length is None and not 0 <= x.k < MAX_VAR_LEN:
            raise InvalidConfig(f"offset {x.k} outside reserved length {MAX_VAR_LEN}")
        if x.is_var and p.length == 1:
            raise InvalidConfig("variable offset into a single element")
        if x.is_var and c.expansion is Expansion.DISTINCT:
            raise InvalidConfig("variable offsets are only generated for a shared pointer")
    if c.read_origin is not None:
        if c.expansion is not Expansion.DISTINCT:
            raise InvalidConfig("a separate read origin needs distinct pointers")
        if c.read_origin is PointerOrigin.UNKNOWN:
            raise InvalidConfig("read origin must be concrete")
    if c.read_width is not None:
        if c.read_width not in (1, 2, 4, 8) or c.read_width <= p.access_width:
            raise InvalidConfig("read_width must widen the element access")
        if c.has_var or c.expansion is not Expansion.SAME:
            raise InvalidConfig("wide reads are only generated for fixed offsets on a shared pointer")


# ---------------------------------------------------------------------------
# enumeration


@dataclass(frozen=True)
class GeneratorSettings:
    """Knobs of the enumeration (all defaults documented in the README)."""
    var_const_offsets: tuple[int, ...] = (0, 1, 2, 3)
    mixed_width_reads: bool = True
    wide_read_width: int = 8
    distinct_mixed_origins: bool = True


def _xform_domain(length: int | None, settings: GeneratorSettings, allow_var: bool) -> list[OffsetTransform]:
    ks = range(length) if length is not None else settings.var_const_offsets
    out = [NONE] + [OffsetTransform("const", k) for k in ks]
    if allow_var and length != 1:
        out.append(VAR)
    return out


def iter_configs(settings: GeneratorSettings | None = None) -> Iterator[TestCaseConfig]:
    s = settings or GeneratorSettings()
    for origin in ORIGINS:
        for kind, size in ELEM_TYPES:
            for length in (1, 2, None):
                ptr = PointerSpec(origin, kind, size, length)
                expansions = [(Expansion.SAME, None)]
                for ro in ORIGINS:
                    if ro is origin:
                        expansions.append((Expansion.DISTINCT, None))
                    elif s.distinct_mixed_origins:
                        expansions.append((Expansion.DISTINCT, ro))
                for expansion, read_origin in expansions:
                    dom = _xform_domain(length, s, expansion is Expansion.SAME)
                    for wx, rx in itertools.product(dom, dom):
                        widths = [None]
                        if (s.mixed_width_reads and expansion is Expansion.SAME
                                and not (wx.is_var or rx.is_var) and ptr.access_width < s.wide_read_width):
                            widths.append(s.wide_read_width)
                        for rw in widths:
                            for callee in (Callee.NONE, Callee.BETWEEN):
                                for frame in (Frame.FP, Frame.OMIT):
                                    yield TestCaseConfig(ptr, expansion, wx, rx, callee, frame,
                                                         read_origin, rw)


def enumerate_configs(settings: GeneratorSettings | None = None,
                      filters: dict[str, str] | None = None) -> list[TestCaseConfig]:
    """Deterministic list of valid configurations matching ``filters``.

    Filter keys are those of :meth:`TestCaseConfig.keys`; values compare as
    strings, case-insensitively.
    """
    flt = {k: str(v).lower() for k, v in (filters or {}).items()}
    if flt:
        known = set(TestCaseConfig(PointerSpec(PointerOrigin.STACK, ElemKind.INT, 1, 1)).keys())
        unknown = set(flt) - known
        if unknown:
            raise KeyError(f"unknown filter keys {sorted(unknown)}; known: {sorted(known)}")
    out = []
    for c in iter_configs(settings):
        ks = c.keys()
        if all(ks[k].lower() == v for k, v in flt.items()):
            out.append(c)
    return out


# ---------------------------------------------------------------------------
# ground truth


@dataclass(frozen=True)
class GroundTruthRecord:
    degree: Degree
    specification: Specification
    alias_class: AliasClass
    write_addr: int
    read_addr: int
    channel: str = "mem"

    def __post_init__(self):
        under = self.specification is Specification.UNDER
        if under != (self.degree is Degree.POSSIBLE):
            raise ValueError("Underspecified exactly when the degree is Possible")

    def to_json(self) -> dict:
        return {"degree": self.degree.value, "specification": self.specification.value,
                "alias_class": self.alias_class.to_list(), "write_addr": self.write_addr,
                "read_addr": self.read_addr, "channel": self.channel}

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruthRecord":
        return cls(Degree(d["degree"]), Specification(d["specification"]),
                   AliasClass.from_list(d["alias_class"]), int(d["write_addr"]),
                   int(d["read_addr"]), d.get("channel", "mem"))


def byte_range(c: TestCaseConfig, which: str) -> tuple[int, int]:
    """Byte range [lo, hi) relative to the pointer, for fixed offsets."""
    x = c.write_xform if which == "write" else c.read_xform
    width = c.write_width if which == "write" else c.read_access_width
    lo = x.k * c.ptr.elem_size
    return lo, lo + width


def label_ground_truth(c: TestCaseConfig) -> tuple[Degree, Specification]:
    if c.expansion is Expansion.SAME:
        if c.has_var:
            degree = Degree.POSSIBLE
        else:
            (wl, wh), (rl, rh) = byte_range(c, "write"), byte_range(c, "read")
            degree = Degree.UNCONDITIONAL if wl < rh and rl < wh else Degree.IMPOSSIBLE
    else:
        if PointerOrigin.FOREIGN in (c.write_origin, c.effective_read_origin):
            degree = Degree.POSSIBLE
        else:
            degree = Degree.IMPOSSIBLE
    if c.callee is Callee.BETWEEN and degree is Degree.UNCONDITIONAL:
        degree = Degree.POSSIBLE
    spec = Specification.UNDER if degree is Degree.POSSIBLE else Specification.FULL
    return degree, spec


# ---------------------------------------------------------------------------
# synthesis


@dataclass
class _Layout:
    params: dict[str, str] = field(default_factory=dict)  # role -> canonical arg register
    pins: dict[str, str] = field(default_factory=dict)  # role -> callee-saved register
    stack_disp: dict[str, int] = field(default_factory=dict)  # object -> offset from frame base
    frame_size: int = 0


def _align(n: int, a: int = 16) -> int:
    return (n + a - 1) // a * a


def _hex(v: int) -> str:
    return f"-0x{-v:x}" if v < 0 else f"0x{v:x}"


def _objects(c: TestCaseConfig) -> list[tuple[str, PointerOrigin]]:
    if c.expansion is Expansion.SAME:
        return [("w", c.write_origin)]
    return [("w", c.write_origin), ("r", c.effective_read_origin)]


def _plan(c: TestCaseConfig) -> _Layout:
    lay = _Layout()
    objs = _objects(c)
    args = iter(ARG_REGS)
    for name, origin in objs:
        if origin is PointerOrigin.FOREIGN:
            lay.params["ptr_" + name] = next(args)
    lay.params["value"] = next(args)
    heap = [n for n, o in objs if o is PointerOrigin.HEAP]
    if heap and c.ptr.length is None:
        lay.params["len"] = next(args)
    if c.write_xform.is_var:
        lay.params["idx_w"] = next(args)
    if c.read_xform.is_var:
        lay.params["idx_r"] = next(args)

    calls_before_write = bool(heap)
    any_call = bool(heap) or c.callee is Callee.BETWEEN
    pin_roles = [f"heap_{n}" for n in heap]
    shared = c.expansion is Expansion.SAME
    for role in lay.params:
        used_late = {
            "ptr_w": any_call if shared else calls_before_write, "value": calls_before_write, "idx_w": calls_before_write,
            "ptr_r": any_call, "idx_r": any_call, "len": len(heap) > 1,
        }[role]
        if used_late:
            pin_roles.append(role)
    pool = iter(PIN_POOL)
    for role in pin_roles:
        lay.pins[role] = next(pool)

    # stack objects grow down from the frame base
    cursor = 0
    for name, origin in objs:
        if origin is PointerOrigin.STACK:
            size = c.ptr.reserved_elems * c.ptr.elem_size
            cursor = _align(cursor, 16) + size if cursor else size
            lay.stack_disp[name] = -cursor
    lay.frame_size = _align(cursor) if cursor and any_call else 0
    return lay


def _reg_of(lay: _Layout, role: str) -> str:
    return lay.pins.get(role) or lay.params[role]


def _sized(canon: str, width: int) -> str:
    return sub_register(canon, width * 8).name


def synthesize_test_case(c: TestCaseConfig) -> tuple[Program, GroundTruthRecord]:
    """Assembly program for ``c`` with its ground-truth record."""
    validate_config(c)
    text = render_test_case(c)
    p = parse_program(text)
    f = p.functions[TARGET_NAME]
    marks = {i.comment: i.addr for i in f.instrs if i.comment in ("Write", "Read")}
    degree, spec = label_ground_truth(c)
    return p, GroundTruthRecord(degree, spec, c.alias_class, marks["Write"], marks["Read"])


def render_test_case(c: TestCaseConfig) -> str:
    lay = _plan(c)
    objs = dict(_objects(c))
    heap = [n for n, o in objs.items() if o is PointerOrigin.HEAP]
    fp = c.frame is Frame.FP
    any_call = bool(heap) or c.callee is Callee.BETWEEN
    stride = c.ptr.elem_size
    lines: list[str] = []
    data: list[str] = []
    emit = lines.append

    for name, origin in objs.items():
        if origin is PointerOrigin.GLOBAL:
            data.append(f".data g_{name} {c.ptr.reserved_elems * stride}")

    pushed = 0
    if fp:
        emit("push rbp")
        emit("mov rbp, rsp")
    pinned = list(dict.fromkeys(lay.pins.values()))
    for r in pinned:
        emit(f"push {r}")
        pushed += 8
    if lay.frame_size:
        emit(f"sub rsp, {_hex(lay.frame_size)}")
    for role, r in lay.pins.items():
        if role in lay.params:
            emit(f"mov {r}, {lay.params[role]}")

    for name in heap:
        if c.ptr.length is None:
            emit(f"mov rdi, {_reg_of(lay, 'len')}")
            shift = stride.bit_length() - 1
            if shift:
                emit(f"shl rdi, {shift}")
        else:
            emit(f"mov edi, {_hex(c.ptr.length * stride)}")
        emit("call malloc")
        emit(f"mov {lay.pins['heap_' + name]}, rax")

    def address(name: str, xform: OffsetTransform, idx_role: str, scratch: str, width: int) -> str:
        origin = objs[name]
        disp = xform.k * stride
        index = ""
        if xform.is_var:
            ireg = _reg_of(lay, idx_role)
            if stride > 8:
                emit(f"shl {ireg}, {stride.bit_length() - 1}")
                index = f"+{ireg}"
            else:
                index = f"+{ireg}*{stride}" if stride > 1 else f"+{ireg}"
        if origin is PointerOrigin.STACK:
            if fp:
                base, disp = "rbp", disp + lay.stack_disp[name] - pushed
            elif any_call:
                base, disp = "rsp", disp + lay.stack_disp[name] + lay.frame_size
            else:
                base, disp = "rsp", disp + lay.stack_disp[name]
        elif origin is PointerOrigin.HEAP:
            base = lay.pins["heap_" + name]
        elif origin is PointerOrigin.FOREIGN:
            base = _reg_of(lay, "ptr_" + name)
        else:
            if index:
                emit(f"lea {scratch}, [rip+g_{name}]")
                base = scratch
            else:
                base = f"rip+g_{name}"
        body = base + index
        if disp:
            body += f"+{_hex(disp)}" if disp > 0 else _hex(disp)
        prefix = {1: "BYTE", 2: "WORD", 4: "DWORD", 8: "QWORD"}[width]
        return f"{prefix} PTR [{body}]"

    w_obj = "w"
    r_obj = "w" if c.expansion is Expansion.SAME else "r"
    value = _sized(_reg_of(lay, "value"), c.write_width)
    waddr = address(w_obj, c.write_xform, "idx_w", "r10", c.write_width)
    emit(f"mov {waddr}, {value} ; Write")
    if c.callee is Callee.BETWEEN:
        emit(f"call {CALLEE_NAME}")
    raddr = address(r_obj, c.read_xform, "idx_r", "r11", c.read_access_width)
    emit(f"mov {_sized('rax', c.read_access_width)}, {raddr} ; Read")

    if lay.frame_size:
        emit(f"add rsp, {_hex(lay.frame_size)}")
    for r in reversed(pinned):
        emit(f"pop {r}")
    if fp:
        emit("pop rbp")
    emit("ret")

    out = data + [f"{TARGET_NAME}:"] + [f"    {ln}" for ln in lines]
    if c.callee is Callee.BETWEEN:
        out += [f"{CALLEE_NAME}:", "    ret"]
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# environments for the oracle


_JUNK = {r: 0x1111_0000_0000 * (n + 1) + 0x77 for n, r in enumerate(
    ("rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15"))}


def environments(c: TestCaseConfig, p: Program | None = None,
                 truth: GroundTruthRecord | None = None) -> list[Environment]:
    """Concrete environments exercising the configuration's free parameters.

    Every register holds a defined junk value; parameters get values from a
    small adversarial set: two values to store, every in-bounds index, two
    array lengths, and for foreign pointers a placement far from any other
    object plus placements making the two accesses coincide.
    """
    if p is None or truth is None:
        p, truth = synthesize_test_case(c)
    lay = _plan(c)
    region = (MemRegion("foreign", FOREIGN_BASE, FOREIGN_SIZE),)
    choices: dict[str, tuple[int, ...]] = {"value": (0x5A5A5A5A5A5A5A5A, 0x0102030405060708)}
    bound = c.ptr.length if c.ptr.length is not None else MAX_VAR_LEN
    for role in ("idx_w", "idx_r"):
        if role in lay.params:
            choices[role] = tuple(range(bound))
    if "len" in lay.params:
        choices["len"] = (MAX_VAR_LEN, MAX_VAR_LEN + 2)
    if "ptr_w" in lay.params:
        choices["ptr_w"] = (FOREIGN_PTR,) if "ptr_r" in lay.params else (FOREIGN_PTR, FOREIGN_PTR + 0x1000)
    if "ptr_r" in lay.params:
        choices["ptr_r"] = (FOREIGN_PTR + 0x400,)

    roles = sorted(choices)
    envs = []
    for values in itertools.product(*(choices[r] for r in roles)):
        regs = dict(_JUNK)
        regs.update({lay.params[r]: v for r, v in zip(roles, values)})
        envs.append(Environment(regs, regions=region))

    foreign = [r for r in ("ptr_w", "ptr_r") if r in lay.params]
    if c.expansion is Expansion.DISTINCT and foreign:
        # aim the foreign pointer at the other access
        probe = envs[0]
        events = execute(p, TARGET_NAME, probe)
        wa = next(e.location for e in events if e.instr_addr == truth.write_addr
                  and e.channel == "mem" and e.access is Access.WRITE)
        ra = next(e.location for e in events if e.instr_addr == truth.read_addr
                  and e.channel == "mem" and e.access is Access.READ)
        if "ptr_r" in lay.params:
            role, delta = "ptr_r", wa - ra
        else:
            role, delta = "ptr_w", ra - wa
        shifts = (-stride_of(c), 0, stride_of(c)) if len(foreign) == 2 else (0,)
        for s in shifts:
            regs = dict(probe.initial_regs)
            regs[lay.params[role]] += delta + s
            envs.append(Environment(regs, regions=region))
    return envs


def stride_of(c: TestCaseConfig) -> int:
    return c.ptr.elem_size


# ---------------------------------------------------------------------------
# fingerprints and corpus output


def fingerprint(f: Function) -> str:
    """Address-independent digest of a function's rendered instructions."""
    index = {i.addr: n for n, i in enumerate(f.instrs)}
    h = hashlib.md5()
    for i in f.instrs:
        text = render_instruction(i)
        t = i.target
        if t is not None and t.addr in index:
            text = f"{i.mnemonic} @{index[t.addr]}"
        h.update(text.encode() + b"\n")
    return h.hexdigest()


def program_fingerprint(p: Program) -> str:
    return fingerprint(p.functions[TARGET_NAME])


@dataclass
class CorpusCase:
    case_id: str
    config: TestCaseConfig
    program: Program
    truth: GroundTruthRecord
    fingerprint: str
    duplicates: int = 0


def config_to_json(c: TestCaseConfig) -> dict:
    return {
        "origin": c.ptr.origin.value, "elem_kind": c.ptr.elem_kind.value, "elem_size": c.ptr.elem_size,
        "length": c.ptr.length, "expansion": c.expansion.value, "write_xform": str(c.write_xform),
        "read_xform": str(c.read_xform), "callee": c.callee.value, "frame": c.frame.value,
        "read_origin": c.read_origin.value if c.read_origin else None, "read_width": c.read_width,
    }


def config_from_json(d: dict) -> TestCaseConfig:
    ptr = PointerSpec(PointerOrigin(d["origin"]), ElemKind(d["elem_kind"]), int(d["elem_size"]), d["length"])
    return TestCaseConfig(
        ptr, Expansion(d["expansion"]), OffsetTransform.parse(d["write_xform"]),
        OffsetTransform.parse(d["read_xform"]), Callee(d["callee"]), Frame(d["frame"]),
        PointerOrigin(d["read_origin"]) if d.get("read_origin") else None, d.get("read_width"))


class DuplicateLabelError(AssertionError):
    pass


def build_corpus(configs: Iterable[TestCaseConfig]) -> list[CorpusCase]:
    """Synthesize and deduplicate by fingerprint, keeping the first config."""
    seen: dict[str, CorpusCase] = {}
    for c in configs:
        p, t = synthesize_test_case(c)
        fp = program_fingerprint(p)
        if fp in seen:
            prev = seen[fp]
            if (prev.truth.degree, prev.truth.alias_class) != (t.degree, t.alias_class):
                raise DuplicateLabelError(f"identical code, different labels: {c} vs {prev.config}")
            prev.duplicates += 1
            continue
        seen[fp] = CorpusCase(f"case_{len(seen):05d}", c, p, t, fp)
    return list(seen.values())


def oracle_verdict(case: CorpusCase) -> Verdict:
    envs = environments(case.config, case.program, case.truth)
    return oracle_data_flow(case.program, case.truth.write_addr, case.truth.read_addr, envs, TARGET_NAME)


def write_corpus(cases: list[CorpusCase], outdir: Path, oracle: bool = False) -> Path:
    """Write ``case_NNNNN/{test.s,truth.json}`` plus ``manifest.jsonl``."""
    from .isa import render_program
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = outdir / "manifest.jsonl"
    with manifest.open("w") as mf:
        for case in cases:
            d = outdir / case.case_id
            d.mkdir(exist_ok=True)
            (d / "test.s").write_text(render_program(case.program))
            truth = case.truth.to_json()
            if oracle:
                truth["oracle_truth"] = oracle_verdict(case).value
            (d / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
            mf.write(json.dumps({"case": case.case_id, "config": config_to_json(case.config),
                                 "fingerprint": case.fingerprint, "duplicates": case.duplicates},
                                sort_keys=True) + "\n")
    return manifest


def read_manifest(corpus: Path) -> list[dict]:
    path = Path(corpus) / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(
            f"{path} not found; create a corpus first with `binflow generate {corpus}`")
    with path.open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def replace_config(c: TestCaseConfig, **changes) -> TestCaseConfig:
    return dataclasses.replace(c, **changes)


def load_case(corpus: Path, entry: dict) -> CorpusCase:
    """Case described by one manifest entry, read back from its files."""
    d = Path(corpus) / entry["case"]
    program = parse_program((d / "test.s").read_text())
    truth = GroundTruthRecord.from_json(json.loads((d / "truth.json").read_text()))
    return CorpusCase(entry["case"], config_from_json(entry["config"]), program, truth,
                      entry.get("fingerprint", ""), entry.get("duplicates", 0))


def load_corpus(corpus: Path) -> list[CorpusCase]:
    return [load_case(corpus, e) for e in read_manifest(corpus)]
