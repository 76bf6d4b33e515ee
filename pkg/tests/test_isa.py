import pytest
from hypothesis import given
from hypothesis import strategies as st

from binflow.fixtures import SORTLIST
from binflow.isa import (
    CALLER_SAVED, GPRS, REGISTER_ALIASES, CFGError, Imm, Instruction, MemExpr, ParseError, Register,
    SymbolRef, WidthError, access_width, build_cfg, parse_instruction, parse_program, reg,
    render_instruction, sub_register,
)


def test_parse_listing_with_byte_store():
    p = parse_program("f:\n mov [rdi], dl\n mov al, [rdi]\n ret")
    f = p.functions["f"]
    assert len(f.instrs) == 3
    assert f.instrs[0].operands[0] == MemExpr(base=reg("rdi"), disp=0, width=1)
    assert f.entry == f.instrs[0].addr


def test_parse_empty():
    assert parse_program("").functions == {}


def test_parse_errors():
    with pytest.raises(ParseError):
        parse_program("f:\n frob rax\n")
    with pytest.raises(ParseError):
        parse_program("f:\n mov rax, [rdi\n")
    with pytest.raises(ParseError):
        parse_program("f:\n ret\nf:\n ret\n")
    with pytest.raises(ParseError):
        reg("xmm0")


def test_parse_error_reports_line():
    with pytest.raises(ParseError, match=r"^3:"):
        parse_program("f:\n nop\n mov rax, qax\n")


def _published(text):
    return "\n".join(line for line in text.splitlines() if "reconstructed" not in line)


def test_sortlist_fragment_instruction_count():
    p = parse_program(_published(SORTLIST))
    f = p.functions["config_sortlist"]
    assert len(f.instrs) == 28
    assert f.instrs[0].addr == 0xBB8E
    assert f.instrs[-1].addr == 0xBCAE


def test_sortlist_block_leaders():
    p = parse_program(SORTLIST)
    cfg = build_cfg(p.functions["config_sortlist"])
    leaders = {b.leader for b in cfg.blocks}
    assert {0xBBB4, 0xBBAF} <= leaders


def test_render_stack_byte_store():
    i = Instruction(0, "mov", (MemExpr(base=reg("rsp"), disp=-1, width=1), reg("dil")))
    assert render_instruction(i) == "mov BYTE PTR [rsp-0x1], dil"
    assert render_instruction(Instruction(0, "nop")) == "nop"


def test_access_width_examples():
    i = parse_instruction("mov dword ptr [rax+0x28], edx")
    assert access_width(i.operands[0], i) == 4
    i = parse_instruction("mov [rdi], dl")
    assert access_width(i.operands[0], i) == 1
    assert access_width(i.operands[1], i) == 1
    i = parse_instruction("mov [rax], 0")
    with pytest.raises(WidthError):
        access_width(i.operands[0], i)


def test_cfg_straight_line():
    f = parse_program("f:\n mov rax, rdi\n add rax, 1\n ret\n").functions["f"]
    cfg = build_cfg(f)
    assert len(cfg.blocks) == 1 and cfg.edges == ()


def test_cfg_jz_over_one_instruction():
    f = parse_program("f:\n test rdi, rdi\n jz .out\n mov rax, 1\n.out:\n ret\n").functions["f"]
    cfg = build_cfg(f)
    assert len(cfg.blocks) == 3
    assert len(cfg.edges) == 3


def test_cfg_call_falls_through():
    f = parse_program("f:\n call g\n mov rax, 1\n ret\n").functions["f"]
    assert len(build_cfg(f).blocks) == 1


def test_cfg_branch_outside_function():
    p = parse_program("f:\n jmp g\ng:\n ret\n")
    with pytest.raises(CFGError):
        build_cfg(p.functions["f"])


def test_register_aliases_total():
    for name, (canon, width) in REGISTER_ALIASES.items():
        r = reg(name.upper())
        assert (r.canonical, r.width) == (canon, width)
        assert sub_register(canon, width).canonical == canon


def test_caller_saved_are_gprs():
    assert set(CALLER_SAVED) <= set(GPRS)


# -- property tests ----------------------------------------------------------

_regs64 = st.sampled_from([r for r in GPRS])
_index = st.sampled_from([r for r in GPRS if r != "rsp"])
_widths = st.sampled_from([1, 2, 4, 8])


@st.composite
def mem_exprs(draw, width=None):
    base = draw(st.one_of(st.none(), _regs64.map(reg)))
    index = draw(st.one_of(st.none(), _index.map(reg)))
    scale = draw(st.sampled_from([1, 2, 4, 8])) if index is not None else 1
    disp = draw(st.integers(-0x1000, 0x1000))
    return MemExpr(base, index, scale, disp, width)


@st.composite
def instructions(draw):
    kind = draw(st.sampled_from(["rr", "rm", "mr", "mi", "ri", "lea", "push", "pop", "jump", "bare", "shift"]))
    w = draw(_widths)
    r = sub_register(draw(_regs64), w * 8)
    if kind == "rr":
        m = draw(st.sampled_from(["mov", "add", "sub", "or", "and", "xor", "cmp", "test"]))
        ops = (r, sub_register(draw(_regs64), w * 8))
    elif kind == "rm":
        m = draw(st.sampled_from(["mov", "add", "sub", "or", "and", "xor", "cmp"]))
        ops = (r, draw(mem_exprs(w)))
    elif kind == "mr":
        m = draw(st.sampled_from(["mov", "add", "sub", "or", "and", "xor", "cmp", "test"]))
        ops = (draw(mem_exprs(w)), r)
    elif kind == "mi":
        m = draw(st.sampled_from(["mov", "add", "cmp", "and"]))
        ops = (draw(mem_exprs(w)), Imm(draw(st.integers(0, 0x7FFF))))
    elif kind == "ri":
        m = draw(st.sampled_from(["mov", "add", "sub", "xor", "cmp"]))
        ops = (r, Imm(draw(st.integers(0, 2**31 - 1))))
    elif kind == "lea":
        m, ops = "lea", (sub_register(draw(_regs64), 64), draw(mem_exprs()))
    elif kind in ("push", "pop"):
        m = kind
        ops = (draw(st.one_of(_regs64.map(reg), mem_exprs(8))),)
    elif kind == "jump":
        m = draw(st.sampled_from(["jmp", "jz", "jnz", "call"]))
        ops = (SymbolRef(draw(st.sampled_from(["g", ".L1", "malloc"]))),)
    elif kind == "shift":
        m = draw(st.sampled_from(["shl", "shr"]))
        ops = (draw(st.one_of(st.just(r), mem_exprs(w))), draw(st.sampled_from([Imm(1), Imm(4), reg("cl")])))
    else:
        m, ops = draw(st.sampled_from(["ret", "nop"])), ()
    return Instruction(0, m, ops)


@given(instructions())
def test_parse_render_round_trip(i):
    assert parse_instruction(render_instruction(i)) == i


@given(st.lists(instructions(), min_size=1, max_size=12))
def test_every_instruction_in_one_block(body):
    body = [i for i in body if i.mnemonic not in ("jmp", "jz", "jnz")]
    text = "f:\n" + "".join(f" {render_instruction(i)}\n" for i in body) + " ret\n"
    f = parse_program(text).functions["f"]
    cfg = build_cfg(f)
    seen = [a for b in cfg.blocks for a in b.addrs]
    assert sorted(seen) == list(f.addrs)
    assert len(set(seen)) == len(seen)


@given(st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789", min_size=1, max_size=5))
def test_unknown_register_is_parse_error(name):
    if name.lower() in REGISTER_ALIASES:
        assert isinstance(reg(name), Register)
    else:
        with pytest.raises(ParseError):
            reg(name)
