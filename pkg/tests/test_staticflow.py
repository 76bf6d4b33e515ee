import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binflow.dynflow import build_interprocedural_dfg, eliminate_clear_idioms
from binflow.fixtures import listing, marked
from binflow.interp import Environment, execute
from binflow.isa import GPRS, build_cfg, parse_instruction, parse_program, sub_register
from binflow.staticflow import (
    ADDR_CONC, CONCRETE, PRESETS, TOP, AbsAddress, Alias, AnalysisConfig, AnalysisError, Const, Sym,
    alias, analyze, analyze_function, entry_state, eval_instruction, join, join_values, preset,
    resolve_address, state_leq,
)

BASE = preset("baseline")
F = preset("f")
CF = preset("cf")


def _eval(text, config=BASE, s=None):
    return eval_instruction(s or entry_state(), parse_instruction(text, 0x10), config)


def _edge(name, config):
    p = listing(name)
    w, r = marked(p)
    wi = p.instruction(w)
    channel = "mem" if wi.mem is not None else wi.operands[0].canonical
    return analyze_function(p, p.functions["f_target"], None, config).has_edge(w, r, channel)


def test_lea_is_affine():
    s, _ = _eval("lea rax, [rsi+0x1]")
    assert s.regs["rax"] == Sym("rsi0", 1)


def test_clear_idioms_do_not_use_prior_value():
    for text in ("xor rbx, rbx", "sub rbx, rbx"):
        s0, _ = _eval("mov rbx, rdi")
        s, edges = _eval(text, s=s0)
        assert s.regs["rbx"] == Const(0)
        assert not edges


def test_sym_plus_sym_is_top():
    s, _ = _eval("add rax, rbx")
    assert s.regs["rax"] is TOP
    s, _ = _eval("shl rdi, 2")
    assert s.regs["rdi"] is TOP


def test_baseline_concretizes_unknown_bases():
    s = entry_state()
    a = resolve_address(s, parse_instruction("mov [rdi], dl").mem, BASE, 1)
    b = resolve_address(s, parse_instruction("mov al, [rdi-8]").mem, BASE, 1)
    assert a == b == AbsAddress(CONCRETE, ADDR_CONC, 1)
    assert alias(a, b) is Alias.MUST


def test_field_disunion_separates_offsets():
    s = entry_state()
    a = resolve_address(s, parse_instruction("mov [rdi], dl").mem, F, 1)
    b = resolve_address(s, parse_instruction("mov al, [rdi-8]").mem, F, 1)
    assert (a.region, a.offset) == ("rdi0", 0) and (b.region, b.offset) == ("rdi0", -8)
    assert alias(a, b, F) is Alias.NO
    c = resolve_address(s, parse_instruction("mov al, [rdi+rsi]").mem, F, 1)
    assert (c.region, c.offset) == ("rdi0", None)
    assert alias(a, c, F) is Alias.MAY and alias(b, c, F) is Alias.MAY


def test_alias_examples():
    assert alias(AbsAddress("b", 0, 1), AbsAddress("b", 0, 1)) is Alias.MUST
    assert alias(AbsAddress("b", 0, 4), AbsAddress("b", 2, 4)) is Alias.MUST
    assert alias(AbsAddress("b1", 0, 1), AbsAddress("b2", 0, 1), F) is Alias.NO
    with pytest.raises(ValueError):
        AbsAddress("b", 0, 0)


def test_join_rules():
    s = entry_state()
    assert join(s, s) == s
    a, _ = _eval("call g")
    b, _ = eval_instruction(entry_state(), parse_instruction("call g", 0x20), BASE)
    assert join(a, b).regs["rax"] is TOP
    assert join_values(Sym("p", 0), Sym("p", 8)) == Sym("p", None)


def test_presets():
    assert preset("angr-cf") == AnalysisConfig(True, True, True)
    assert preset("baseline").name == "angr" and preset("cf").name == "angr_CF"
    assert AnalysisConfig(c1_calling_convention=True).name == "angr_C1"
    with pytest.raises(KeyError):
        preset("nope")


@pytest.mark.parametrize("name", ["unconditional", "possible", "channel_reg", "channel_mem", "red_zone"])
def test_real_flows_reported_by_every_preset(name):
    for cfg in (BASE, preset("c"), F, CF):
        assert _edge(name, cfg)


def test_impossible_flow_needs_field_disunion():
    assert _edge("impossible", BASE) and _edge("impossible", preset("c"))
    assert not _edge("impossible", F) and not _edge("impossible", CF)


@pytest.mark.parametrize("name", ["callee_reads", "callee_overwrites", "red_zone_call"])
def test_call_extensions_keep_definitions(name):
    assert not _edge(name, BASE) and not _edge(name, F)
    assert _edge(name, preset("c")) and _edge(name, CF)


def test_c2_alone_keeps_stack_pointer():
    text = "f:\n mov QWORD PTR [rsp-0x10], 1\n call g\n mov rax, [rsp-0x10]\n ret\n"
    p = parse_program(text)
    a = p.functions["f"].addrs
    only_c1 = AnalysisConfig(c1_calling_convention=True)
    both = AnalysisConfig(True, True)
    g1 = analyze_function(p, p.functions["f"], None, only_c1)
    g2 = analyze_function(p, p.functions["f"], None, both)
    assert g2.has_edge(a[0], a[2])
    assert not g1.has_edge(a[0], a[2])  # rsp moved by the unpopped return address


def test_call_records_argument_registers():
    p = parse_program("f:\n mov edi, 0x10\n call malloc\n mov BYTE PTR [rax], 1\n ret\n")
    res = analyze(p, p.functions["f"], None, CF)
    assert res.call_args[p.functions["f"].addrs[1]] == ("rdi",)


LOOP = """\
f:
 mov rdx, rdi
 mov ecx, 3
.l:
 mov BYTE PTR [rdi], 0
 add rdi, 1
 sub ecx, 1
 jnz .l
 mov al, BYTE PTR [rdx+0x2]
 ret
"""


def test_loop_widens_offsets():
    p = parse_program(LOOP)
    f = p.functions["f"]
    res = analyze(p, f, None, F)
    assert res.passes <= 2 * len(build_cfg(f).blocks)
    store, load = f.instrs[2].addr, f.instrs[6].addr
    assert res.dfg.has_edge(store, load)


def test_fixpoint_bound_errors():
    p = parse_program(LOOP)
    with pytest.raises(AnalysisError):
        analyze(p, p.functions["f"], None, AnalysisConfig(f_field_disunion=True, passes_per_block=0))


def test_dfg_covers_function():
    p = listing("unconditional")
    g = analyze_function(p, p.functions["f_target"])
    assert g.nodes == set(p.functions["f_target"].addrs)


# -- property tests ----------------------------------------------------------

_POOL = [
    "mov rax, rdi", "mov rdi, rsi", "lea rsi, [rdi+0x8]", "add rdi, 8", "sub rsi, 4", "xor eax, eax",
    "mov QWORD PTR [rdi], rax", "mov QWORD PTR [rdi+0x8], rsi", "mov rax, QWORD PTR [rdi]",
    "mov rsi, QWORD PTR [rdi+0x8]", "mov BYTE PTR [rsp-0x8], al", "mov rdx, QWORD PTR [rsp-0x8]",
    "mov QWORD PTR [rsp-0x10], rdi", "mov rdi, QWORD PTR [rsp-0x10]", "mov BYTE PTR [rdi+rcx], dl",
    "add QWORD PTR [rsi], 1", "push rdi", "pop rsi", "call g", "call malloc", "mov rcx, 2",
    "mov al, BYTE PTR [rsi+rcx]", "shl rcx, 3", "and rdx, rsi", "mov DWORD PTR [rip+0x40], eax",
    "mov eax, DWORD PTR [rip+0x40]", "mov QWORD PTR [rax+0x4], rdx", "cmp QWORD PTR [rdi], 0",
]
_program_strategy = st.lists(st.integers(0, len(_POOL) - 1), max_size=10)


def _run(seq, config, start):
    s = entry_state()
    for n, k in enumerate(seq):
        s, _ = eval_instruction(s, parse_instruction(_POOL[k], start + n), config)
    return s


@settings(max_examples=300, deadline=None)
@given(_program_strategy, _program_strategy, st.integers(0, len(_POOL) - 1), st.sampled_from(["f", "cf"]))
def test_transfer_is_monotone(seq1, seq2, k, name):
    # baseline concretization sends a widened address to one constant, so
    # only the field-disunion configs are monotone
    config = PRESETS[name]
    s = _run(seq1, config, 0x100)
    s_big = join(s, _run(seq2, config, 0x200))
    assert state_leq(s, s_big)
    i = parse_instruction(_POOL[k], 0x300)
    out, edges = eval_instruction(s, i, config)
    out_big, edges_big = eval_instruction(s_big, i, config)
    assert state_leq(out, out_big)
    assert edges <= edges_big


_REGS = [r for r in GPRS if r not in ("rsp", "rbp")]


@st.composite
def register_programs(draw):
    lines = []
    for _ in range(draw(st.integers(1, 12))):
        w = draw(st.sampled_from([8, 16, 32, 64]))
        a = sub_register(draw(st.sampled_from(_REGS)), w)
        b = sub_register(draw(st.sampled_from(_REGS)), w)
        kind = draw(st.sampled_from(["alu", "imm", "lea", "clear", "shift", "cmp"]))
        if kind == "alu":
            lines.append(f"{draw(st.sampled_from(['mov', 'add', 'sub', 'xor', 'and', 'or']))} {a}, {b}")
        elif kind == "imm":
            lines.append(f"{draw(st.sampled_from(['mov', 'add', 'or']))} {a}, {draw(st.integers(0, 99))}")
        elif kind == "lea":
            x, y = draw(st.sampled_from(_REGS)), draw(st.sampled_from(_REGS))
            lines.append(f"lea {draw(st.sampled_from(_REGS))}, [{x}+{y}*2+0x4]")
        elif kind == "clear":
            lines.append(f"{draw(st.sampled_from(['xor', 'sub']))} {a}, {a}")
        elif kind == "shift":
            lines.append(f"shl {a}, {draw(st.sampled_from(['1', 'cl']))}")
        else:
            lines.append(f"{draw(st.sampled_from(['cmp', 'test']))} {a}, {b}")
    return "f:\n" + "".join(f" {line}\n" for line in lines) + " ret\n"


@settings(max_examples=150, deadline=None)
@given(register_programs())
def test_register_edges_match_dynamic(text):
    p = parse_program(text)
    env = Environment({r: 0x100 + n for n, r in enumerate(GPRS) if r != "rsp"})
    dyn = build_interprocedural_dfg([execute(p, "f", env)], p)
    dyn = eliminate_clear_idioms(dyn, p, "f")
    static = analyze_function(p, p.functions["f"], None, CF)
    regs = lambda g: {k for k in g.edge_set() if k[2] != "mem"}
    assert regs(static) == regs(dyn)
