"""Small hand-written programs used as regression fixtures.

``LISTINGS`` holds the short examples that illustrate degrees, channels and
callee effects.  ``CVE_FIXTURES`` holds three real-world function fragments in
Ghidra listing syntax together with the edges an analysis must report.  The
fragments were published without prologue, loop tails or epilogue; those
parts are filled in with plausible compiler output (marked below) so that the
stack frame is set up the way the listed ``local_XX`` offsets assume.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .isa import Program, parse_program
from .staticflow import AnalysisConfig, analyze_function, preset

LISTINGS: dict[str, str] = {
    "unconditional": "f_target:\n mov [rdi], dl ; Write\n mov al, [rdi] ; Read\n ret\n",
    "possible": "f_target:\n mov [rdi], dl ; Write\n mov al, [rdi+rsi] ; Read\n ret\n",
    "impossible": "f_target:\n mov [rdi], dl ; Write\n mov al, [rdi-8] ; Read\n ret\n",
    "channel_reg": "f_target:\n mov rbx, 0 ; Write\n mov rax, rbx ; Read\n ret\n",
    "channel_mem": "f_target:\n mov [rbp-0x8], rdi ; Write\n mov rax, [rbp-0x8] ; Read\n ret\n",
    "callee_reads": (
        "f_target:\n"
        " mov QWORD PTR [rsp+0x8], 0 ; Write\n"
        " lea rdi, [rsp+0x8]\n"
        " call f_callee\n"
        " mov rax, [rsp+0x8] ; Read\n"
        " ret\n"
        "f_callee:\n"
        " mov rax, [rdi]\n"
        " ret\n"
    ),
    "callee_overwrites": (
        "f_target:\n"
        " mov QWORD PTR [rsp+0x8], 0 ; Write\n"
        " lea rdi, [rsp+0x8]\n"
        " call f_callee\n"
        " mov rax, [rsp+0x8] ; Read\n"
        " ret\n"
        "f_callee:\n"
        " mov QWORD PTR [rdi], 0\n"
        " ret\n"
    ),
    "red_zone": (
        "f_target:\n"
        " mov BYTE PTR [rsp-0x1], dil ; Write\n"
        " mov al, BYTE PTR [rsp-0x1] ; Read\n"
        " ret\n"
    ),
    "red_zone_call": (
        "f_target:\n"
        " sub rsp, 0x10\n"
        " mov BYTE PTR [rsp+0xf], dil ; Write\n"
        " call f_callee\n"
        " mov al, BYTE PTR [rsp+0xf] ; Read\n"
        " add rsp, 0x10\n"
        " ret\n"
        "f_callee:\n"
        " ret\n"
    ),
    "spilled_offset": (
        "f_target:\n"
        " lea rax, [rsi+0x1]\n"
        " mov QWORD PTR [rsp-0x8], rax\n"
        " mov BYTE PTR [rsi], dil ; Write\n"
        " mov rax, QWORD PTR [rsp-0x8]\n"
        " mov al, BYTE PTR [rax] ; Read\n"
        " ret\n"
    ),
}


def listing(name: str) -> Program:
    return parse_program(LISTINGS[name])


def marked(p: Program, function: str = "f_target") -> tuple[int, int]:
    """Addresses of the instructions commented ``Write`` and ``Read``."""
    marks = {i.comment: i.addr for i in p.functions[function].instrs}
    return marks["Write"], marks["Read"]


# integer overflow in a bitmap header reader: three read-modify-write
# sequences on one struct field, each interrupted by a getc call
BMP_HEADER = """\
bmp_read_info_header:
fa00: PUSH RBP                                   ; reconstructed
fa01: MOV  RBP,RSP                               ; reconstructed
fa04: SUB  RSP,0x10                              ; reconstructed
fa08: MOV  qword ptr [RBP + local_10],RDI        ; reconstructed
fa0c: MOV  qword ptr [RBP + local_18],RSI        ; reconstructed
fae3: MOV  RAX,qword ptr [RBP + local_10]
fae7: MOV  RDI,RAX
faea: CALL <EXTERNAL>::_IO_getc
faef: MOV  EDX,EAX
faf1: MOV  RAX,qword ptr [RBP + local_18]
faf5: MOV  dword ptr [RAX + 0x28],EDX
faf8: MOV  RAX,qword ptr [RBP + local_10]
fafc: MOV  RDI,RAX
faff: CALL <EXTERNAL>::_IO_getc
fb04: SHL  EAX,0x8
fb07: MOV  EDX,EAX
fb09: MOV  RAX,qword ptr [RBP + local_18]
fb0d: MOV  EAX,dword ptr [RAX + 0x28]
fb10: OR   EDX,EAX
fb12: MOV  RAX,qword ptr [RBP + local_18]
fb16: MOV  dword ptr [RAX + 0x28],EDX
fb19: MOV  RAX,qword ptr [RBP + local_10]
fb1d: MOV  RDI,RAX
fb20: CALL <EXTERNAL>::_IO_getc
fb25: SHL  EAX,0x10
fb28: MOV  EDX,EAX
fb2a: MOV  RAX,qword ptr [RBP + local_18]
fb2e: MOV  EAX,dword ptr [RAX + 0x28]
fb31: OR   EDX,EAX
fb33: MOV  RAX,qword ptr [RBP + local_18]
fb37: MOV  dword ptr [RAX + 0x28],EDX
fb3a: MOV  RAX,qword ptr [RBP + local_10]
fb3e: MOV  RDI,RAX
fb41: CALL <EXTERNAL>::_IO_getc
fb46: SHL  EAX,0x18
fb49: MOV  EDX,EAX
fb4b: MOV  RAX,qword ptr [RBP + local_18]
fb4f: MOV  EAX,dword ptr [RAX + 0x28]
fb52: OR   EDX,EAX
fb54: MOV  RAX,qword ptr [RBP + local_18]        ; reconstructed
fb58: MOV  dword ptr [RAX + 0x28],EDX            ; reconstructed
fb5b: MOV  EAX,0x1                               ; reconstructed
fb60: MOV  RSP,RBP                               ; reconstructed
fb63: POP  RBP                                   ; reconstructed
fb64: RET                                        ; reconstructed
"""

# buffer overflow in a sortlist parser: the string start is spilled once and
# read again before each of two memcpy calls
SORTLIST = """\
config_sortlist:
bb7a: PUSH RBP                                   ; reconstructed
bb7b: MOV  RBP,RSP                               ; reconstructed
bb7e: SUB  RSP,0x90                              ; reconstructed
bb8e: MOV  qword ptr [RBP + local_80],RDI
bb92: MOV  qword ptr [RBP + local_88],RSI
bb96: MOV  qword ptr [RBP + local_90],RDX
bb9d: JMP  LAB_0010bf6c
bba2: MOV  RAX,qword ptr [RBP + local_90]
bba9: MOV  qword ptr [RBP + local_10],RAX
bbad: JMP  LAB_0010bbb4
bbaf: ADD  qword ptr [RBP + local_10],0x1
bbb4: MOV  RAX,qword ptr [RBP + local_10]        ; reconstructed
bbb8: MOV  AL,byte ptr [RAX]                     ; reconstructed
bbba: TEST AL,AL                                 ; reconstructed
bbbc: JZ   LAB_0010bbfc                          ; reconstructed
bbbe: CMP  AL,0x2f                               ; reconstructed
bbc0: JZ   LAB_0010bbfc                          ; reconstructed
bbc2: CMP  AL,0x3b                               ; reconstructed
bbc4: JZ   LAB_0010bbfc                          ; reconstructed
bbc6: CALL <EXTERNAL>::__ctype_b_loc             ; reconstructed
bbcb: MOV  RAX,qword ptr [RAX]                   ; reconstructed
bbce: MOV  EAX,dword ptr [RAX]                   ; reconstructed
bbd0: AND  EAX,0x2000                            ; reconstructed
bbf8: TEST EAX,EAX
bbfa: JZ   LAB_0010bbaf
bbfc: MOV  RAX,qword ptr [RBP + local_10]
bc00: SUB  RAX,qword ptr [RBP + local_90]
bc07: MOV  RDX,RAX
bc0a: MOV  RCX,qword ptr [RBP + local_90]
bc11: LEA  RAX=>local_58,[RBP + -0x50]
bc15: MOV  RSI,RCX
bc18: MOV  RDI,RAX
bc1b: CALL <EXTERNAL>::memcpy
bc20: MOV  RAX,qword ptr [RBP + local_10]        ; reconstructed
bc24: MOV  AL,byte ptr [RAX]                     ; reconstructed
bc26: CMP  AL,0x2f                               ; reconstructed
bc28: JNZ  LAB_0010bf6c                          ; reconstructed
bc2e: MOV  RAX,qword ptr [RBP + local_10]        ; reconstructed
bc32: ADD  RAX,0x1                               ; reconstructed
bc36: MOV  qword ptr [RBP + local_20],RAX        ; reconstructed
bc3a: JMP  LAB_0010bc52                          ; reconstructed
bc4d: ADD  qword ptr [RBP + local_10],0x1
bc52: MOV  RAX,qword ptr [RBP + local_10]
bc56: MOV  AL,byte ptr [RAX]                     ; reconstructed
bc58: TEST AL,AL                                 ; reconstructed
bc5a: JZ   LAB_0010bc8f                          ; reconstructed
bc5c: CMP  AL,0x3b                               ; reconstructed
bc5e: JNZ  LAB_0010bc4d                          ; reconstructed
bc8f: MOV  RAX,qword ptr [RBP + local_10]
bc93: SUB  RAX,qword ptr [RBP + local_90]
bc9a: MOV  RDX,RAX
bc9d: MOV  RCX,qword ptr [RBP + local_90]
bca4: LEA  RAX=>local_78,[RBP + -0x70]
bca8: MOV  RSI,RCX
bcab: MOV  RDI,RAX
bcae: CALL <EXTERNAL>::memcpy
bcb3: MOV  RAX,qword ptr [RBP + local_20]        ; reconstructed
bcb7: MOV  qword ptr [RBP + local_90],RAX        ; reconstructed
bf6c: MOV  RAX,qword ptr [RBP + local_90]        ; reconstructed
bf73: MOV  AL,byte ptr [RAX]                     ; reconstructed
bf75: TEST AL,AL                                 ; reconstructed
bf77: JNZ  LAB_0010bba2                          ; reconstructed
bf7d: MOV  EAX,0x0                               ; reconstructed
bf82: MOV  RSP,RBP                               ; reconstructed
bf85: POP  RBP                                   ; reconstructed
bf86: RET                                        ; reconstructed
"""

# buffer underflow in an IPv6 parser: val <<= 4; val |= f(...)
INET_PTON = """\
ares_inet_net_pton_ipv6:
165a0: PUSH RBP                                  ; reconstructed
165a1: MOV  RBP,RSP                              ; reconstructed
165a4: SUB  RSP,0x50                             ; reconstructed
165a8: MOV  dword ptr [RBP + local_30],0x0       ; reconstructed
165af: MOV  qword ptr [RBP + local_20],RSI       ; reconstructed
165b3: MOV  qword ptr [RBP + local_48],RDX       ; reconstructed
16608: SHL  dword ptr [RBP + local_30],0x4
1660c: MOV  RAX,qword ptr [RBP + local_48]
16610: SUB  RAX,qword ptr [RBP + local_20]
16614: MOV  RDI,RAX
16617: CALL aresx_sztoui
1661c: OR   dword ptr [RBP + local_30],EAX
1661f: MOV  EAX,dword ptr [RBP + local_30]       ; reconstructed
16622: MOV  RSP,RBP                              ; reconstructed
16625: POP  RBP                                  ; reconstructed
16626: RET                                       ; reconstructed
"""


@dataclass(frozen=True)
class CVEFixture:
    name: str
    function: str
    text: str
    # edges the full model (c1, c2 and f) must report
    expected: frozenset
    # the subset of ``expected`` the baseline is documented to miss
    baseline_misses: frozenset = field(default_factory=frozenset)

    def program(self) -> Program:
        return parse_program(self.text)


CVE_FIXTURES = (
    CVEFixture("CVE-2018-6616", "bmp_read_info_header", BMP_HEADER,
               frozenset({(0xFAF5, 0xFB0D), (0xFB16, 0xFB2E), (0xFB37, 0xFB4F)}),
               frozenset({(0xFAF5, 0xFB0D), (0xFB16, 0xFB2E), (0xFB37, 0xFB4F)})),
    CVEFixture("CVE-2022-4904", "config_sortlist", SORTLIST,
               frozenset({(0xBB96, 0xBC00), (0xBB96, 0xBC0A), (0xBB96, 0xBC93), (0xBB96, 0xBC9D)}),
               frozenset({(0xBB96, 0xBC93), (0xBB96, 0xBC9D)})),
    CVEFixture("CVE-2023-31130", "ares_inet_net_pton_ipv6", INET_PTON,
               frozenset({(0x16608, 0x1661C)}),
               frozenset({(0x16608, 0x1661C)})),
)


@dataclass
class FixtureResult:
    name: str
    present: set
    missing: set
    unexpected: set  # edges the preset should miss but reported

    @property
    def ok(self) -> bool:
        return not self.missing and not self.unexpected


def check_fixture(fx: CVEFixture, config: AnalysisConfig) -> FixtureResult:
    """Compare the memory edges reported under ``config`` with the documented ones.

    With both call extensions enabled every expected edge must appear.
    Without them, the baseline misses must be absent and the rest present.
    """
    p = fx.program()
    g = analyze_function(p, p.functions[fx.function], None, config)
    reported = {(s, d) for s, d, _ in g.edge_set("mem")}
    full = config.c1_calling_convention and config.c2_stack_preservation
    must = set(fx.expected) if full else set(fx.expected - fx.baseline_misses)
    must_not = set() if full else set(fx.baseline_misses)
    return FixtureResult(fx.name, reported & set(fx.expected), must - reported, must_not & reported)


def check_fixtures(preset_name: str) -> list[FixtureResult]:
    config = preset(preset_name)
    return [check_fixture(fx, config) for fx in CVE_FIXTURES]
