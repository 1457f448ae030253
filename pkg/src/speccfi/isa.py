"""Toy ISA with CFI-extended control transfers, an assembler and image loader.

One instruction occupies one address unit. Data memory is byte addressed and
loads/stores move 64-bit little-endian words. ``r15`` is the stack pointer;
calls push the return address on the architectural stack in data memory.

Assembly syntax (one instruction per line, ``;`` starts a comment)::

    name:                 ; symbol for the next instruction
    .org 0x24             ; pad with nops up to instruction index 0x24
    .func name [sig]      ; declare an address-taken function (optional signature)
    .jtarget name         ; declare an address-taken indirect-jump target
    li r1, 5              ; immediate or symbol address
    load r2, [r3+8]       ; also [r3], [r3-8], [0x200]
    pop r14               ; load from [sp], sp += 8
    store r2, [r3]
    add r1, r2 | add r1, 5 | add r1, r2, r3 | addi r1, 2
    shl r1, 6 | shl r1, r2
    cmp r1, r2 | cmp r1, 0 | cmpi r1, 0
    jz target | jnz target
    jmp target | jmp *r1, L2
    call target | call *r1, L1
    ret
    cfi_lbl L1
    lfence | lfence.relaxed
    clflush [r3]
    nop | halt
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

NUM_REGS = 16
SP = 15
FLAGS = 16  # pseudo register written by cmp, read by jz/jnz
WORD = 8
MASK64 = (1 << 64) - 1
LABEL_MAX = (1 << 32) - 1
DEFAULT_DATA_BASE = 0x10000


class Kind(enum.Enum):
    LOAD_IMM = "li"
    LOAD = "load"
    STORE = "store"
    ADD = "add"
    SHL = "shl"
    CMP = "cmp"
    CMP_IMM = "cmpi"
    JZ = "jz"
    JNZ = "jnz"
    JMP_DIRECT = "jmp"
    JMP_INDIRECT = "jmpi"
    CALL_DIRECT = "call"
    CALL_INDIRECT = "calli"
    RET = "ret"
    CFI_LBL = "cfi_lbl"
    FENCE_STRICT = "lfence"
    FENCE_RELAXED = "lfence.relaxed"
    CLFLUSH = "clflush"
    NOP = "nop"
    HALT = "halt"


LABELED_KINDS = frozenset({Kind.JMP_INDIRECT, Kind.CALL_INDIRECT, Kind.CFI_LBL})
INDIRECT_KINDS = frozenset({Kind.JMP_INDIRECT, Kind.CALL_INDIRECT})
COND_KINDS = frozenset({Kind.JZ, Kind.JNZ})
DIRECT_KINDS = frozenset({Kind.JZ, Kind.JNZ, Kind.JMP_DIRECT, Kind.CALL_DIRECT})
CONTROL_KINDS = DIRECT_KINDS | INDIRECT_KINDS | {Kind.RET, Kind.HALT}
FENCE_KINDS = frozenset({Kind.FENCE_STRICT, Kind.FENCE_RELAXED})


class AsmError(ValueError):
    """Base class for assembler errors."""


class AsmSyntaxError(AsmError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: syntax error: {msg}")
        self.line = line


class MissingLabel(AsmError):
    def __init__(self, line: int):
        super().__init__(f"line {line}: indirect branch without CFI label in fine mode")
        self.line = line


class UnresolvedSymbol(AsmError):
    def __init__(self, name: str):
        super().__init__(f"unresolved symbol: {name}")
        self.name = name


class OverlapError(ValueError):
    pass


@dataclass(frozen=True)
class Mem:
    base: Optional[int]
    disp: int = 0


@dataclass(frozen=True)
class Instruction:
    kind: Kind
    rd: Optional[int] = None
    rs: Optional[int] = None
    rt: Optional[int] = None
    imm: Optional[int] = None
    mem: Optional[Mem] = None
    target: Optional[int] = None
    label: Optional[int] = None
    sym: Optional[str] = None
    postinc: int = 0

    def __post_init__(self):
        if self.label is not None:
            if self.kind not in LABELED_KINDS:
                raise ValueError(f"{self.kind.value} cannot carry a CFI label")
            if not 0 <= self.label <= LABEL_MAX:
                raise ValueError(f"label {self.label} outside 32-bit range")
        for r in (self.rd, self.rs, self.rt):
            if r is not None and not 0 <= r < NUM_REGS:
                raise ValueError(f"bad register index {r}")
        if self.mem is not None and self.mem.base is not None and not 0 <= self.mem.base < NUM_REGS:
            raise ValueError(f"bad register index {self.mem.base}")
        _check_arity(self)

    def sources(self) -> tuple[int, ...]:
        """Registers read (FLAGS included for conditional branches)."""
        k = self.kind
        regs: list[int] = []
        if k in (Kind.ADD, Kind.SHL):
            regs.append(self.rs)
            if self.rt is not None:
                regs.append(self.rt)
        elif k == Kind.CMP:
            regs += [self.rd, self.rs]
        elif k == Kind.CMP_IMM:
            regs.append(self.rd)
        elif k == Kind.STORE:
            regs.append(self.rs)
        elif k in COND_KINDS:
            regs.append(FLAGS)
        elif k in INDIRECT_KINDS:
            regs.append(self.rs)
        if k in (Kind.CALL_DIRECT, Kind.CALL_INDIRECT, Kind.RET):
            regs.append(SP)
        if self.mem is not None and self.mem.base is not None:
            regs.append(self.mem.base)
        return tuple(dict.fromkeys(regs))

    def dests(self) -> tuple[int, ...]:
        k = self.kind
        if k in (Kind.LOAD_IMM, Kind.ADD, Kind.SHL):
            return (self.rd,)
        if k == Kind.LOAD:
            return (self.rd, SP) if self.postinc else (self.rd,)
        if k in (Kind.CMP, Kind.CMP_IMM):
            return (FLAGS,)
        if k in (Kind.CALL_DIRECT, Kind.CALL_INDIRECT, Kind.RET):
            return (SP,)
        return ()

    @property
    def reads_memory(self) -> bool:
        return self.kind in (Kind.LOAD, Kind.RET)

    @property
    def writes_memory(self) -> bool:
        return self.kind in (Kind.STORE, Kind.CALL_DIRECT, Kind.CALL_INDIRECT)


def _check_arity(ins: Instruction) -> None:
    k = ins.kind
    need = {
        Kind.LOAD_IMM: ins.rd is not None and ins.imm is not None,
        Kind.LOAD: ins.rd is not None and ins.mem is not None,
        Kind.STORE: ins.rs is not None and ins.mem is not None,
        Kind.ADD: ins.rd is not None and ins.rs is not None and (ins.rt is None) != (ins.imm is None),
        Kind.SHL: ins.rd is not None and ins.rs is not None and (ins.rt is None) != (ins.imm is None),
        Kind.CMP: ins.rd is not None and ins.rs is not None,
        Kind.CMP_IMM: ins.rd is not None and ins.imm is not None,
        Kind.CLFLUSH: ins.mem is not None,
        Kind.JMP_INDIRECT: ins.rs is not None,
        Kind.CALL_INDIRECT: ins.rs is not None,
    }
    if k in DIRECT_KINDS and ins.target is None:
        raise ValueError(f"{k.value} needs a target")
    if not need.get(k, True):
        raise ValueError(f"bad operands for {k.value}")


@dataclass
class Program:
    instructions: list[Instruction]
    symbols: dict[str, int] = field(default_factory=dict)
    entry: int = 0
    functions: dict[str, Optional[str]] = field(default_factory=dict)  # address-taken -> signature
    jump_targets: set[str] = field(default_factory=set)

    def __post_init__(self):
        n = len(self.instructions)
        if n and not 0 <= self.entry < n:
            raise ValueError("entry outside program")
        for i, ins in enumerate(self.instructions):
            if ins.target is not None and not 0 <= ins.target < n:
                raise ValueError(f"instruction {i}: branch target {ins.target} outside program")

    def __len__(self) -> int:
        return len(self.instructions)

    def names_at(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {}
        for name, idx in self.symbols.items():
            out.setdefault(idx, []).append(name)
        return out


# --------------------------------------------------------------------------
# assembler

_REG = re.compile(r"^(?:r(\d+)|sp)$")
_LBL = re.compile(r"^L(\d+)$")
_MEM = re.compile(r"^\[\s*([^\]+\-]+?)?\s*(?:([+\-])\s*([^\]]+?))?\s*\]$")
_SYM = re.compile(r"^[A-Za-z_.$][\w.$]*$")


def _int(tok: str) -> Optional[int]:
    try:
        return int(tok, 0)
    except ValueError:
        return None


def _reg(tok: str, line: int) -> int:
    m = _REG.match(tok)
    if not m:
        raise AsmSyntaxError(line, f"expected register, got {tok!r}")
    r = SP if m.group(1) is None else int(m.group(1))
    if r >= NUM_REGS:
        raise AsmSyntaxError(line, f"register {tok} out of range")
    return r


def _is_reg(tok: str) -> bool:
    m = _REG.match(tok)
    return bool(m) and (m.group(1) is None or int(m.group(1)) < NUM_REGS)


def _label(tok: str, line: int) -> int:
    m = _LBL.match(tok)
    if not m:
        raise AsmSyntaxError(line, f"expected CFI label, got {tok!r}")
    v = int(m.group(1))
    if v > LABEL_MAX:
        raise AsmSyntaxError(line, "label exceeds 32 bits")
    return v


def _mem(tok: str, line: int) -> Mem:
    m = _MEM.match(tok.strip())
    if not m:
        raise AsmSyntaxError(line, f"bad memory operand {tok!r}")
    first, sign, rest = m.group(1), m.group(2), m.group(3)
    if first is None:
        raise AsmSyntaxError(line, f"bad memory operand {tok!r}")
    first = first.strip()
    if _is_reg(first):
        base, disp = _reg(first, line), 0
        if sign:
            d = _int(rest.strip())
            if d is None:
                raise AsmSyntaxError(line, f"bad displacement {rest!r}")
            disp = d if sign == "+" else -d
        return Mem(base, disp)
    v = _int(first)
    if v is None or sign:
        raise AsmSyntaxError(line, f"bad memory operand {tok!r}")
    return Mem(None, v)


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
    tail = "".join(cur).strip()
    if tail:
        out.append(tail)
    return out


@dataclass
class _Pending:
    ins: Instruction
    line: int
    target_tok: Optional[str] = None


def assemble(source: str, mode: str = "coarse") -> Program:
    """Assemble ``source`` into a :class:`Program`.

    In ``fine`` mode every indirect call/jmp must carry a CFI label; in
    ``coarse`` mode a missing label defaults to 0.
    """
    if mode not in ("coarse", "fine"):
        raise ValueError(f"unknown mode {mode!r}")
    pending: list[_Pending] = []
    symbols: dict[str, int] = {}
    functions: dict[str, Optional[str]] = {}
    jtargets: set[str] = set()
    for lineno, raw in enumerate(source.splitlines(), 1):
        text = raw.split(";", 1)[0].strip()
        while text:
            m = re.match(r"^([A-Za-z_.$][\w.$]*)\s*:(.*)$", text)
            if not m or m.group(1).startswith("."):
                break
            name = m.group(1)
            if name in symbols:
                raise AsmSyntaxError(lineno, f"duplicate symbol {name}")
            symbols[name] = len(pending)
            text = m.group(2).strip()
        if not text:
            continue
        parts = text.split(None, 1)
        mnem = parts[0].lower()
        ops = _split_operands(parts[1]) if len(parts) > 1 else []
        if mnem == ".org":
            if len(ops) != 1 or _int(ops[0]) is None:
                raise AsmSyntaxError(lineno, ".org needs one integer")
            org = _int(ops[0])
            if org < len(pending):
                raise AsmSyntaxError(lineno, f".org {org:#x} moves backwards")
            while len(pending) < org:
                pending.append(_Pending(Instruction(Kind.NOP), lineno))
            continue
        if mnem == ".func":
            ops = parts[1].replace(",", " ").split() if len(parts) > 1 else []
            if not 1 <= len(ops) <= 2:
                raise AsmSyntaxError(lineno, ".func name [signature]")
            functions[ops[0]] = ops[1] if len(ops) > 1 else None
            continue
        if mnem == ".jtarget":
            if len(ops) != 1:
                raise AsmSyntaxError(lineno, ".jtarget name")
            jtargets.add(ops[0])
            continue
        pending.append(_parse_instruction(mnem, ops, lineno, mode))
    # resolve
    for name in list(functions) + sorted(jtargets):
        if name not in symbols:
            raise UnresolvedSymbol(name)
    out: list[Instruction] = []
    for p in pending:
        ins = p.ins
        if p.target_tok is not None:
            ins = replace(ins, target=_resolve(p.target_tok, symbols, len(pending), p.line))
        elif ins.kind == Kind.LOAD_IMM and ins.sym is not None:
            if ins.sym not in symbols:
                raise UnresolvedSymbol(ins.sym)
            ins = replace(ins, imm=symbols[ins.sym])
        out.append(ins)
    entry = symbols.get("main", symbols.get("_start", 0))
    return Program(out, symbols, entry if out else 0, functions, jtargets)


def _resolve(tok: str, symbols: dict[str, int], n: int, line: int) -> int:
    v = _int(tok)
    if v is not None:
        if not 0 <= v < n:
            raise AsmSyntaxError(line, f"branch target {tok} outside program")
        return v
    if tok not in symbols:
        raise UnresolvedSymbol(tok)
    return symbols[tok]


def _parse_instruction(mnem: str, ops: list[str], line: int, mode: str) -> _Pending:
    def want(n: int) -> None:
        if len(ops) != n:
            raise AsmSyntaxError(line, f"{mnem} takes {n} operand(s), got {len(ops)}")

    def src_operand(tok: str) -> tuple[Optional[int], Optional[int]]:
        if _is_reg(tok):
            return _reg(tok, line), None
        v = _int(tok)
        if v is None:
            raise AsmSyntaxError(line, f"expected register or immediate, got {tok!r}")
        return None, v

    try:
        if mnem == "li":
            want(2)
            rd = _reg(ops[0], line)
            v = _int(ops[1])
            if v is not None:
                return _Pending(Instruction(Kind.LOAD_IMM, rd=rd, imm=v & MASK64), line)
            if not _SYM.match(ops[1]):
                raise AsmSyntaxError(line, f"bad immediate {ops[1]!r}")
            return _Pending(Instruction(Kind.LOAD_IMM, rd=rd, imm=0, sym=ops[1]), line)
        if mnem == "load":
            want(2)
            return _Pending(Instruction(Kind.LOAD, rd=_reg(ops[0], line), mem=_mem(ops[1], line)), line)
        if mnem == "pop":
            want(1)
            return _Pending(Instruction(Kind.LOAD, rd=_reg(ops[0], line), mem=Mem(SP, 0), postinc=WORD), line)
        if mnem == "store":
            want(2)
            return _Pending(Instruction(Kind.STORE, rs=_reg(ops[0], line), mem=_mem(ops[1], line)), line)
        if mnem in ("add", "addi", "shl"):
            kind = Kind.SHL if mnem == "shl" else Kind.ADD
            if len(ops) == 2:
                rd = _reg(ops[0], line)
                rs, rt_imm = rd, ops[1]
            elif len(ops) == 3:
                rd, rs, rt_imm = _reg(ops[0], line), _reg(ops[1], line), ops[2]
            else:
                raise AsmSyntaxError(line, f"{mnem} takes 2 or 3 operands")
            rt, imm = src_operand(rt_imm)
            if imm is not None:
                imm &= MASK64
            return _Pending(Instruction(kind, rd=rd, rs=rs, rt=rt, imm=imm), line)
        if mnem in ("cmp", "cmpi"):
            want(2)
            ra = _reg(ops[0], line)
            rb, imm = src_operand(ops[1])
            if rb is not None:
                return _Pending(Instruction(Kind.CMP, rd=ra, rs=rb), line)
            return _Pending(Instruction(Kind.CMP_IMM, rd=ra, imm=imm & MASK64), line)
        if mnem in ("jz", "jnz"):
            want(1)
            kind = Kind.JZ if mnem == "jz" else Kind.JNZ
            return _Pending(Instruction(kind, target=0), line, ops[0])
        if mnem in ("jmp", "call", "jmpi", "calli"):
            if not ops:
                raise AsmSyntaxError(line, f"{mnem} needs a target")
            is_call = mnem.startswith("call")
            if ops[0].startswith("*") or mnem.endswith("i"):
                reg_tok = ops[0].lstrip("*").strip()
                if len(ops) > 2:
                    raise AsmSyntaxError(line, "too many operands")
                label = _label(ops[1], line) if len(ops) == 2 else None
                if label is None:
                    if mode == "fine":
                        raise MissingLabel(line)
                    label = 0
                kind = Kind.CALL_INDIRECT if is_call else Kind.JMP_INDIRECT
                return _Pending(Instruction(kind, rs=_reg(reg_tok, line), label=label), line)
            want(1)
            kind = Kind.CALL_DIRECT if is_call else Kind.JMP_DIRECT
            return _Pending(Instruction(kind, target=0), line, ops[0])
        if mnem == "ret":
            want(0)
            return _Pending(Instruction(Kind.RET), line)
        if mnem == "cfi_lbl":
            if len(ops) > 1:
                raise AsmSyntaxError(line, "cfi_lbl takes at most one label")
            return _Pending(Instruction(Kind.CFI_LBL, label=_label(ops[0], line) if ops else 0), line)
        if mnem == "lfence":
            want(0)
            return _Pending(Instruction(Kind.FENCE_STRICT), line)
        if mnem in ("lfence.relaxed", "rfence"):
            want(0)
            return _Pending(Instruction(Kind.FENCE_RELAXED), line)
        if mnem == "clflush":
            want(1)
            return _Pending(Instruction(Kind.CLFLUSH, mem=_mem(ops[0], line)), line)
        if mnem == "nop":
            want(0)
            return _Pending(Instruction(Kind.NOP), line)
        if mnem == "halt":
            want(0)
            return _Pending(Instruction(Kind.HALT), line)
    except ValueError as exc:
        if isinstance(exc, AsmError):
            raise
        raise AsmSyntaxError(line, str(exc)) from exc
    raise AsmSyntaxError(line, f"unknown mnemonic {mnem!r}")


# --------------------------------------------------------------------------
# printing

def _fmt_mem(m: Mem) -> str:
    if m.base is None:
        return f"[{m.disp:#x}]"
    if m.disp == 0:
        return f"[r{m.base}]"
    sign = "+" if m.disp > 0 else "-"
    return f"[r{m.base}{sign}{abs(m.disp):#x}]"


def format_instruction(ins: Instruction, names: Optional[dict[int, list[str]]] = None) -> str:
    k = ins.kind

    def tgt(t: int) -> str:
        if names and t in names:
            return names[t][0]
        return f"{t:#x}"

    def src() -> str:
        return f"r{ins.rt}" if ins.rt is not None else f"{ins.imm:#x}"

    if k == Kind.LOAD_IMM:
        return f"li r{ins.rd}, {ins.sym if ins.sym else hex(ins.imm)}"
    if k == Kind.LOAD:
        if ins.postinc:
            return f"pop r{ins.rd}"
        return f"load r{ins.rd}, {_fmt_mem(ins.mem)}"
    if k == Kind.STORE:
        return f"store r{ins.rs}, {_fmt_mem(ins.mem)}"
    if k in (Kind.ADD, Kind.SHL):
        return f"{k.value} r{ins.rd}, r{ins.rs}, {src()}"
    if k == Kind.CMP:
        return f"cmp r{ins.rd}, r{ins.rs}"
    if k == Kind.CMP_IMM:
        return f"cmpi r{ins.rd}, {ins.imm:#x}"
    if k in (Kind.JZ, Kind.JNZ, Kind.JMP_DIRECT, Kind.CALL_DIRECT):
        return f"{k.value} {tgt(ins.target)}"
    if k == Kind.JMP_INDIRECT:
        return f"jmp *r{ins.rs}, L{ins.label}"
    if k == Kind.CALL_INDIRECT:
        return f"call *r{ins.rs}, L{ins.label}"
    if k == Kind.CFI_LBL:
        return f"cfi_lbl L{ins.label}"
    if k == Kind.CLFLUSH:
        return f"clflush {_fmt_mem(ins.mem)}"
    return k.value


def pretty_print(program: Program) -> str:
    """Render ``program`` as assembly that re-assembles to the same instructions."""
    names = program.names_at()
    lines = []
    for name, sig in program.functions.items():
        lines.append(f".func {name} {sig}" if sig else f".func {name}")
    for name in sorted(program.jump_targets):
        lines.append(f".jtarget {name}")
    for i, ins in enumerate(program.instructions):
        for name in sorted(names.get(i, ())):
            lines.append(f"{name}:")
        lines.append(f"    {format_instruction(ins, names)}")
    for name in sorted(n for n, idx in program.symbols.items() if idx >= len(program.instructions)):
        lines.append(f"{name}:")
    return "\n".join(lines) + "\n"


def format_canonical(program: Program) -> str:
    """Line-oriented canonical form: ``index kind operands [label]``."""
    out = []
    for i, ins in enumerate(program.instructions):
        ops = []
        for r in (ins.rd, ins.rs, ins.rt):
            if r is not None:
                ops.append(f"r{r}")
        if ins.imm is not None:
            ops.append(ins.sym if ins.sym else f"{ins.imm:#x}")
        if ins.mem is not None:
            ops.append(_fmt_mem(ins.mem) + (f"+{ins.postinc}" if ins.postinc else ""))
        if ins.target is not None:
            ops.append(f"{ins.target:#x}")
        line = f"{i:#06x} {ins.kind.name.lower()} {','.join(ops)}".rstrip()
        if ins.label is not None:
            line += f" L{ins.label}"
        out.append(line)
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# validation

@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    index: int
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.index:#x}: {self.message}"


def indirect_target_symbols(program: Program) -> dict[str, str]:
    """Address-taken symbols and their role (``call`` or ``jump``)."""
    roles: dict[str, str] = {name: "call" for name in program.functions}
    for name in program.jump_targets:
        roles.setdefault(name, "jump")
    ins = program.instructions
    for i, x in enumerate(ins):
        if x.kind not in INDIRECT_KINDS:
            continue
        sym = _reaching_symbol(program, i, x.rs)
        if sym is not None:
            roles.setdefault(sym, "call" if x.kind == Kind.CALL_INDIRECT else "jump")
    return roles


def _reaching_symbol(program: Program, site: int, reg: int) -> Optional[str]:
    """Symbol loaded into ``reg`` by the closest preceding ``li`` in straight-line code."""
    ins = program.instructions
    leaders = {x.target for x in ins if x.target is not None} | set(program.symbols.values())
    j = site - 1
    while j >= 0:
        x = ins[j]
        if reg in x.dests():
            return x.sym if x.kind == Kind.LOAD_IMM else None
        if x.kind in CONTROL_KINDS or j in leaders:
            return None
        j -= 1
    return None


def validate_cfi(program: Program, mode: str = "coarse") -> list[Diagnostic]:
    """Report address-taken targets lacking ``cfi_lbl`` and never-targeted labels."""
    diags: list[Diagnostic] = []
    roles = indirect_target_symbols(program)
    ins = program.instructions
    for name in sorted(roles, key=lambda n: program.symbols[n]):
        idx = program.symbols[name]
        if idx >= len(ins) or ins[idx].kind != Kind.CFI_LBL:
            diags.append(Diagnostic("error", idx, f"indirect target {name} does not start with cfi_lbl"))
    site_labels = {x.label for x in ins if x.kind in INDIRECT_KINDS}
    for i, x in enumerate(ins):
        if x.kind == Kind.CFI_LBL and x.label not in site_labels:
            diags.append(Diagnostic("warning", i, f"cfi_lbl L{x.label} never targeted by any indirect branch"))
    if mode == "fine":
        for i, x in enumerate(ins):
            if x.kind in INDIRECT_KINDS and x.label == 0:
                diags.append(Diagnostic("error", i, "indirect branch without label in fine mode"))
    return diags


# --------------------------------------------------------------------------
# images

@dataclass
class AddressSpaceImage:
    pid: int
    base: int
    program: Program
    data: np.ndarray
    data_base: int = DEFAULT_DATA_BASE
    secret_addr: Optional[int] = None

    @property
    def code(self) -> list[Instruction]:
        return self.program.instructions

    @property
    def data_end(self) -> int:
        return self.data_base + len(self.data)

    def addr_of(self, index: int) -> int:
        return self.base + index

    def index_of(self, addr: int) -> Optional[int]:
        i = addr - self.base
        return i if 0 <= i < len(self.program.instructions) else None

    def symbol_addr(self, name: str) -> int:
        return self.base + self.program.symbols[name]

    def fetch(self, addr: int) -> Optional[Instruction]:
        i = self.index_of(addr)
        return None if i is None else self.relocated[i]

    @property
    def relocated(self) -> list[Instruction]:
        rel = self.__dict__.get("_relocated")
        if rel is None:
            rel = [_relocate(x, self.base) for x in self.program.instructions]
            self.__dict__["_relocated"] = rel
        return rel

    def in_data(self, addr: int, size: int = 1) -> bool:
        return self.data_base <= addr and addr + size <= self.data_end

    def read_byte(self, addr: int) -> int:
        return int(self.data[addr - self.data_base])

    def read_word(self, addr: int) -> int:
        o = addr - self.data_base
        return int.from_bytes(self.data[o:o + WORD].tobytes(), "little")

    def write_word(self, addr: int, value: int) -> None:
        o = addr - self.data_base
        self.data[o:o + WORD] = np.frombuffer((value & MASK64).to_bytes(WORD, "little"), dtype=np.uint8)

    def stack_top(self) -> int:
        return self.data_end

    def copy(self) -> "AddressSpaceImage":
        return AddressSpaceImage(self.pid, self.base, self.program, self.data.copy(),
                                 self.data_base, self.secret_addr)


def _relocate(ins: Instruction, base: int) -> Instruction:
    if not base:
        return ins
    if ins.target is not None:
        ins = replace(ins, target=ins.target + base)
    if ins.kind == Kind.LOAD_IMM and ins.sym is not None:
        ins = replace(ins, imm=ins.imm + base)
    return ins


def load_image(program: Program, pid: int = 1, base: int = 0, data_size: int = 4096,
               secret: Optional[tuple[int, int]] = None,
               data_base: int = DEFAULT_DATA_BASE) -> AddressSpaceImage:
    """Lay ``program`` out from ``base`` and allocate a zeroed data region.

    ``secret`` is ``(offset, byte)`` with the offset relative to the data region.
    """
    if data_size < 1:
        raise ValueError("data_size must be >= 1")
    n = len(program.instructions)
    if base < data_base + data_size and data_base < base + n:
        raise OverlapError(f"code [{base:#x},{base + n:#x}) overlaps data [{data_base:#x},{data_base + data_size:#x})")
    data = np.zeros(data_size, dtype=np.uint8)
    secret_addr = None
    if secret is not None:
        off, byte = secret
        if not 0 <= off < data_size:
            raise ValueError("secret address outside data region")
        data[off] = byte & 0xFF
        secret_addr = data_base + off
    return AddressSpaceImage(pid, base, program, data, data_base, secret_addr)


def count_kinds(instructions: Iterable[Instruction], kinds: Iterable[Kind]) -> int:
    ks = set(kinds)
    return sum(1 for x in instructions if x.kind in ks)


reaching_symbol = _reaching_symbol
