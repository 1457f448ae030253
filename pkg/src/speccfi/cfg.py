"""Control-flow graph, CFI label assignment, instrumentation and gadget scanning."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels
from .isa import (CONTROL_KINDS, DIRECT_KINDS, INDIRECT_KINDS, SP, Instruction, Kind, Mem,
                  Program, indirect_target_symbols, reaching_symbol)

SCRATCH_REG = 14


class MissingSignature(ValueError):
    def __init__(self, function: str):
        super().__init__(f"fine policy needs a signature for {function}")
        self.function = function


@dataclass
class Cfg:
    program: Program
    blocks: list[tuple[int, int]]  # half-open instruction ranges
    edges: list[tuple[int, int, str]]  # (src block, dst block, kind)
    address_taken: set[int]
    roles: dict[int, str] = field(default_factory=dict)  # address-taken index -> call | jump

    def block_of(self, index: int) -> int:
        for b, (s, e) in enumerate(self.blocks):
            if s <= index < e:
                return b
        raise IndexError(index)

    def successors(self, block: int) -> list[tuple[int, str]]:
        return [(d, k) for s, d, k in self.edges if s == block]


def build_cfg(program: Program) -> Cfg:
    ins = program.instructions
    n = len(ins)
    roles_by_name = indirect_target_symbols(program)
    roles = {program.symbols[s]: r for s, r in roles_by_name.items()}
    if not n:
        return Cfg(program, [], [], set(), roles)
    leaders = {0, program.entry} | set(roles)
    for i, x in enumerate(ins):
        if x.target is not None:
            leaders.add(x.target)
        if x.kind in CONTROL_KINDS and i + 1 < n:
            leaders.add(i + 1)
    starts = sorted(s for s in leaders if s < n)
    blocks = [(s, e) for s, e in zip(starts, starts[1:] + [n])]
    start_to_block = {s: b for b, (s, _) in enumerate(blocks)}

    # return sites of direct calls per callee, for return edges
    ret_sites: dict[int, set[int]] = {}
    for i, x in enumerate(ins):
        if x.kind == Kind.CALL_DIRECT and i + 1 < n:
            ret_sites.setdefault(x.target, set()).add(i + 1)
        elif x.kind == Kind.CALL_INDIRECT and i + 1 < n:
            for t, r in roles.items():
                if r == "call":
                    ret_sites.setdefault(t, set()).add(i + 1)
    func_starts = sorted(ret_sites)

    edges: list[tuple[int, int, str]] = []
    for b, (s, e) in enumerate(blocks):
        last = ins[e - 1]
        k = last.kind
        if k in (Kind.JZ, Kind.JNZ):
            edges.append((b, start_to_block[last.target], "direct"))
            if e < n:
                edges.append((b, start_to_block[e], "fallthrough"))
        elif k == Kind.JMP_DIRECT:
            edges.append((b, start_to_block[last.target], "direct"))
        elif k == Kind.CALL_DIRECT:
            edges.append((b, start_to_block[last.target], "call"))
        elif k in INDIRECT_KINDS:
            want = "call" if k == Kind.CALL_INDIRECT else "jump"
            for t in sorted(roles):
                if roles[t] == want:
                    edges.append((b, start_to_block[t], "indirect-possible"))
        elif k == Kind.RET:
            # the enclosing function is the closest call target at or before the ret
            owner = max((f for f in func_starts if f <= e - 1), default=None)
            for site in sorted(ret_sites.get(owner, ())):
                edges.append((b, start_to_block[site], "return"))
        elif k != Kind.HALT and e < n:
            edges.append((b, start_to_block[e], "fallthrough"))
    return Cfg(program, blocks, edges, set(roles), roles)


@dataclass(frozen=True)
class LabelMap:
    target_labels: dict[int, int]
    site_labels: dict[int, int]
    policy: str

    def labels(self) -> set[int]:
        return set(self.target_labels.values())


def assign_labels(cfg: Cfg, policy: str = "coarse",
                  signatures: Optional[dict[str, Optional[str]]] = None) -> LabelMap:
    """Coarse: call targets get label 1, jump targets label 2.

    Fine: one dense label (from 1, in address order) per signature token.
    Jump targets without a declared signature share one class.
    """
    if policy not in ("coarse", "fine"):
        raise ValueError(f"unknown policy {policy!r}")
    prog = cfg.program
    sigs = dict(prog.functions)
    if signatures:
        sigs.update(signatures)
    names = prog.names_at()
    target_labels: dict[int, int] = {}
    if policy == "coarse":
        for t, role in cfg.roles.items():
            target_labels[t] = 1 if role == "call" else 2
    else:
        classes: dict[tuple[str, str], int] = {}
        for t in sorted(cfg.roles):
            role = cfg.roles[t]
            name = next((s for s in names.get(t, []) if s in sigs and sigs[s] is not None), None)
            if name is None:
                if role == "call":
                    raise MissingSignature(names.get(t, [hex(t)])[0])
                key = ("jump", "")
            else:
                key = ("sig", sigs[name])
            target_labels[t] = classes.setdefault(key, len(classes) + 1)

    site_labels: dict[int, int] = {}
    for i, x in enumerate(prog.instructions):
        if x.kind not in INDIRECT_KINDS:
            continue
        want = "call" if x.kind == Kind.CALL_INDIRECT else "jump"
        sym = reaching_symbol(prog, i, x.rs)
        if sym is not None and prog.symbols[sym] in target_labels:
            site_labels[i] = target_labels[prog.symbols[sym]]
            continue
        cands = {target_labels[t] for t, r in cfg.roles.items() if r == want}
        # an unresolved site can only be labeled if its role admits a single class
        site_labels[i] = cands.pop() if len(cands) == 1 else 0
    return LabelMap(target_labels, site_labels, policy)


def _rebuild(prog: Program, pieces: list[list[Instruction]], head: dict[int, int]) -> Program:
    """Concatenate per-instruction expansions, remapping targets through ``head``."""
    pos: list[int] = []
    flat: list[Instruction] = []
    for p in pieces:
        pos.append(len(flat))
        flat.extend(p)

    def new_index(old: int) -> int:
        return pos[old] + head.get(old, 0) if old < len(pos) else len(flat)

    out = []
    for x in flat:
        if x.target is not None and x.kind in DIRECT_KINDS:
            x = replace(x, target=new_index(x.target))
        elif x.kind == Kind.LOAD_IMM and x.sym is not None:
            x = replace(x, imm=new_index(prog.symbols[x.sym]))
        out.append(x)
    symbols = {k: new_index(v) for k, v in prog.symbols.items()}
    entry = new_index(prog.entry) if out else 0
    return Program(out, symbols, entry, dict(prog.functions), set(prog.jump_targets))


def instrument(program: Program, label_map: LabelMap) -> Program:
    """Place a ``cfi_lbl`` at every labeled target and label every indirect site.

    Existing ``cfi_lbl`` instructions at a target are relabeled rather than
    duplicated. Every reference to a target lands on its label.
    """
    pieces: list[list[Instruction]] = []
    for i, x in enumerate(program.instructions):
        if i in label_map.site_labels:
            x = replace(x, label=label_map.site_labels[i])
        lbl = label_map.target_labels.get(i)
        if lbl is None:
            pieces.append([x])
        elif x.kind == Kind.CFI_LBL:
            pieces.append([replace(x, label=lbl)])
        else:
            pieces.append([Instruction(Kind.CFI_LBL, label=lbl), x])
    # direct references re-resolve to the first instruction of the expansion (the label)
    return _rebuild(program, pieces, {})


def transform_retpoline(program: Program, fence_kind: str = "strict") -> Program:
    """Replace each indirect call/jmp and ret by a prepare-fence-transfer sequence.

    ``call *rN`` becomes ``add r14, rN, 0; fence; call *r14``; ``ret`` becomes
    ``pop r14; fence; jmp *r14``. r14 is reserved as the scratch register.
    """
    fk = {"strict": Kind.FENCE_STRICT, "relaxed": Kind.FENCE_RELAXED}[fence_kind]
    uses = [x for x in program.instructions
            if SCRATCH_REG in x.sources() or SCRATCH_REG in x.dests()]
    if uses:
        raise ValueError("retpoline transform reserves r14 but the program uses it")
    pieces: list[list[Instruction]] = []
    for x in program.instructions:
        if x.kind in INDIRECT_KINDS:
            pieces.append([Instruction(Kind.ADD, rd=SCRATCH_REG, rs=x.rs, imm=0),
                           Instruction(fk),
                           replace(x, rs=SCRATCH_REG, label=0)])
        elif x.kind == Kind.RET:
            pieces.append([Instruction(Kind.LOAD, rd=SCRATCH_REG, mem=Mem(SP, 0), postinc=8),
                           Instruction(fk),
                           Instruction(Kind.JMP_INDIRECT, rs=SCRATCH_REG, label=0)])
        else:
            pieces.append([x])
    return _rebuild(program, pieces, {})


# --------------------------------------------------------------------------
# gadget scanning

@dataclass(frozen=True)
class ScanConfig:
    window: int = 70
    max_cmp_to_jump_gap: int = 5

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.max_cmp_to_jump_gap < 0:
            raise ValueError("gap must be >= 0")


@dataclass(frozen=True)
class GadgetEntry:
    marker_index: int
    label: int
    offsets: tuple[int, ...]
    reachable_sites: int  # indirect sites whose label lets them land on this marker


@dataclass
class GadgetReport:
    policy: str
    config: ScanConfig
    entries: list[GadgetEntry]

    @property
    def raw_total(self) -> int:
        """Gadgets found behind markers, regardless of who can reach them."""
        return sum(len(e.offsets) for e in self.entries)

    @property
    def total(self) -> int:
        """(indirect site, gadget) pairs allowed by the label policy."""
        return sum(len(e.offsets) * e.reachable_sites for e in self.entries)

    def to_csv(self, base: int = 0) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["marker_addr", "label", "gadget_offset"])
        for e in self.entries:
            for o in e.offsets:
                w.writerow([hex(base + e.marker_index), e.label, o])
        return buf.getvalue()


_KIND_CODE = {Kind.CMP: 1, Kind.CMP_IMM: 1, Kind.JZ: 2, Kind.JNZ: 2}


def kind_codes(program: Program) -> np.ndarray:
    """1 for compares, 2 for conditional jumps, 0 otherwise."""
    return np.array([_KIND_CODE.get(x.kind, 0) for x in program.instructions], dtype=np.int8)


def scan_smother_gadgets(program: Program, label_map: LabelMap,
                         config: ScanConfig = ScanConfig()) -> GadgetReport:
    """Find compare-then-branch pairs in the window after every target marker.

    Markers are ``cfi_lbl`` instructions; a program without any falls back to
    the label map's targets (the gadget window then starts at the target
    itself). Offsets count from the first instruction after the marker.
    """
    ins = program.instructions
    markers = [i for i, x in enumerate(ins) if x.kind == Kind.CFI_LBL]
    if markers:
        mlabels = [ins[i].label for i in markers]
        starts = [i + 1 for i in markers]
    else:
        markers = sorted(label_map.target_labels)
        mlabels = [label_map.target_labels[i] for i in markers]
        starts = markers
    site_count: dict[int, int] = {}
    for x in ins:
        if x.kind in INDIRECT_KINDS:
            site_count[x.label] = site_count.get(x.label, 0) + 1
    if not ins or not markers:
        return GadgetReport(label_map.policy, config, [])
    codes = kind_codes(program)
    found = _kernels.scan_windows(codes, np.array(starts, dtype=np.int64),
                                  config.window, config.max_cmp_to_jump_gap)
    entries = [GadgetEntry(m, lbl, tuple(int(o) for o in offs), site_count.get(lbl, 0))
               for m, lbl, offs in zip(markers, mlabels, found)]
    return GadgetReport(label_map.policy, config, entries)


# --------------------------------------------------------------------------
# synthetic corpus

def generate_corpus(n_functions: int = 200, n_signatures: int = 4, seed: int = 0,
                    body_len: tuple[int, int] = (20, 90)) -> str:
    """Assembly source for a runnable program of address-taken functions.

    Every function is declared with one of ``n_signatures`` signature tokens
    and called once through an indirect call from ``main``. Bodies are random
    straight-line arithmetic sprinkled with forward compare/branch pairs, so
    the gadget density varies between functions.
    """
    rng = np.random.default_rng(seed)
    lines = ["main:"]
    sig_of = [f"sig{i % n_signatures}" for i in range(n_functions)]
    rng.shuffle(sig_of)
    for f in range(n_functions):
        lines += [f"    li r1, f{f}", "    call *r1"]
    lines.append("    halt")
    for f in range(n_functions):
        lines.append(f".func f{f} {sig_of[f]}")
        lines.append(f"f{f}:")
        n = int(rng.integers(*body_len))
        density = float(rng.uniform(0.0, 0.15))
        k = 0
        while k < n:
            if rng.random() < density and k + 3 < n:
                skip = int(rng.integers(0, 3))
                lines.append(f"    cmpi r{int(rng.integers(2, 8))}, {int(rng.integers(0, 4))}")
                for _ in range(int(rng.integers(0, 7))):
                    lines.append(f"    add r{int(rng.integers(2, 8))}, r{int(rng.integers(2, 8))}")
                    k += 1
                lines.append(f"    jz f{f}_s{k}")
                for _ in range(skip):
                    lines.append(f"    add r{int(rng.integers(2, 8))}, 1")
                lines.append(f"f{f}_s{k}:")
                k += 2 + skip
            else:
                lines.append(f"    add r{int(rng.integers(2, 8))}, r{int(rng.integers(2, 8))}")
                k += 1
        lines.append("    ret")
    return "\n".join(lines) + "\n"
