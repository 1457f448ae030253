"""Proof-of-concept attack scenarios and the security matrix.

Each scenario is a pair of small programs (victim and, for the cross-address
space variants, an attacker process) written directly in instrumented form,
the way a CFI-aware compiler would emit them; legacy cores treat ``cfi_lbl``
as a no-op. A trial trains a predictor, triggers the victim and reads the
secret back through the cache (flush+reload over a 256-line probe array) or
through SMT port contention.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .core import CfiViolation, Core, Defense, FenceKind, Phase, PipelineConfig, Task
from .isa import MASK64, AddressSpaceImage, assemble, load_image
from .memory import probe
from .predictors import Btb

VICTIM, ATTACKER, SPY = 1, 2, 3
DATA_BASE = 0x10000
DATA_SIZE = 0x6000
FPTR = DATA_BASE + 0x100
BENIGN = DATA_BASE + 0x200  # a zero byte the training runs read instead of the secret
SECRET_OFF = 0x800
SECRET = DATA_BASE + SECRET_OFF
PROBE = DATA_BASE + 0x1000
LINE = 64

SITE = 0x10
GADGET = 0x25
ALIAS_SITE = Btb().alias_of(SITE)
RSB_GADGET = 0x80
HEAVY = 24  # port-0 micro-ops on the contention gadget's heavy path
THRESHOLD = 0.9


class ScenarioInvalid(ValueError):
    pass


class AttackKind(enum.Enum):
    SPECTRE_BTB = "spectre-btb"
    SPECTRE_RSB = "spectre-rsb"
    SMOTHER = "smother"


class Placement(enum.Enum):
    IN_PLACE = "in-place"
    OUT_OF_PLACE = "out-of-place"


@dataclass(frozen=True)
class Scenario:
    kind: AttackKind
    cross: bool
    placement: Placement

    def __post_init__(self):
        if self.kind is AttackKind.SPECTRE_RSB:
            ok = (not self.cross and self.placement is Placement.IN_PLACE) or \
                 (self.cross and self.placement is Placement.OUT_OF_PLACE)
            if not ok:
                raise ScenarioInvalid(f"{self.name}: no return-stack attack of this shape")

    @property
    def name(self) -> str:
        return f"{self.kind.value}-{'cross' if self.cross else 'same'}-{self.placement.value}"

    @property
    def channel(self) -> str:
        return "port" if self.kind is AttackKind.SMOTHER else "cache"

    @classmethod
    def parse(cls, name: str, placement: Optional[str] = None) -> "Scenario":
        """``spectre-btb-cross`` or ``spectre-btb-cross-out-of-place`` style names."""
        for p in Placement:
            if name.endswith("-" + p.value):
                if placement is not None and placement != p.value:
                    raise ScenarioInvalid(f"conflicting placement for {name}")
                name, placement = name[:-len(p.value) - 1], p.value
        for k in AttackKind:
            for scope in ("same", "cross"):
                if name == f"{k.value}-{scope}":
                    if placement is None:
                        placement = "out-of-place" if (k is AttackKind.SPECTRE_RSB and scope == "cross") \
                            else "in-place"
                    return cls(k, scope == "cross", Placement(placement))
        raise ScenarioInvalid(f"unknown scenario {name!r}")


def table_cells() -> list[Optional[Scenario]]:
    """Row-major cells of the matrix; ``None`` marks combinations that do not exist."""
    out: list[Optional[Scenario]] = []
    for k in AttackKind:
        for cross in (False, True):
            for p in Placement:
                try:
                    out.append(Scenario(k, cross, p))
                except ScenarioInvalid:
                    out.append(None)
    return out


def all_scenarios() -> list[Scenario]:
    return [s for s in table_cells() if s is not None]


@dataclass
class AttackResult:
    scenario: Scenario
    defense: Defense
    fence_kind: FenceKind
    ground_truth: list[int]
    recovered: list[Optional[int]]
    violations: int = 0  # trials stopped by a committed-path CFI violation

    @property
    def trials(self) -> int:
        return len(self.ground_truth)

    @property
    def hits(self) -> int:
        return sum(r == g for r, g in zip(self.recovered, self.ground_truth))

    @property
    def success(self) -> bool:
        return self.hits >= THRESHOLD * self.trials

    @property
    def blocked(self) -> bool:
        return self.hits == 0

    @property
    def channel(self) -> str:
        return self.scenario.channel

    @property
    def outcome(self) -> str:
        return "leaked" if self.success else "blocked" if self.blocked else "partial"

    def row(self) -> dict:
        return {"scenario": self.scenario.name, "defense": self.defense.value,
                "fence_kind": self.fence_kind.value, "trials": self.trials, "hits": self.hits,
                "violations": self.violations, "outcome": self.outcome, "channel": self.channel}


# --------------------------------------------------------------------------
# programs

def btb_victim_source(smother: bool = False) -> str:
    if smother:
        gadget = """
.func gadget sig_other
gadget:
    cfi_lbl L2
    add r2, r2, r6
    shl r2, r2, r7
    cmpi r2, 0
    jz heavy
    ret
heavy:
""" + "".join("    cmp r10, r11\n" for _ in range(HEAVY)) + "    ret\n"
    else:
        gadget = """
gadget:
    load r2, [r3]
    shl r2, r2, 6
    add r2, r2, r8
    load r4, [r2]
    ret
"""
    return f"""
main:
    load r2, [r3]
    load r1, [r9]
    jmp site
.org {SITE:#x}
site:
    call *r1, L1
    halt
.org 0x20
.func legit sig_legit
legit:
    cfi_lbl L1
    add r5, r5, 1
    ret
.org {GADGET:#x}
{gadget}
.org {ALIAS_SITE:#x}
alias_site:
    call *r1, L1
    halt
"""


def btb_attacker_source(label: int = 1) -> str:
    return f"""
main:
    jmp site
.org {SITE:#x}
site:
    call *r1, L{label}
    halt
.org {GADGET:#x}
.func landing sig_landing
landing:
    cfi_lbl L{label}
    ret
.org {ALIAS_SITE:#x}
alias_site:
    call *r1, L{label}
    halt
"""


def rsb_same_source(depth: int = 17) -> str:
    """A call chain one deeper than the return stack.

    ``f{depth-2}`` runs the disclosure code at the return site of its call to
    the leaf, then loads the secret into r2. ``f0`` evicts its own return
    slot, so its return resolves slowly while the overflowed stack predicts
    that return site.
    """
    lines = ["main:", "    li r2, 0", "    call f0", "    halt"]
    for i in range(depth - 1):
        lines.append(f"f{i}:")
        lines.append(f"    call f{i + 1}")
        if i == depth - 2:
            lines += ["    shl r4, r2, 6", "    add r4, r4, r8", "    load r5, [r4]",
                      "    clflush [r8]", "    load r2, [r3]"]
        if i == 0:
            lines.append("    clflush [sp]")
        lines.append("    ret")
    lines += [f"f{depth - 1}:", "    ret"]
    return "\n".join(lines) + "\n"


def rsb_cross_victim_source() -> str:
    return f"""
main:
    load r2, [r3]
    call f
    halt
f:
    halt
    ret
.org {RSB_GADGET:#x}
gadget:
    shl r4, r2, 6
    add r4, r4, r8
    load r5, [r4]
    halt
"""


def rsb_cross_attacker_source(pushes: int = 20) -> str:
    # every call is made from the instruction before the victim's gadget
    # address and never returns, filling the return stack with that address
    return f"""
main:
    li r1, {pushes}
    jmp site
.org {RSB_GADGET - 1:#x}
site:
    call body
body:
    add r1, r1, -1
    cmpi r1, 0
    jnz site
    halt
"""


SPY_SOURCE = "main:\n" + "".join("    cmp r1, r2\n" for _ in range(12)) + "    jmp main\n"


# --------------------------------------------------------------------------
# trials

def _victim_regs(secret_side: bool, extra: Optional[dict[int, int]] = None) -> dict[int, int]:
    regs = {3: SECRET if secret_side else BENIGN, 8: PROBE, 9: FPTR}
    regs.update(extra or {})
    return regs


def _flush_probe(core: Core, img: AddressSpaceImage) -> None:
    for i in range(256):
        core.cache.clflush(core.phys(img, PROBE + i * LINE))


def _read_probe(core: Core, img: AddressSpaceImage) -> Optional[int]:
    res = probe(core.cache, [core.phys(img, PROBE + i * LINE) for i in range(256)])
    hits = [i for i in res.hit_indices() if i != 0]  # line 0 is the benign training value
    return hits[0] if len(hits) == 1 else None


class _Trial:
    def __init__(self, scenario: Scenario, defense: Defense, fence_kind: FenceKind, seed: int,
                 trace: bool = False, attacker_label: int = 1):
        self.scn = scenario
        self.core = Core(PipelineConfig(defense=defense, fence_kind=fence_kind, seed=seed, trace=trace))
        self.attacker_label = attacker_label

    def btb_training(self, victim: AddressSpaceImage, rounds: int = 2,
                     regs: Optional[dict[int, int]] = None) -> list[Phase]:
        """Phases that point the shared BTB entry of the victim's call site at the gadget."""
        entry = "site" if self.scn.placement is Placement.IN_PLACE else "alias_site"
        if self.scn.cross:
            att = load_image(assemble(btb_attacker_source(self.attacker_label)), pid=ATTACKER,
                             data_size=DATA_SIZE, data_base=DATA_BASE)
            task = Task(att, entry=entry, regs={1: GADGET})
        else:
            # same address space: the attacker drives the victim's own code with a
            # poisoned pointer and benign data, so the gadget runs harmlessly
            task = Task(victim, entry=entry, regs=_victim_regs(False, {1: GADGET, **(regs or {})}))
        return [Phase({0: task}) for _ in range(rounds)]

    def trigger_prep(self, victim: AddressSpaceImage):
        def prep(core: Core) -> None:
            victim.write_word(FPTR, victim.symbol_addr("legit"))
            core.cache.clflush(core.phys(victim, FPTR))
            _flush_probe(core, victim)
            core.cache.access(core.phys(victim, SECRET))  # the victim works with its secret
        return prep


def _btb_cache_trial(scn, defense, fence_kind, secret, seed, trace=False, attacker_label=1,
                     core_out: Optional[list] = None) -> Optional[int]:
    tr = _Trial(scn, defense, fence_kind, seed, trace, attacker_label)
    victim = load_image(assemble(btb_victim_source()), pid=VICTIM, data_size=DATA_SIZE,
                        secret=(SECRET_OFF, secret), data_base=DATA_BASE)
    phases = tr.btb_training(victim)
    phases.append(Phase({0: Task(victim, entry="main", regs=_victim_regs(True))},
                        before=tr.trigger_prep(victim)))
    if core_out is not None:
        core_out.append(tr.core)
    tr.core.run(phases)
    return _read_probe(tr.core, victim)


def _rsb_trial(scn, defense, fence_kind, secret, seed, trace=False) -> Optional[int]:
    core = Core(PipelineConfig(defense=defense, fence_kind=fence_kind, seed=seed, trace=trace))
    if not scn.cross:
        victim = load_image(assemble(rsb_same_source()), pid=VICTIM, data_size=DATA_SIZE,
                            secret=(SECRET_OFF, secret), data_base=DATA_BASE)
        core.run([Phase({0: Task(victim, entry="main", regs=_victim_regs(True))},
                        before=lambda c: _flush_probe(c, victim))])
        return _read_probe(core, victim)
    victim = load_image(assemble(rsb_cross_victim_source()), pid=VICTIM, data_size=DATA_SIZE,
                        secret=(SECRET_OFF, secret), data_base=DATA_BASE)
    att = load_image(assemble(rsb_cross_attacker_source()), pid=ATTACKER, data_size=DATA_SIZE,
                     data_base=DATA_BASE)

    def evict(c: Core) -> None:
        # the victim's return slot is cold after the attacker ran
        sp = c.contexts[VICTIM][0][15]
        c.cache.clflush(c.phys(victim, sp))
        _flush_probe(c, victim)

    core.run([
        Phase({0: Task(victim, entry="main", regs=_victim_regs(True))}),  # runs until f yields
        Phase({0: Task(att, entry="main")}),
        Phase({0: Task(victim)}, before=evict),  # resume at f's return
    ])
    return _read_probe(core, victim)


def _smother_contention(scn, defense, fence_kind, secret, seed, train: bool,
                        low_bits: int, bit: int) -> int:
    tr = _Trial(scn, defense, fence_kind, seed)
    victim = load_image(assemble(btb_victim_source(smother=True)), pid=VICTIM, data_size=DATA_SIZE,
                        secret=(SECRET_OFF, secret), data_base=DATA_BASE)
    spy = load_image(assemble(SPY_SOURCE), pid=SPY, data_size=256, data_base=DATA_BASE)
    # benign training inputs steer the gadget's branch away from the heavy path
    phases = tr.btb_training(victim, regs={6: 1 << bit, 7: 63 - bit}) if train else []
    regs = _victim_regs(True, {6: (-low_bits) & MASK64, 7: 63 - bit})
    mark: list[int] = []
    prep = tr.trigger_prep(victim)

    def before(core: Core) -> None:
        prep(core)
        mark.append(len(core.ports.contention.get(1, [])))

    phases.append(Phase({0: Task(victim, entry="main", regs=regs), 1: Task(spy, entry="main")},
                        primary=0, before=before))
    tr.core.run(phases)
    return int(sum(tr.core.ports.contention.get(1, [])[mark[0]:]))


def _smother_trial(scn, defense, fence_kind, secret, seed) -> Optional[int]:
    """Recover the secret bit by bit, least significant first."""
    calib = _smother_contention(scn, defense, fence_kind, secret, seed, False, 0, 0)
    known = 0
    for bit in range(8):
        c = _smother_contention(scn, defense, fence_kind, secret, seed, True, known, bit)
        # the heavy path runs when the tested bit is clear
        if c - calib < HEAVY // 2:
            known |= 1 << bit
    return known


def run_attack(scenario: Scenario, defense: Defense, fence_kind: FenceKind = FenceKind.STRICT,
               trials: int = 10, seed: int = 0) -> AttackResult:
    rng = np.random.default_rng(seed)
    secrets = [int(x) for x in rng.integers(1, 255, size=trials)]
    recovered: list[Optional[int]] = []
    violations = 0
    for i, s in enumerate(secrets):
        tseed = seed * 1000 + i
        try:
            if scenario.kind is AttackKind.SPECTRE_BTB:
                r = _btb_cache_trial(scenario, defense, fence_kind, s, tseed)
            elif scenario.kind is AttackKind.SPECTRE_RSB:
                r = _rsb_trial(scenario, defense, fence_kind, s, tseed)
            else:
                r = _smother_trial(scenario, defense, fence_kind, s, tseed)
        except CfiViolation:
            violations += 1
            r = None
        recovered.append(r)
    return AttackResult(scenario, defense, fence_kind, secrets, recovered, violations)


# --------------------------------------------------------------------------
# the matrix

MATRIX_DEFENSES = (Defense.BASELINE, Defense.SPECCFI_BASE, Defense.SPECCFI_FULL)


@dataclass
class SecurityMatrix:
    results: dict[tuple[str, str], AttackResult] = field(default_factory=dict)
    defenses: tuple = MATRIX_DEFENSES

    def cell(self, scenario: Scenario, defense: Defense) -> AttackResult:
        return self.results[(scenario.name, defense.value)]

    def to_csv(self) -> str:
        rows = ["scenario,defense,fence_kind,trials,hits,violations,outcome,channel"]
        for r in self.results.values():
            d = r.row()
            rows.append(",".join(str(d[k]) for k in ("scenario", "defense", "fence_kind", "trials",
                                                     "hits", "violations", "outcome", "channel")))
        return "\n".join(rows) + "\n"

    def outcomes(self) -> dict[tuple[str, str], str]:
        return {k: r.outcome for k, r in self.results.items()}

    def render(self) -> str:
        return render_matrix(self.outcomes(), [d.value for d in self.defenses])


def render_matrix(outcomes: dict[tuple[str, str], str], defenses: Iterable[str]) -> str:
    """Aligned text grid: one block per defense, attacks as rows, scopes as columns."""
    cols = [("same", Placement.IN_PLACE), ("same", Placement.OUT_OF_PLACE),
            ("cross", Placement.IN_PLACE), ("cross", Placement.OUT_OF_PLACE)]
    head = ["attack"] + [f"{s}/{p.value}" for s, p in cols]
    lines = []
    for d in defenses:
        lines.append(f"[{d}]")
        grid = [head]
        for k in AttackKind:
            row = [k.value]
            for scope, p in cols:
                try:
                    scn = Scenario(k, scope == "cross", p)
                except ScenarioInvalid:
                    row.append("n/a")
                    continue
                row.append(outcomes.get((scn.name, d), "-"))
            grid.append(row)
        widths = [max(len(r[i]) for r in grid) for i in range(len(head))]
        lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in grid]
        lines.append("")
    return "\n".join(lines)


def security_matrix(defenses: Iterable[Defense] = MATRIX_DEFENSES,
                    scenarios: Optional[Iterable[Scenario]] = None, trials: int = 10, seed: int = 0,
                    fence_kind: FenceKind = FenceKind.STRICT) -> SecurityMatrix:
    defenses = tuple(defenses)
    m = SecurityMatrix(defenses=defenses)
    for scn in scenarios or all_scenarios():
        for d in defenses:
            m.results[(scn.name, d.value)] = run_attack(scn, d, fence_kind, trials, seed)
    return m


# --------------------------------------------------------------------------
# committed-path return hijack

def corrupted_return_source() -> str:
    """``vuln`` overwrites its own return address (think stack overflow) and returns."""
    return """
main:
    call vuln
    halt
vuln:
    li r1, gadget
    store r1, [sp]
    ret
gadget:
    load r2, [r3]
    shl r2, r2, 6
    add r2, r2, r8
    load r4, [r2]
    halt
"""


@dataclass
class HijackResult:
    defense: Defense
    violation_pc: Optional[int]
    recovered: Optional[int]
    completed: bool


def run_corrupted_return(defense: Defense, secret: int = 0x5A, seed: int = 0) -> HijackResult:
    prog = assemble(corrupted_return_source())
    img = load_image(prog, pid=VICTIM, data_size=DATA_SIZE, secret=(SECRET_OFF, secret),
                     data_base=DATA_BASE)
    core = Core(PipelineConfig(defense=defense, seed=seed))
    try:
        core.run([Phase({0: Task(img, regs=_victim_regs(True))}, before=lambda c: _flush_probe(c, img))])
    except CfiViolation as exc:
        return HijackResult(defense, exc.pc, _read_probe(core, img), False)
    return HijackResult(defense, None, _read_probe(core, img), True)
