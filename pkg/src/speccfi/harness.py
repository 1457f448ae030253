"""Experiment runners: recovery checks, benchmarks and performance tables."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import interp
from .cfg import assign_labels, build_cfg, instrument, transform_retpoline
from .core import Core, Defense, FenceKind, Phase, PipelineConfig, RunStats, Task
from .isa import INDIRECT_KINDS, Kind, Program, load_image
from .isa import assemble
from .programs import BENCHMARKS, benchmark, random_program, return_stack_walkthrough_source

BENCH_DATA_SIZE = 8192


def prepare(program: Program, defense: Defense, fence_kind: FenceKind = FenceKind.STRICT,
            policy: str = "fine") -> Program:
    """The program variant a defense runs: retpoline-transformed, or CFI-instrumented."""
    if defense is Defense.RETPOLINE_SW:
        return transform_retpoline(program, fence_kind.value)
    cfg = build_cfg(program)
    if not cfg.address_taken:
        return program
    return instrument(program, assign_labels(cfg, policy))


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------
# recovery soundness

@dataclass
class RecoveryReport:
    recoveries: int = 0
    wrong_path: int = 0
    failures: list[str] = field(default_factory=list)
    final_ok: bool = True

    @property
    def ok(self) -> bool:
        return self.final_ok and not self.failures


def check_recovery(program: Program, defense: Defense = Defense.SPECCFI_BASE,
                   mispredict_rate: float = 0.2, seed: int = 0) -> RecoveryReport:
    """Compare the core against the interpreter at every misprediction recovery.

    At each recovery the committed registers must equal the interpreter's
    after the same number of steps, the redirect target must be the
    interpreter's next pc after the mispredicted instruction, and (with the
    RSB/SCS) the surviving speculative return stack must equal the
    interpreter's call stack at that point.
    """
    img = load_image(program, data_size=BENCH_DATA_SIZE)
    ref, log = interp.run(img, trace=True)
    init = interp.initial_state(img.copy())
    rep = RecoveryReport()
    core = Core(PipelineConfig(defense=defense, mispredict_rate=mispredict_rate, seed=seed))

    def hook(event, c, t, e):
        if event != "recover":
            return
        # only recoveries on the correct path have an interpreter counterpart; a
        # younger branch may resolve while an older one is still mispredicted
        n = t.committed
        for x in t.rob:
            if x.injected:
                continue
            want = log[n - 1][0] if n else init.pc
            if n >= len(log) or x.pc != want:
                rep.wrong_path += 1
                return
            if x is e:
                break
            n += 1
        rep.recoveries += 1
        committed_regs = list(log[t.committed - 1][1]) if t.committed else init.regs
        if t.regs != committed_regs:
            rep.failures.append(f"recovery {rep.recoveries}: committed registers differ")
        if e.actual_next != log[n][0]:
            rep.failures.append(f"recovery {rep.recoveries}: redirect {e.actual_next:#x} "
                                f"!= {log[n][0]:#x}")
        if defense.rsbscs and t.rsbscs.full_stack() != list(log[n][2]):
            rep.failures.append(f"recovery {rep.recoveries}: return stack differs")

    core.hooks.append(hook)
    run_img = img.copy()
    core.run([Phase({0: Task(run_img)})])
    t = core.threads[0]
    rep.final_ok = t.regs[:16] == ref.regs[:16] and bytes(run_img.data) == bytes(ref.image.data)
    if not rep.final_ok:
        rep.failures.append("final architectural state differs")
    return rep


def recovery_campaign(n_programs: int = 1000, seed: int = 0, mispredict_rate: float = 0.2,
                      defenses: Iterable[Defense] = (Defense.SPECCFI_BASE,)) -> tuple[int, int, list[str]]:
    """(programs checked, programs passing, failure messages)."""
    passed = 0
    failures: list[str] = []
    total = 0
    for i in range(n_programs):
        prog = random_program(seed + i)
        for j, d in enumerate(defenses):
            total += 1
            rep = check_recovery(prepare(prog, d), d, mispredict_rate, seed + i * 7 + j)
            if rep.ok:
                passed += 1
            else:
                failures += [f"program {seed + i} {d.value}: {m}" for m in rep.failures]
    return total, passed, failures


# --------------------------------------------------------------------------
# return stack walkthrough

def return_stack_golden(defense: Defense = Defense.SPECCFI_BASE) -> dict[str, list[str]]:
    """RSB/SCS snapshots of the nested-call walkthrough.

    ``after_commit`` is taken when the call at 0x24 commits and
    ``after_recovery`` right after the forced ``jz`` misprediction is undone.
    """
    prog = assemble(return_stack_walkthrough_source())
    img = load_image(prog, data_size=256)
    jz = img.symbol_addr("function3")
    core = Core(PipelineConfig(defense=defense, force_mispredict_pcs=frozenset({jz})))
    out: dict[str, list[str]] = {}

    def hook(event, c, t, e):
        if event == "commit" and e.pc == img.symbol_addr("function1") and "after_commit" not in out:
            out["after_commit"] = t.rsbscs.snapshot()
        elif event == "recover" and e.pc == jz and "after_recovery" not in out:
            out["after_recovery"] = t.rsbscs.snapshot()

    core.hooks.append(hook)
    core.run([Phase({0: Task(img)})])
    return out


# --------------------------------------------------------------------------
# benchmarks

@dataclass
class BenchResult:
    benchmark: str
    defense: Defense
    fence_kind: FenceKind
    stats: RunStats
    normalized_ipc: float = 1.0

    @property
    def fences(self) -> int:
        """Fences retired on the committed path (hardware-injected or from the program)."""
        return self.stats.fences_committed

    def row(self) -> dict:
        s = self.stats
        return {"benchmark": self.benchmark, "defense": self.defense.value,
                "fence_kind": self.fence_kind.value, "cycles": s.cycles,
                "committed": s.committed_instructions, "ipc": f"{s.ipc:.6f}",
                "normalized_ipc": f"{self.normalized_ipc:.6f}",
                "fences_inserted": s.fences_inserted, "fences_executed": s.fences_executed,
                "fences_committed": s.fences_committed,
                "cfi_label_mismatches": s.cfi_label_mismatches,
                "mispredict_pht": s.mispredict_pht, "mispredict_btb": s.mispredict_btb,
                "mispredict_rsb": s.mispredict_rsb, "cache_misses": s.cache_misses}


def run_program(program: Program, config: PipelineConfig, warm: bool = True) -> RunStats:
    """Run ``program`` to halt; with ``warm`` a first pass trains predictors and cache."""
    core = Core(config)
    img = load_image(program, data_size=BENCH_DATA_SIZE)
    if warm:
        core.run([Phase({0: Task(img.copy(), entry=img.addr_of(program.entry))})])
        core.stats = RunStats()
    return core.run([Phase({0: Task(img.copy(), entry=img.addr_of(program.entry))})])


def run_bench(program: Program, defense: Defense, fence_kind: FenceKind = FenceKind.STRICT,
              name: str = "program", warm: bool = True, seed: int = 0,
              baseline: Optional[RunStats] = None) -> BenchResult:
    cfg = PipelineConfig(defense=defense, fence_kind=fence_kind, seed=seed)
    stats = run_program(prepare(program, defense, fence_kind), cfg, warm)
    if baseline is None:
        base_prog = prepare(program, Defense.BASELINE)
        baseline = stats if defense is Defense.BASELINE else \
            run_program(base_prog, PipelineConfig(seed=seed), warm)
    # IPC counted in baseline-program instructions, so rewritten programs that
    # retire extra instructions are not credited for them
    norm = baseline.cycles / stats.cycles if stats.cycles else 0.0
    return BenchResult(name, defense, fence_kind, stats, norm)


FENCING = (Defense.RETPOLINE_SW, Defense.ALL_TARGET_FENCE, Defense.SPECCFI_BASE)


def perf_table(programs: Optional[Iterable[str]] = None,
               defenses: Iterable[Defense] = (Defense.BASELINE,) + FENCING,
               fence_kinds: Iterable[FenceKind] = (FenceKind.STRICT, FenceKind.RELAXED),
               seed: int = 0) -> list[BenchResult]:
    out: list[BenchResult] = []
    for name in programs or BENCHMARKS:
        prog = benchmark(name)
        base = run_bench(prog, Defense.BASELINE, name=name, seed=seed)
        for d in defenses:
            if d is Defense.BASELINE:
                out.append(base)
                continue
            for fk in fence_kinds:
                out.append(run_bench(prog, d, fk, name=name, seed=seed, baseline=base.stats))
    return out


def perf_csv(results: list[BenchResult]) -> str:
    return _csv([r.row() for r in results])


def has_indirect(program: Program) -> bool:
    return any(x.kind in INDIRECT_KINDS or x.kind == Kind.RET for x in program.instructions)
