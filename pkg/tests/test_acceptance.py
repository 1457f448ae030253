"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import time

import pytest

from speccfi import interp
from speccfi.attacks import (
    MATRIX_DEFENSES, Scenario, _btb_cache_trial, all_scenarios, run_corrupted_return, security_matrix,
    corrupted_return_source,
)
from speccfi.cfg import assign_labels, build_cfg, generate_corpus, instrument, scan_smother_gadgets
from speccfi.cli import main
from speccfi.core import Core, Defense, FenceKind, Phase, PipelineConfig, Task
from speccfi.harness import (
    BENCH_DATA_SIZE, FENCING, has_indirect, perf_table, prepare, recovery_campaign, return_stack_golden,
    run_bench,
)
from speccfi.isa import Kind, assemble, format_canonical, load_image
from speccfi.programs import BENCHMARKS, benchmark

from gadget_oracle import count as oracle_count


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def perf():
    res = perf_table()
    return {(r.benchmark, r.defense, r.fence_kind): r for r in res}


def test_criterion_01_security_matrix(report):
    t0 = time.perf_counter()
    m = security_matrix(trials=10, seed=0)
    elapsed = time.perf_counter() - t0
    bad = []
    for scn in all_scenarios():
        for d in MATRIX_DEFENSES:
            r = m.cell(scn, d)
            want = r.hits == r.trials if d is Defense.BASELINE else r.hits == 0
            if not want:
                bad.append(f"{scn.name}/{d.value}={r.hits}/{r.trials}")
    ok = not bad and elapsed < 120
    report(1, ok, f"10 cells x {len(MATRIX_DEFENSES)} defenses, {elapsed:.1f}s; mismatches: {bad or 'none'}")


def test_criterion_02_btb_label_bypass(report):
    scn = Scenario.parse("spectre-btb-cross")
    secrets = [0x11 + 23 * i for i in range(10)]
    label_hits = sum(_btb_cache_trial(scn, Defense.BTB_LABEL, FenceKind.STRICT, s, i, attacker_label=1) == s
                     for i, s in enumerate(secrets))
    cfi_hits = sum(_btb_cache_trial(scn, Defense.SPECCFI_BASE, FenceKind.STRICT, s, i, attacker_label=1) == s
                   for i, s in enumerate(secrets))
    report(2, label_hits == 10 and cfi_hits == 0,
           f"label-tagged BTB leaked {label_hits}/10, decode check leaked {cfi_hits}/10")


def test_criterion_03_return_stack_golden(report):
    g = return_stack_golden()
    ok = (g["after_commit"] == ["rsbscs,0,0x10", "rsbscs,1,0x25", "rsbscs,tos,1", "rsbscs,lcp,1"]
          and g["after_recovery"] == ["rsbscs,0,0x10", "rsbscs,1,0x26", "rsbscs,tos,1", "rsbscs,lcp,1"])
    report(3, ok, f"after commit {g['after_commit']}, after recovery {g['after_recovery']}")


def test_criterion_04_recovery_soundness(report):
    total, passed, failures = recovery_campaign(1000, seed=0, mispredict_rate=0.2)
    report(4, total == passed == 1000, f"{passed}/{total} programs match the interpreter; {failures[:3]}")


def test_criterion_05_fence_identity_and_order(report, perf):
    bad = []
    for name in BENCHMARKS:
        for d in (Defense.SPECCFI_BASE, Defense.SPECCFI_FULL):
            s = run_bench(benchmark(name), d).stats
            if s.fences_inserted != s.cfi_label_mismatches:
                bad.append(f"{name}/{d.value} identity")
        f = [perf[(name, d, FenceKind.STRICT)].fences for d in FENCING]
        if not f[0] >= f[1] >= f[2]:
            bad.append(f"{name} order {f}")
    report(5, not bad, f"{len(BENCHMARKS)} benchmarks; problems: {bad or 'none'}")


def test_criterion_06_timing_orderings(report, perf):
    bad = []
    for name in BENCHMARKS:
        for d in FENCING:
            s, r = perf[(name, d, FenceKind.STRICT)].stats, perf[(name, d, FenceKind.RELAXED)].stats
            if s.cycles < r.cycles:
                bad.append(f"{name}/{d.value} strict<relaxed")
        if has_indirect(benchmark(name)):
            for fk in FenceKind:
                cfi = perf[(name, Defense.SPECCFI_BASE, fk)].normalized_ipc
                atf = perf[(name, Defense.ALL_TARGET_FENCE, fk)].normalized_ipc
                if cfi < atf:
                    bad.append(f"{name}/{fk.value} ipc {cfi:.3f}<{atf:.3f}")
    for d in (Defense.RETPOLINE_SW, Defense.ALL_TARGET_FENCE):
        s = perf[("store-heavy", d, FenceKind.STRICT)].stats.cycles
        r = perf[("store-heavy", d, FenceKind.RELAXED)].stats.cycles
        if not s > r:
            bad.append(f"store-heavy/{d.value} not strictly slower under strict")
    report(6, not bad, f"problems: {bad or 'none'}")


def test_criterion_07_zero_overhead(report):
    got = {}
    for name in ("arith", "virtual-dispatch"):
        b = run_bench(benchmark(name), Defense.BASELINE).stats
        c = run_bench(benchmark(name), Defense.SPECCFI_BASE).stats
        got[name] = (b.cycles, c.cycles, c.fences_inserted)
    ok = all(b == c and f == 0 for b, c, f in got.values())
    report(7, ok, f"(baseline, speccfi-base, fences) = {got}")


def test_criterion_08_committed_path_cfi(report):
    prog = assemble(corrupted_return_source())
    ret_pc = next(i for i, x in enumerate(prog.instructions) if x.kind == Kind.RET)
    full = run_corrupted_return(Defense.SPECCFI_FULL)
    base = run_corrupted_return(Defense.SPECCFI_BASE)
    plain = run_corrupted_return(Defense.BASELINE)
    ok = (full.violation_pc == ret_pc and not full.completed and base.completed and plain.completed
          and base.recovered == plain.recovered == 0x5A)
    report(8, ok, f"full violation at {full.violation_pc} (ret at {ret_pc}); base leaked {base.recovered}, "
                  f"baseline leaked {plain.recovered}")


def test_criterion_09_gadget_scan(report):
    p = assemble(generate_corpus(200, 4, seed=0))
    totals, agree = {}, True
    for pol in ("coarse", "fine"):
        lm = assign_labels(build_cfg(p), pol)
        q = instrument(p, lm)
        rep = scan_smother_gadgets(q, lm)
        totals[pol] = rep.total
        agree &= (rep.raw_total, rep.total) == oracle_count(format_canonical(q))
    classes = len(set(p.functions.values()))
    ok = agree and classes >= 3 and totals["fine"] < totals["coarse"]
    report(9, ok, f"coarse {totals['coarse']} vs fine {totals['fine']} over {classes} classes; oracle agrees: {agree}")


def test_criterion_10_spill_fill(report):
    prog = benchmark("recursion")
    ref, _ = interp.run(load_image(prog, data_size=BENCH_DATA_SIZE))
    img = load_image(prepare(prog, Defense.SPECCFI_BASE), data_size=BENCH_DATA_SIZE)
    core = Core(PipelineConfig(defense=Defense.SPECCFI_BASE))
    s = core.run([Phase({0: Task(img)})])
    correct = core.threads[0].regs[:16] == ref.regs[:16]
    base = run_bench(prog, Defense.BASELINE).stats
    ok = correct and s.mispredict_rsb == 0 and s.rsb_spills > 0 and base.mispredict_rsb > 0
    report(10, ok, f"RSB/SCS: {s.mispredict_rsb} return mispredicts, {s.rsb_spills} spills, {s.rsb_fills} fills, "
                   f"state correct {correct}; legacy RSB: {base.mispredict_rsb} return mispredicts")


def _cli_outputs(tmp_path, tag):
    d = tmp_path / tag
    d.mkdir()
    src = tmp_path / "prog.s"
    src.write_text("main:\n    li r1, f\n    call *r1\n    halt\n.func f s\nf:\n    ret\n")
    cmds = [
        ["asm", str(src), "--instrument", "speccfi", "--out", str(d / "asm.txt")],
        ["asm", str(src), "--instrument", "retpoline", "--out", str(d / "retpoline.txt")],
        ["run", "--benchmark", "mixed", "--defense", "speccfi-base", "--set", "mispredict_rate=0.1",
         "--set", "cache_jitter=2", "--seed", "3", "--trace-out", str(d / "trace.csv"), "-o", str(d / "run.csv")],
        ["attack", "--scenario", "spectre-btb-cross", "--trials", "3", "--seed", "3", "-o", str(d / "attack.csv")],
        ["attack", "--scenario", "smother-same", "--trials", "2", "--seed", "3", "-o", str(d / "smother.csv")],
        ["bench", "--benchmark", "virtual-dispatch", "--benchmark", "store-heavy", "-o", str(d / "bench.csv")],
        ["scan", "--corpus", "50", "--seed", "3", "-o", str(d / "scan.csv")],
        ["report", "--out", str(d / "report"), "--trials", "1", "--perf-csv", str(d / "bench.csv")],
    ]
    for c in cmds:
        assert main(c) == 0, c
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_criterion_11_determinism(report, tmp_path, capsys):
    a = _cli_outputs(tmp_path, "a")
    b = _cli_outputs(tmp_path, "b")
    differ = sorted(k for k in a if a[k] != b.get(k))
    ok = a.keys() == b.keys() and not differ and len(a) >= 14
    report(11, ok, f"{len(a)} output files from asm/run/attack/bench/scan/report; differing: {differ or 'none'}")
