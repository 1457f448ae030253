"""Command-line front end: ``speccfi {asm,run,attack,bench,scan,report}``.

Configuration comes from a ``key = value`` file (``--config`` or the
``SPECCFI_CONFIG`` environment variable) overridden by repeated
``--set key=value`` flags. Exit codes: 0 success, 1 failed assertion or
program error, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from . import attacks, harness
from .cfg import ScanConfig, assign_labels, build_cfg, generate_corpus, instrument, scan_smother_gadgets, \
    transform_retpoline
from .core import CfiViolation, Core, DeadlockDetected, Defense, FenceKind, Phase, PipelineConfig, Task
from .isa import AsmError, assemble, format_canonical, load_image, validate_cfi
from .memory import CacheConfig
from .programs import BENCHMARKS, benchmark

CONFIG_ENV = "SPECCFI_CONFIG"


class UsageError(Exception):
    pass


_PIPE_KEYS = {f.name for f in fields(PipelineConfig)
              if f.name not in ("cache", "defense", "fence_kind", "force_mispredict_pcs", "seed", "trace")}
_CACHE_KEYS = {f"cache.{f.name}" for f in fields(CacheConfig)}
_SCAN_KEYS = {"scan.window", "scan.gap"}


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {v!r}")


@dataclass
class RunConfig:
    defense: Defense = Defense.BASELINE
    fence_kind: FenceKind = FenceKind.STRICT
    seed: int = 0
    trace: bool = False
    trials: int = 10
    scenario: Optional[str] = None
    placement: Optional[str] = None
    output: Optional[str] = None
    policy: str = "fine"
    pipeline: dict = field(default_factory=dict)
    cache: dict = field(default_factory=dict)
    scan: dict = field(default_factory=dict)

    def set(self, key: str, value: str) -> None:
        key = key.strip()
        value = value.strip()
        try:
            if key == "defense":
                self.defense = Defense(value)
            elif key == "fence_kind":
                self.fence_kind = FenceKind(value)
            elif key in ("seed", "trials"):
                setattr(self, key, int(value, 0))
            elif key == "trace":
                self.trace = _bool(value)
            elif key in ("scenario", "placement", "output"):
                setattr(self, key, value)
            elif key == "policy":
                if value not in ("fine", "coarse"):
                    raise UsageError(f"policy must be fine or coarse, not {value!r}")
                self.policy = value
            elif key in _PIPE_KEYS:
                self.pipeline[key] = float(value) if key == "mispredict_rate" else int(value, 0)
            elif key in _CACHE_KEYS:
                self.cache[key.split(".", 1)[1]] = int(value, 0)
            elif key in _SCAN_KEYS:
                self.scan[key.split(".", 1)[1]] = int(value, 0)
            else:
                raise UsageError(f"unknown config key {key!r}")
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None

    def pipeline_config(self) -> PipelineConfig:
        try:
            return PipelineConfig(defense=self.defense, fence_kind=self.fence_kind, seed=self.seed,
                                  trace=self.trace, cache=CacheConfig(**self.cache), **self.pipeline)
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def scan_config(self) -> ScanConfig:
        try:
            return ScanConfig(window=self.scan.get("window", 70),
                              max_cmp_to_jump_gap=self.scan.get("gap", 5))
        except ValueError as exc:
            raise UsageError(str(exc)) from None


def parse_config_text(text: str, cfg: Optional[RunConfig] = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key = value")
        k, v = line.split("=", 1)
        cfg.set(k, v)
    return cfg


def load_config(args: argparse.Namespace) -> RunConfig:
    path = args.config or os.environ.get(CONFIG_ENV)
    cfg = RunConfig()
    if path:
        try:
            parse_config_text(Path(path).read_text(), cfg)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        cfg.set(*item.split("=", 1))
    # dedicated flags win over the file
    for key in ("defense", "fence_kind", "seed", "trials", "scenario", "placement", "output", "policy"):
        v = getattr(args, key, None)
        if v is not None:
            cfg.set(key, str(v))
    if getattr(args, "trace", False):
        cfg.trace = True
    return cfg


# --------------------------------------------------------------------------
# io helpers

def _read_source(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        _write_atomic(Path(out), text)
    else:
        sys.stdout.write(text)


def _program_from(args: argparse.Namespace, mode: str = "coarse"):
    if getattr(args, "benchmark", None):
        if args.benchmark not in BENCHMARKS:
            raise UsageError(f"unknown benchmark {args.benchmark!r}")
        return benchmark(args.benchmark)
    if not getattr(args, "input", None):
        raise UsageError("an input file or --benchmark is required")
    return assemble(_read_source(args.input), mode)


# --------------------------------------------------------------------------
# commands

def cmd_asm(args: argparse.Namespace) -> int:
    prog = assemble(_read_source(args.input), args.mode)
    if args.instrument == "speccfi":
        prog = instrument(prog, assign_labels(build_cfg(prog), args.policy or args.mode))
    elif args.instrument == "retpoline":
        prog = transform_retpoline(prog, args.fence_kind or "strict")
    diags = validate_cfi(prog, args.mode) if args.instrument == "speccfi" else []
    for d in diags:
        print(d, file=sys.stderr)
    _emit(format_canonical(prog), args.out)
    return 1 if any(d.severity == "error" for d in diags) else 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    prog = harness.prepare(_program_from(args), cfg.defense, cfg.fence_kind, cfg.policy)
    img = load_image(prog, data_size=harness.BENCH_DATA_SIZE)
    core = Core(cfg.pipeline_config())
    stats = core.run([Phase({0: Task(img)})])
    _emit(stats.to_csv(), cfg.output)
    if args.trace_out:
        _write_atomic(Path(args.trace_out), "cycle,tid,pc,kind,event\n" + "".join(l + "\n" for l in core.trace))
    return 0


def _scenario(cfg: RunConfig) -> attacks.Scenario:
    if not cfg.scenario:
        raise UsageError("--scenario is required")
    try:
        return attacks.Scenario.parse(cfg.scenario, cfg.placement)
    except attacks.ScenarioInvalid as exc:
        raise UsageError(str(exc)) from None


def cmd_attack(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    scn = _scenario(cfg)
    res = attacks.run_attack(scn, cfg.defense, cfg.fence_kind, cfg.trials, cfg.seed)
    d = res.row()
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(d), lineterminator="\n")
    w.writeheader()
    w.writerow(d)
    _emit(buf.getvalue(), cfg.output)
    if args.expect and res.outcome != args.expect:
        print(f"error: expected {args.expect}, got {res.outcome}", file=sys.stderr)
        return 1
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    names = args.benchmark or list(BENCHMARKS)
    for n in names:
        if n not in BENCHMARKS:
            raise UsageError(f"unknown benchmark {n!r}")
    defenses = [Defense(d) for d in args.defenses] if args.defenses else \
        [Defense.BASELINE, *harness.FENCING]
    kinds = [FenceKind(k) for k in args.fence_kinds] if args.fence_kinds else \
        [FenceKind.STRICT, FenceKind.RELAXED]
    results = harness.perf_table(names, defenses, kinds, seed=cfg.seed)
    _emit(harness.perf_csv(results), cfg.output)
    return 0


def cmd_scan(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    if args.corpus is not None:
        prog = assemble(generate_corpus(args.corpus, args.signatures, cfg.seed))
    else:
        prog = _program_from(args)
    lm = assign_labels(build_cfg(prog), cfg.policy)
    report = scan_smother_gadgets(instrument(prog, lm), lm, cfg.scan_config())
    _emit(report.to_csv(), cfg.output)
    print(f"policy={cfg.policy} markers={len(report.entries)} gadgets={report.raw_total} "
          f"site_gadget_pairs={report.total}", file=sys.stderr)
    return 0


def _read_csv(path: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(_read_source(path))))


def _gnuplot(rows: list[dict], value: str, kinds: list[str]) -> str:
    """Whitespace-separated table: one benchmark per line, one column per defense/fence kind."""
    cols: list[str] = []
    table: dict[str, dict[str, str]] = {}
    for r in rows:
        col = r["defense"] if r["defense"] == "baseline" else f"{r['defense']}/{r['fence_kind']}"
        if r["defense"] != "baseline" and r["fence_kind"] not in kinds:
            continue
        if col not in cols:
            cols.append(col)
        table.setdefault(r["benchmark"], {})[col] = r[value]
    out = ["# benchmark " + " ".join(cols)]
    for b, vals in table.items():
        out.append(" ".join([b] + [vals.get(c, "NaN") for c in cols]))
    return "\n".join(out) + "\n"


def cmd_report(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.matrix_csv:
        mrows = _read_csv(args.matrix_csv)
        matrix_csv = _read_source(args.matrix_csv)
    else:
        m = attacks.security_matrix(trials=cfg.trials, seed=cfg.seed, fence_kind=cfg.fence_kind)
        matrix_csv = m.to_csv()
        mrows = list(csv.DictReader(io.StringIO(matrix_csv)))
    defenses: list[str] = []
    for r in mrows:
        if r["defense"] not in defenses:
            defenses.append(r["defense"])
    grid = attacks.render_matrix({(r["scenario"], r["defense"]): r["outcome"] for r in mrows}, defenses)
    if args.perf_csv:
        perf_csv = _read_source(args.perf_csv)
    else:
        perf_csv = harness.perf_csv(harness.perf_table(seed=cfg.seed))
    prows = list(csv.DictReader(io.StringIO(perf_csv)))
    _write_atomic(out / "security_matrix.csv", matrix_csv)
    _write_atomic(out / "security_matrix.txt", grid)
    _write_atomic(out / "perf.csv", perf_csv)
    for kind in ("strict", "relaxed"):
        _write_atomic(out / f"normalized_ipc_{kind}.dat", _gnuplot(prows, "normalized_ipc", [kind]))
        _write_atomic(out / f"fences_{kind}.dat", _gnuplot(prows, "fences_committed", [kind]))
    sys.stdout.write(grid)
    return 0


# --------------------------------------------------------------------------
# argument parsing

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"key = value config file (default: ${CONFIG_ENV})")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--output", "-o", help="write the CSV here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="speccfi", description="Speculative CFI simulator and toolchain")
    sub = ap.add_subparsers(dest="command", required=True)
    defenses = [d.value for d in Defense]
    fks = [k.value for k in FenceKind]

    p = sub.add_parser("asm", help="assemble, optionally instrument, print canonical form")
    p.add_argument("input")
    p.add_argument("--mode", choices=["coarse", "fine"], default="coarse")
    p.add_argument("--instrument", choices=["none", "speccfi", "retpoline"], default="none")
    p.add_argument("--policy", choices=["coarse", "fine"])
    p.add_argument("--fence-kind", dest="fence_kind", choices=fks)
    p.add_argument("--out", "-o")
    p.set_defaults(func=cmd_asm)

    p = sub.add_parser("run", help="run one program to halt and print its statistics")
    p.add_argument("input", nargs="?")
    p.add_argument("--benchmark")
    p.add_argument("--defense", choices=defenses)
    p.add_argument("--fence-kind", dest="fence_kind", choices=fks)
    p.add_argument("--policy", choices=["coarse", "fine"])
    p.add_argument("--trace", action="store_true")
    p.add_argument("--trace-out", help="write the retire/annul trace CSV here (implies --trace)")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("attack", help="run a proof-of-concept attack")
    p.add_argument("--scenario")
    p.add_argument("--placement", choices=[x.value for x in attacks.Placement])
    p.add_argument("--defense", choices=defenses)
    p.add_argument("--fence-kind", dest="fence_kind", choices=fks)
    p.add_argument("--trials", type=int)
    p.add_argument("--expect", choices=["leaked", "blocked", "partial"])
    _common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("bench", help="performance table over the bundled microbenchmarks")
    p.add_argument("--benchmark", action="append", help="repeatable; default: all")
    p.add_argument("--defenses", nargs="+", choices=defenses)
    p.add_argument("--fence-kinds", nargs="+", choices=fks)
    _common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("scan", help="count compare-and-branch gadgets behind CFI labels")
    p.add_argument("input", nargs="?")
    p.add_argument("--benchmark")
    p.add_argument("--corpus", type=int, metavar="N", help="scan a generated corpus of N functions")
    p.add_argument("--signatures", type=int, default=4)
    p.add_argument("--policy", choices=["coarse", "fine"])
    p.add_argument("--window", type=int)
    p.add_argument("--gap", type=int)
    _common(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("report", help="security matrix, performance table and gnuplot data files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--trials", type=int)
    p.add_argument("--matrix-csv", help="reuse an existing security matrix CSV")
    p.add_argument("--perf-csv", help="reuse an existing performance CSV")
    _common(p)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "scan":
        for k in ("window", "gap"):
            if getattr(args, k) is not None:
                args.set = (args.set or []) + [f"scan.{k}={getattr(args, k)}"]
    if args.command == "run" and args.trace_out:
        args.trace = True
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except (AsmError, CfiViolation, DeadlockDetected) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
