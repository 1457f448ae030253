import pytest

from speccfi.cli import CONFIG_ENV, RunConfig, UsageError, main, parse_config_text
from speccfi.core import Defense, PipelineConfig

PROG = """
main:
    li r1, f
    call *r1
    halt
.func f sig
f:
    add r2, r2, 1
    ret
"""


@pytest.fixture
def src(tmp_path):
    p = tmp_path / "prog.s"
    p.write_text(PROG)
    return p


def test_asm_instrument_labels(src, capsys):
    assert main(["asm", str(src), "--instrument", "speccfi"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[1] == "0x0001 call_indirect r1 L1"
    assert out.splitlines()[3] == "0x0003 cfi_lbl L1"
    dest = src.with_suffix(".txt")
    assert main(["asm", str(src), "--instrument", "speccfi", "--out", str(dest)]) == 0
    assert dest.read_text() == out


def test_asm_fine_missing_label(src, capsys):
    assert main(["asm", str(src), "--mode", "fine"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: MissingLabel") and "line 4" in err
    assert len(err.strip().splitlines()) == 1


def test_asm_retpoline_has_no_ret(src, capsys):
    assert main(["asm", str(src), "--instrument", "retpoline"]) == 0
    out = capsys.readouterr().out
    assert not [ln for ln in out.splitlines() if ln.split()[1:2] == ["ret"]]


def test_attack_expectations(capsys):
    base = ["attack", "--scenario", "spectre-btb-cross", "--trials", "2"]
    assert main(base + ["--defense", "speccfi-base", "--expect", "blocked"]) == 0
    assert main(base + ["--defense", "baseline", "--expect", "blocked"]) == 1
    assert main(base + ["--scenario", "spectre-rsb-cross", "--placement", "in-place"]) == 2


def test_usage_errors(capsys):
    assert main(["run", "--benchmark", "arith", "--set", "bogus=1"]) == 2
    assert "unknown config key" in capsys.readouterr().err
    assert main(["run", "--benchmark", "nope"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_config_defaults_and_keys():
    cfg = parse_config_text("defense = speccfi-base  # comment\nrob_size = 64\ncache.miss_latency = 80\n")
    pc = cfg.pipeline_config()
    assert pc.defense is Defense.SPECCFI_BASE and pc.rob_size == 64 and pc.cache.miss_latency == 80
    assert RunConfig().pipeline_config() == PipelineConfig()
    with pytest.raises(UsageError):
        parse_config_text("no equals sign\n")
    with pytest.raises(UsageError):
        parse_config_text("trials = many\n")


def test_config_file_and_env(tmp_path, monkeypatch, capsys):
    conf = tmp_path / "c.conf"
    conf.write_text("defense = all-target\n")
    assert main(["run", "--benchmark", "virtual-dispatch", "--config", str(conf)]) == 0
    via_flag = capsys.readouterr().out
    monkeypatch.setenv(CONFIG_ENV, str(conf))
    assert main(["run", "--benchmark", "virtual-dispatch"]) == 0
    assert capsys.readouterr().out == via_flag
    # --set wins over the file
    assert main(["run", "--benchmark", "virtual-dispatch", "--set", "defense=baseline"]) == 0
    assert capsys.readouterr().out != via_flag
    lines = via_flag.splitlines()
    assert lines[0].startswith("cycles,committed_instructions") and int(lines[1].split(",")[0]) > 0


def test_scan_and_bench(tmp_path, capsys):
    assert main(["scan", "--corpus", "30", "--signatures", "3", "--policy", "coarse"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("marker_addr,label,gadget_offset")
    assert main(["bench", "--benchmark", "arith", "--defenses", "baseline", "speccfi-base",
                 "--fence-kinds", "strict"]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0].startswith("benchmark,defense,fence_kind,cycles") and len(rows) == 3


def test_report(tmp_path, capsys):
    out = tmp_path / "rep"
    perf = tmp_path / "perf.csv"
    assert main(["bench", "--benchmark", "virtual-dispatch", "-o", str(perf)]) == 0
    assert main(["report", "--out", str(out), "--trials", "1", "--perf-csv", str(perf)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["fences_relaxed.dat", "fences_strict.dat", "normalized_ipc_relaxed.dat",
                     "normalized_ipc_strict.dat", "perf.csv", "security_matrix.csv", "security_matrix.txt"]
    grid = (out / "security_matrix.txt").read_text()
    for row in ("spectre-btb", "spectre-rsb", "smother"):
        assert row in grid
    assert grid.count("n/a") == 2 * 3
    assert len((out / "security_matrix.csv").read_text().splitlines()) == 1 + 10 * 3


def _outputs(tmp_path, tag):
    d = tmp_path / tag
    d.mkdir()
    cmds = [
        ["run", "--benchmark", "mixed", "--defense", "speccfi-base", "--set", "mispredict_rate=0.1",
         "--seed", "5", "--trace-out", str(d / "trace.csv"), "-o", str(d / "run.csv")],
        ["attack", "--scenario", "smother-cross", "--trials", "2", "--seed", "5", "-o", str(d / "attack.csv")],
        ["bench", "--benchmark", "btb-collision", "-o", str(d / "bench.csv")],
        ["scan", "--corpus", "20", "-o", str(d / "scan.csv")],
    ]
    for c in cmds:
        assert main(c) == 0
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_commands_are_byte_stable(tmp_path, capsys):
    a, b = _outputs(tmp_path, "a"), _outputs(tmp_path, "b")
    assert a == b and len(a) == 5 and all(a.values())
