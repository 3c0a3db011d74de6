import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from make_golden import GOLDEN, STAGES, run_pipeline
from ssdecomp.cli import EXIT_CONFIG, EXIT_FIT, EXIT_OK, load_config, main
from ssdecomp.ingest import cache_path
from ssdecomp.regime import MsarSpec, simulate_msar
from ssdecomp.timeseries import TimeSeries, read_series_csv, write_series_csv

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"


def compare_to_golden(out: Path):
    for stage in STAGES:
        golden = sorted(p.relative_to(GOLDEN / stage) for p in (GOLDEN / stage).rglob("*")
                        if p.is_file())
        produced = sorted(p.relative_to(out / stage) for p in (out / stage).rglob("*")
                          if p.is_file())
        assert produced == golden, stage
        for rel in golden:
            if rel.name == "manifest.json":
                g = json.loads((GOLDEN / stage / rel).read_text())
                m = json.loads((out / stage / rel).read_text())
                assert m["files"] == g["files"] and m["status"] == "ok"
            else:
                assert (out / stage / rel).read_bytes() == (GOLDEN / stage / rel).read_bytes(), rel


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    codes = run_pipeline(out)
    return out, codes


def test_pipeline_matches_golden(pipeline_run):
    out, codes = pipeline_run
    assert codes == [EXIT_OK] * 4
    compare_to_golden(out)


def test_pipeline_with_workers_is_identical(tmp_path):
    assert run_pipeline(tmp_path, workers=2) == [EXIT_OK] * 4
    compare_to_golden(tmp_path)


def test_manifest_contents(pipeline_run):
    out, _ = pipeline_run
    m = json.loads((out / "decompose" / "manifest.json").read_text())
    assert set(m) >= {"config_hash", "versions", "files", "seed", "command"}
    assert m["seed"] == 7 and len(m["config_hash"]) == 64
    assert {f["name"] for f in m["files"]} == {"results.json", "trend.csv", "cycle.csv",
                                             "obs_error.csv", "boxes.csv"}
    assert m["versions"]["numpy"] == np.__version__


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ssdecomp", "spectrum", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for flag in ("--config", "--seed", "--offline", "--workers", "--out"):
        assert flag in proc.stdout


def write_config(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def test_config_errors(tmp_path, capsys):
    assert main(["decompose", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG
    cfg = write_config(tmp_path / "c.yaml", "decompose:\n  bogus: 1\n")
    assert main(["decompose", "--config", str(cfg)]) == EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err
    empty = tmp_path / "empty.csv"
    empty.write_text("date,a\n")
    cfg = write_config(tmp_path / "e.yaml", f"decompose:\n  input: {empty}\n")
    assert main(["decompose", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "no data rows" in capsys.readouterr().err
    with pytest.raises(Exception):
        load_config(None, {"workers": 0})


def test_common_cycles_without_cycle_component(tmp_path, capsys):
    cfg = write_config(tmp_path / "t.yaml", f"""
ingest:
  grid: {FIXTURES / 'grid.csv'}
  region: {{south: 20, north: 25, west: 120, east: 130, size: 5}}
decompose:
  spec: {{trend: {{order: 1}}}}
""")
    out = str(tmp_path / "o")
    assert main(["ingest", "--config", str(cfg), "--out", out]) == EXIT_OK
    assert main(["decompose", "--config", str(cfg), "--out", out]) == EXIT_OK
    assert main(["common", "--config", str(cfg), "--out", out, "--kind", "cycles"]) == EXIT_FIT
    assert "cycle" in capsys.readouterr().err
    manifest = json.loads((tmp_path / "o" / "common" / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert main(["common", "--config", str(cfg), "--out", out]) == EXIT_OK


def planted_csv(path: Path, rank: int, seed: int = 0, q: int = 12, T: int = 600):
    rng = np.random.default_rng(seed)
    f = np.cumsum(np.cumsum(rng.standard_normal((rank, T)), axis=1), axis=1)
    f /= f.std(axis=1, keepdims=True)
    L = rng.standard_normal((q, rank))
    L[:, 0] = np.abs(L[:, 0]) + 0.5
    S = L @ f
    X = S + rng.standard_normal(S.shape) * S.std(axis=1, keepdims=True) / 10
    write_series_csv(path, [TimeSeries(x, "1950-01", name=f"s{k}") for k, x in enumerate(X)])


def test_common_on_raw_panels(tmp_path):
    planted_csv(tmp_path / "two.csv", 2)
    cfg = write_config(tmp_path / "c.yaml", f"common:\n  input: {tmp_path / 'two.csv'}\n")
    assert main(["common", "--config", str(cfg), "--out", str(tmp_path / "two")]) == EXIT_OK
    info = json.loads((tmp_path / "two" / "common" / "common.json").read_text())
    assert info["order"] == 2
    planted_csv(tmp_path / "one.csv", 1)
    cfg = write_config(tmp_path / "d.yaml", f"common:\n  input: {tmp_path / 'one.csv'}\n")
    assert main(["common", "--config", str(cfg), "--out", str(tmp_path / "one")]) == EXIT_OK
    lines = (tmp_path / "one" / "common" / "correlation_factor1.csv").read_text().splitlines()
    r = np.array([float(line.split(",")[-1]) for line in lines[1:]])
    assert r.size == 12 and np.all(np.abs(r) > 0.99)


def test_msar_command_records_accuracy(tmp_path):
    spec = MsarSpec((1.0, -1.0), ((0.4, -0.1), (0.3, 0.1)), (0.25, 0.25),
                    ((0.95, 0.05), (0.05, 0.95)))
    y, s = simulate_msar(spec, 600, seed=3)
    write_series_csv(tmp_path / "m.csv", [TimeSeries(y, name="index"),
                                          TimeSeries(s.astype(float), name="truth")])
    cfg = write_config(tmp_path / "m.yaml",
                       f"msar:\n  input: {tmp_path / 'm.csv'}\n  column: index\n"
                       f"  truth: truth\n  n_starts: 3\n")
    assert main(["msar", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    info = json.loads((tmp_path / "o" / "msar" / "msar.json").read_text())
    assert info["classification_accuracy"] >= 0.9
    probs = read_series_csv(tmp_path / "o" / "msar" / "regimes.csv")
    assert [p.name for p in probs] == ["filtered_high", "smoothed_high", "regime",
                                       "smoothed_mean"]


def test_spectrum_command(tmp_path, capsys):
    t = np.arange(240)
    write_series_csv(tmp_path / "c.csv", [TimeSeries(np.cos(2 * np.pi * t / 12), name="cos")])
    cfg = write_config(tmp_path / "s.yaml", f"spectrum:\n  input: {tmp_path / 'c.csv'}\n")
    assert main(["spectrum", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    peaks = json.loads((tmp_path / "o" / "spectrum" / "peaks.json").read_text())
    assert peaks["cos"][0]["period_months"] == pytest.approx(12.0)
    x = np.cos(2 * np.pi * t / 12)
    x[100] = np.nan
    write_series_csv(tmp_path / "g.csv", [TimeSeries(x, name="gappy")])
    cfg = write_config(tmp_path / "g.yaml", f"spectrum:\n  input: {tmp_path / 'g.csv'}\n")
    assert main(["spectrum", "--config", str(cfg), "--out", str(tmp_path / "p")]) == EXIT_FIT
    assert "missing" in capsys.readouterr().err


def test_fetch_command(tmp_path):
    src = tmp_path / "pdo.txt"
    src.write_text("# monthly index\n2000 01 0.1\n2000 02 -0.3\n2000 03 0.2\n")
    url = src.as_uri()
    cache = tmp_path / "cache"
    args = ["fetch", "--url", f"pdo={url}", "--cache-dir", str(cache)]
    assert main(args + ["--offline", "--out", str(tmp_path / "a")]) == EXIT_FIT
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    assert cache_path(url, cache).is_file()
    src.unlink()
    assert main(args + ["--offline", "--out", str(tmp_path / "c")]) == EXIT_OK
    first = (tmp_path / "b" / "fetch" / "pdo.csv").read_bytes()
    assert (tmp_path / "c" / "fetch" / "pdo.csv").read_bytes() == first
    assert read_series_csv(tmp_path / "c" / "fetch" / "pdo.csv")[0].values[1] == -0.3
    assert main(["fetch", "--out", str(tmp_path / "d")]) == EXIT_CONFIG
