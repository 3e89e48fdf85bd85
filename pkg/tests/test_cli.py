import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from geomgap import cli, gnn
from geomgap.genlab import read_records_csv

FIXTURES = Path(__file__).parent / "fixtures"

NODE = {
    "manifold": {"kind": "circle"},
    "signal": {"coefficients": {"2": 1.0, "3": 0.5, "4": 0.7}},
    "graph": {"n": [100]},
    "train": {"epochs": 20},
    "eval": {"n_eval": 500, "trials": 1, "seed": 5},
}


def _write(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2) if not isinstance(doc, str) else doc)
    return path


def _run(*argv) -> int:
    return cli.main([str(a) for a in argv])


# -- node experiments -------------------------------------------------------


def test_minimal_config_writes_one_row(tmp_path):
    cfg = _write(tmp_path / "c.json", NODE)
    out = tmp_path / "out"
    assert _run("gap-node", "--config", cfg, "--out", out, "--svg") == 0
    recs = read_records_csv(out / "records.csv")
    assert len(recs) == 1 and recs[0].status == "ok"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["master_seed"] == 5
    assert manifest["config_checksum"] == cli.checksum(manifest["config"])
    assert manifest["outputs"] == ["records.csv", "gaps.svg"]
    assert sorted(p.name for p in out.iterdir()) == ["gaps.svg", "manifest.json", "records.csv"]
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]


def test_reruns_are_byte_identical(tmp_path):
    cfg = _write(tmp_path / "c.json", NODE)
    assert _run("gap-node", "--config", cfg, "--out", tmp_path / "a") == 0
    assert _run("gap-node", "--config", cfg, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "records.csv").read_bytes() == (tmp_path / "b" / "records.csv").read_bytes()


def test_seed_flag_overrides_config(tmp_path):
    cfg = _write(tmp_path / "c.json", NODE)
    assert _run("gap-node", "--config", cfg, "--out", tmp_path / "a", "--seed", 9) == 0
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["master_seed"] == 9
    assert _run("gap-node", "--config", cfg, "--out", tmp_path / "b", "--seed", 2**64) == 2


def test_sweep_row_count_and_outputs(tmp_path):
    doc = json.loads(json.dumps(NODE))
    doc["graph"]["n"] = [40, 60, 80, 120]
    doc["mismatch"] = {"gammas": [0.0, 0.1, 0.2]}
    doc["train"]["epochs"] = 5
    doc["eval"]["trials"] = 5
    cfg = _write(tmp_path / "c.json", doc)
    out = tmp_path / "out"
    assert _run("sweep", "--config", cfg, "--out", out) == 0
    assert len(read_records_csv(out / "records.csv")) == 60
    summary = (out / "summary.csv").read_text().splitlines()
    assert len(summary) == 1 + 12
    assert "r2 = " in (out / "bound_fit.txt").read_text()


def test_output_dir_requires_overwrite(tmp_path):
    cfg = _write(tmp_path / "c.json", NODE)
    out = tmp_path / "out"
    assert _run("gap-node", "--config", cfg, "--out", out) == 0
    before = (out / "records.csv").read_bytes()
    assert _run("gap-node", "--config", cfg, "--out", out) == 2
    assert (out / "records.csv").read_bytes() == before
    (out / "stale.txt").write_text("old")
    assert _run("gap-node", "--config", cfg, "--out", out, "--overwrite", "--seed", 6) == 0
    assert not (out / "stale.txt").exists()
    assert json.loads((out / "manifest.json").read_text())["master_seed"] == 6
    assert len(list(out.glob("manifest*"))) == 1
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]


def test_manifest_is_written_before_results(tmp_path, monkeypatch):
    seen = []
    real = cli.genlab.write_records_csv

    def spy(records, path, *a, **k):
        seen.append(sorted(p.name for p in Path(path).parent.iterdir()))
        return real(records, path, *a, **k)

    monkeypatch.setattr(cli.genlab, "write_records_csv", spy)
    assert _run("gap-node", "--config", _write(tmp_path / "c.json", NODE), "--out", tmp_path / "o") == 0
    assert seen == [["manifest.json"]]


@pytest.mark.parametrize("text,needle", [
    ('{"manifold": {"kind": "circle"},\n  "graph": [1,,]}', ":2:"),
    (json.dumps({**NODE, "graph": {"n": [100], "radius": 3}}), "key graph.radius"),
    (json.dumps({**NODE, "eval": {"n_eval": 100}}), "key eval.n_eval"),
    ("[1, 2]", "top level"),
])
def test_config_errors_exit_2(tmp_path, capsys, text, needle):
    cfg = _write(tmp_path / "c.json", text)
    assert _run("gap-node", "--config", cfg, "--out", tmp_path / "o") == 2
    assert needle in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_missing_config_and_bad_flags(tmp_path):
    assert _run("gap-node", "--config", tmp_path / "nope.json", "--out", tmp_path / "o") == 2
    assert _run("gap-node", "--out", tmp_path / "o") == 2
    assert _run("frobnicate") == 2


def test_runtime_failure_exits_1(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("simulated")

    monkeypatch.setattr(cli.genlab, "sweep", boom)
    assert _run("gap-node", "--config", _write(tmp_path / "c.json", NODE), "--out", tmp_path / "o") == 1
    assert not (tmp_path / "o").exists()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]


# -- graph experiments ------------------------------------------------------

GRAPH = {"n_points": 40, "graphs_per_class": 4, "jitter": [0.0, 0.05], "train": {"epochs": 10},
         "eval": {"test_graphs_per_class": 4, "seed": 1}}


def test_gap_graph_two_classes(tmp_path):
    doc = {"classes": [{"manifold": {"kind": "sphere"}}, {"manifold": {"kind": "flat_torus"}}], **GRAPH}
    out = tmp_path / "out"
    assert _run("gap-graph", "--config", _write(tmp_path / "g.json", doc), "--out", out) == 0
    recs = read_records_csv(out / "records.csv")
    assert len(recs) == 6
    assert {r.group for r in recs} == {"class:sphere", "class:flat_torus", "aggregate"}


def test_gap_graph_on_fixture_clouds(tmp_path):
    doc = {"classes": [{"path": str(FIXTURES / "cube_cloud.off"), "dim": 2},
                       {"path": str(FIXTURES / "sphere_cloud.off"), "dim": 2}], **GRAPH}
    out = tmp_path / "out"
    assert _run("gap-graph", "--config", _write(tmp_path / "g.json", doc), "--out", out) == 0
    assert {r.group for r in read_records_csv(out / "records.csv")} == {
        "class:cube_cloud", "class:sphere_cloud", "aggregate"}


def test_gap_graph_relative_paths(tmp_path):
    (tmp_path / "clouds").mkdir()
    (tmp_path / "clouds" / "c.off").write_bytes((FIXTURES / "cube_cloud.off").read_bytes())
    doc = {"classes": [{"path": "clouds/c.off", "dim": 2}, {"manifold": {"kind": "sphere"}}], **GRAPH}
    assert _run("gap-graph", "--config", _write(tmp_path / "g.json", doc), "--out", tmp_path / "o") == 0


def test_gap_graph_missing_class_file(tmp_path, capsys):
    doc = {"classes": [{"path": "absent.off", "dim": 2}, {"manifold": {"kind": "sphere"}}], **GRAPH}
    assert _run("gap-graph", "--config", _write(tmp_path / "g.json", doc), "--out", tmp_path / "o") == 2
    assert "absent.off" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_gap_graph_malformed_class_file(tmp_path, capsys):
    doc = {"classes": [{"path": str(FIXTURES / "bad_vertex.off"), "dim": 2}, {"manifold": {"kind": "sphere"}}],
           **GRAPH}
    assert _run("gap-graph", "--config", _write(tmp_path / "g.json", doc), "--out", tmp_path / "o") == 2
    assert "line 4" in capsys.readouterr().err


# -- certify ----------------------------------------------------------------


def _checkpoint(path, taps):
    m = gnn.GnnModel([np.array(taps, float).reshape(1, 1, -1)], np.ones((1, 1)), np.zeros(1), "identity")
    gnn.save_checkpoint(m, path)
    return path


def test_certify_all_pass(tmp_path, capsys):
    ck = _checkpoint(tmp_path / "m.json", [1.0, 0.0, 0.0])
    assert _run("certify", "--checkpoint", ck, "--json") == 0
    report = json.loads(capsys.readouterr().out)
    assert all(f["c_l"] == 0.0 for f in report["filters"])


def test_certify_single_tap(tmp_path, capsys):
    ck = _checkpoint(tmp_path / "m.json", [0.0, 1.0])
    assert _run("certify", "--checkpoint", ck, "--d", 1, "--steps", 20000, "--json") == 0
    (f,) = json.loads(capsys.readouterr().out)["filters"]
    assert f["c_l"] == pytest.approx(4 * math.exp(-2), rel=1e-6)
    assert _run("certify", "--checkpoint", ck) == 0
    assert "max c_l = 0.541" in capsys.readouterr().out


def test_certify_errors(tmp_path):
    ck = _checkpoint(tmp_path / "m.json", [0.0, 1.0])
    assert _run("certify", "--checkpoint", ck, "--lambda-min", 0) == 2
    assert _run("certify", "--checkpoint", ck, "--lambda-min", -1) == 2
    bad = _write(tmp_path / "bad.json", '{"schema_version": 1, "taps": "x"}')
    assert _run("certify", "--checkpoint", bad) == 2
    assert _run("certify", "--checkpoint", _write(tmp_path / "junk.json", "{not json")) == 2
    assert _run("certify", "--checkpoint", tmp_path / "missing.json") == 2


# -- converge, gradcheck ----------------------------------------------------


def test_converge_report(capsys):
    assert _run("converge", "--n", 500, 1000, 2000, "--json") == 0
    rep = json.loads(capsys.readouterr().out)
    errs = [r["max_error"] for r in rep["rows"]]
    assert errs[0] >= errs[1] >= errs[2]
    assert rep["weyl"]["expected"] == 2.0


def test_converge_empty_n():
    assert _run("converge", "--n") == 2


def test_gradcheck_default(capsys):
    assert _run("gradcheck") == 0
    err = float(capsys.readouterr().out.split("=")[1])
    assert err <= 1e-5
    assert _run("gradcheck", "--task", "graph", "--nonlinearity", "abs", "--widths", 2, 3, 3, 2) == 0
    assert _run("gradcheck", "--widths", 3) == 2


# -- ingest -----------------------------------------------------------------


def test_ingest_round_trip(tmp_path):
    from geomgap.geograph import load_point_cloud

    out = tmp_path / "o"
    assert _run("ingest", "--input", FIXTURES / "cube.off", "--out", out) == 0
    back = load_point_cloud(out / "points.csv")
    assert back.points.tobytes() == load_point_cloud(FIXTURES / "cube.off").points.tobytes()
    assert json.loads((out / "manifest.json").read_text())["config"]["n"] == 8
    assert _run("ingest", "--input", FIXTURES / "cube.off", "--out", out) == 2
    assert _run("ingest", "--input", FIXTURES / "points.csv", "--out", out, "--overwrite") == 0
    assert load_point_cloud(out / "points.csv").n == 3


def test_ingest_malformed(tmp_path, capsys):
    assert _run("ingest", "--input", FIXTURES / "truncated.off", "--out", tmp_path / "o") == 2
    assert "line 5" in capsys.readouterr().err
    assert _run("ingest", "--input", tmp_path / "none.off", "--out", tmp_path / "o") == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "geomgap.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "geomgap" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "geomgap.cli", "certify", "--checkpoint",
                           str(tmp_path / "absent.json")], capture_output=True, text=True)
    assert proc.returncode == 2
