import csv
import io
import json
import math
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from qprob import cli

CONFIGS = Path(__file__).parent / "configs"

# config file -> command; cover reads the process file written by gen-model
RUNS = {
    "query_discrete": "query-discrete",
    "beam": "beam",
    "hybrid": "hybrid",
    "hit_cdf": "hit-cdf",
    "nth_mark": "nth-mark",
    "a_before_b": "a-before-b",
    "censor_ll": "censor-ll",
    "hit_est": "hit-est",
    "hit_eff": "hit-eff",
    "cover": "cover",
    "joint": "joint",
    "ground_truth": "ground-truth",
    "compare": "compare",
}


@pytest.fixture
def workdir(tmp_path):
    d = tmp_path / "configs"
    shutil.copytree(CONFIGS, d)
    assert cli.run("gen-model", d / "gen_model.json") == 0
    return d


def rows(path):
    return list(csv.DictReader(io.StringIO(Path(path).read_text())))


@pytest.mark.parametrize("name", sorted(RUNS))
def test_every_command_runs(workdir, name):
    out = workdir / f"{name}.csv"
    assert cli.run(RUNS[name], workdir / f"{name}.json", out=str(out)) == 0
    assert rows(out)


def test_hit_est_csv_contents(workdir):
    out = workdir / "h.csv"
    cli.run("hit-est", workdir / "hit_est.json", out=str(out))
    got = rows(out)
    assert set(got[0]) == {"experiment", "x", "method", "mean", "var", "se", "n"}
    is_rows = [r for r in got if r["method"] == "IS"]
    for r in is_rows:
        assert float(r["mean"]) == pytest.approx(1 - math.exp(-float(r["x"])), abs=1e-12)
        assert float(r["var"]) == 0.0
    assert all(r["experiment"] == "pois" for r in got)


def test_hit_eff_uses_infinity_sentinel(workdir):
    out = workdir / "e.csv"
    cli.run("hit-eff", workdir / "hit_eff.json", out=str(out))
    got = rows(out)
    assert any(r["a"] == "IS" and r["b"] == "NE" and r["eff"] == "inf" for r in got)


def test_exit_codes(workdir, capsys):
    assert cli.run("hit-est", workdir / "bad_key.json") == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config" and err["field"] == "proces"
    assert cli.run("hit-est", workdir / "exact_diffusion.json") == 2
    assert cli.run("hit-est", workdir / "coarse_step.json") == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "numeric" and "too coarse" in err["message"]
    assert cli.run("hit-est", workdir / "missing.json") == 2
    assert cli.run("beam", workdir / "hit_est.json") == 2
    assert cli.run("hit-est", workdir / "hit_est.json", workers=0) == 2


def test_wrong_schema(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema": "other/1", "command": "beam"}))
    assert cli.run("beam", p) == 2
    p.write_text("{not json")
    assert cli.run("beam", p) == 2


@pytest.mark.parametrize("name", ["hit_est", "hybrid", "censor_ll", "joint", "a_before_b"])
def test_output_is_deterministic(workdir, name):
    texts = []
    for i, w in enumerate((1, 1, 8)):
        out = workdir / f"{name}-{i}.csv"
        assert cli.run(RUNS[name], workdir / f"{name}.json", out=str(out), workers=w) == 0
        texts.append(out.read_bytes())
    assert texts[0] == texts[1] == texts[2]


def test_wall_time_column_is_opt_in(workdir):
    out = workdir / "w.csv"
    cli.run("hit-est", workdir / "hit_est.json", out=str(out), wall_time=True)
    assert "wall_ms" in rows(out)[0]


def test_gen_model_roundtrip(workdir):
    from qprob.jump import process_from_dict, process_to_dict
    doc = json.loads((workdir / "ctmc_process.json").read_text())
    assert process_to_dict(process_from_dict(doc)) == doc
    again = workdir / "again.json"
    cfg = json.loads((workdir / "gen_model.json").read_text())
    cfg["output"] = "again.json"
    (workdir / "gen2.json").write_text(json.dumps(cfg))
    assert cli.run("gen-model", workdir / "gen2.json") == 0
    assert again.read_text() == (workdir / "ctmc_process.json").read_text()


def test_console_entry_point(workdir):
    r = subprocess.run([sys.executable, "-m", "qprob.cli", "hit-est", str(workdir / "hit_est.json"),
                        "--out", "-"], capture_output=True, text=True)
    assert r.returncode == 0
    assert r.stdout.startswith("experiment,x,method")
    r = subprocess.run([sys.executable, "-m", "qprob.cli", "hit-est",
                        str(workdir / "bad_key.json")], capture_output=True, text=True)
    assert r.returncode == 2
