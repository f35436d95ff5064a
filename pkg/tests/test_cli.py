import json
import math

import pytest

from spcan.cli import main

SMALL = {"epochs": 3, "block_dims": [8, 8, 8, 8], "disc_hidden": 4, "hdiv_every": 0, "stage1_fraction": 0.34}


@pytest.fixture
def files(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"rotation": math.pi / 6, "n_source": 60, "n_target": 60}))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    return spec, cfg


def _gen(tmp_path, spec, name="data", *extra):
    out = tmp_path / name
    assert main(["gen", "--spec", str(spec), "--out", str(out), *extra]) == 0
    return out


def _train(method, data, cfg, out, *extra):
    return main(["train", "--method", method, "--data", str(data), "--config", str(cfg), "--out", str(out), *extra])


def _records(run):
    lines = (run / "metrics.jsonl").read_text().splitlines()
    return [json.loads(x) for x in lines]


def test_gen_writes_two_or_four_files(tmp_path, files):
    spec, _ = files
    plain = _gen(tmp_path, spec)
    assert sorted(p.name for p in plain.glob("*.csv")) == ["source.csv", "target.csv"]
    paired = _gen(tmp_path, spec, "paired", "--paired")
    assert sorted(p.name for p in paired.glob("*.csv")) == [
        "source_A.csv", "source_B.csv", "target_A.csv", "target_B.csv"]


def test_gen_invalid_key_names_it(tmp_path, capsys):
    spec = tmp_path / "bad.json"
    spec.write_text(json.dumps({"rotation": 0.5, "wobble": 1}))
    assert main(["gen", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 2
    assert "wobble" in capsys.readouterr().err


def test_existing_out_requires_force(tmp_path, files):
    spec, _ = files
    out = _gen(tmp_path, spec)
    assert main(["gen", "--spec", str(spec), "--out", str(out)]) == 2
    assert main(["gen", "--spec", str(spec), "--out", str(out), "--force"]) == 0


def test_train_writes_records_and_is_reproducible(tmp_path, files):
    spec, cfg = files
    data = _gen(tmp_path, spec)
    assert _train("spcan", data, cfg, tmp_path / "r1") == 0
    assert _train("spcan", data, cfg, tmp_path / "r2") == 0
    recs = _records(tmp_path / "r1")
    assert len(recs) == SMALL["epochs"] + 1 and recs[-1]["summary"]
    assert (tmp_path / "r1" / "metrics.jsonl").read_bytes() == (tmp_path / "r2" / "metrics.jsonl").read_bytes()
    echoed = json.loads((tmp_path / "r1" / "config.json").read_text())
    assert echoed["train"]["method"] == "spcan" and echoed["train"]["epochs"] == 3
    assert (tmp_path / "r1" / "checkpoint.json").exists()
    # rerun into the same directory with --force gives the same bytes
    before = (tmp_path / "r1" / "metrics.jsonl").read_bytes()
    assert _train("spcan", data, cfg, tmp_path / "r1", "--force") == 0
    assert (tmp_path / "r1" / "metrics.jsonl").read_bytes() == before


def test_train_dann_lambda(tmp_path, files):
    spec, cfg = files
    data = _gen(tmp_path, spec)
    assert _train("dann", data, cfg, tmp_path / "r") == 0
    assert all(r["lambda"] == [-1.0] for r in _records(tmp_path / "r")[:-1])


def test_ts_needs_paired_data(tmp_path, files, capsys):
    spec, cfg = files
    data = _gen(tmp_path, spec)
    assert _train("ts-spcan", data, cfg, tmp_path / "r") == 2
    assert "paired" in capsys.readouterr().err
    paired = _gen(tmp_path, spec, "paired", "--paired")
    assert _train("ts-spcan", paired, cfg, tmp_path / "ts") == 0
    assert (tmp_path / "ts" / "checkpoint_A.json").exists()


def test_bad_config_key_rejected(tmp_path, files, capsys):
    spec, _ = files
    data = _gen(tmp_path, spec)
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"momentum_boost": 2}))
    assert _train("spcan", data, cfg, tmp_path / "r") == 2
    assert "momentum_boost" in capsys.readouterr().err


def test_eval_checkpoint(tmp_path, files, capsys):
    spec, cfg = files
    data = _gen(tmp_path, spec)
    assert _train("source-only", data, cfg, tmp_path / "r") == 0
    last = _records(tmp_path / "r")[-2]["target_accuracy"]
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint.json"),
                 "--data", str(data / "target.csv")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["accuracy"] == last and out["n"] == 60


def test_report_median_skip_and_ordering(tmp_path, files):
    spec, cfg = files
    data = _gen(tmp_path, spec)
    runs = tmp_path / "runs"
    for seed in ("0", "1"):
        assert _train("can", data, cfg, runs / f"can{seed}", "--seed", seed) == 0
    assert _train("source-only", data, cfg, runs / "so") == 0
    (runs / "so" / "metrics.jsonl").unlink()
    assert main(["report", "--runs", str(runs), "--out", str(tmp_path / "rep")]) == 0
    rows = (tmp_path / "rep" / "accuracy.tsv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].split("\t")[:2] == ["can", "2"]
    accs = sorted(_records(runs / f"can{s}")[-1]["last_target_accuracy"] for s in "01")
    assert float(rows[1].split("\t")[2]) == pytest.approx(sum(accs) / 2, abs=1e-4)
    order = (tmp_path / "rep" / "ordering.tsv").read_text().splitlines()
    assert order[0] == "ordering\tholds"
    for name in ("lambda.tsv", "schedule.tsv", "hdiv.tsv"):
        assert (tmp_path / "rep" / name).exists()


def test_report_without_runs(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["report", "--runs", str(tmp_path / "empty")]) == 2


def test_report_skips_torn_run(tmp_path, files):
    spec, cfg = files
    data = _gen(tmp_path, spec)
    runs = tmp_path / "runs"
    assert _train("can", data, cfg, runs / "a") == 0
    assert _train("can", data, cfg, runs / "b") == 0
    path = runs / "b" / "metrics.jsonl"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n" + lines[-1][:10])
    assert main(["report", "--runs", str(runs), "--out", str(tmp_path / "rep")]) == 0
    rows = (tmp_path / "rep" / "accuracy.tsv").read_text().splitlines()
    assert rows[1].split("\t")[1] == "1"


def test_sweep_then_report(tmp_path, files):
    spec, cfg = files
    out = tmp_path / "sweep"
    assert main(["sweep", "--spec", str(spec), "--config", str(cfg), "--methods", "source-only,can,ts-spcan",
                 "--seeds", "0-1", "--out", str(out)]) == 0
    assert len(list((out / "runs").glob("*/seed*/metrics.jsonl"))) == 6
    assert main(["report", "--runs", str(out / "runs"), "--out", str(tmp_path / "rep")]) == 0
    rows = [r.split("\t") for r in (tmp_path / "rep" / "accuracy.tsv").read_text().splitlines()[1:]]
    assert [(r[0], r[1]) for r in rows] == [("source-only", "2"), ("can", "2"), ("ts-spcan", "2")]
    lam = (tmp_path / "rep" / "lambda.tsv").read_text()
    assert "ts-spcan/seed0/A" in lam and "ts-spcan/seed0/B" in lam


def test_ordering_flag():
    from spcan.cli import ordering_holds
    assert ordering_holds({"source-only": 0.7, "dann": 0.8, "can": 0.85, "spcan": 0.9})
    assert not ordering_holds({"source-only": 0.7, "dann": 0.8, "can": 0.9, "spcan": 0.85})
    assert not ordering_holds({"can": 0.9})
