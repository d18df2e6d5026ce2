from __future__ import annotations

import csv
import json

import pytest

from brcafl.cli import config_digest, load_config, main

SMALL = {
    "dataset.dim": 10,
    "dataset.per_class": 250,
    "model.hidden_dims": [8],
    "warmup.rounds": 3,
    "epochs.pretrain": 5,
    "rounds": 3,
    "attack.kind": "same-value",
    "defense.kind": "brca",
    "partition.scheme": "non-iid-2",
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL))
    return path


def _metrics(out):
    return [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]


def test_run_writes_all_outputs(config_file, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", str(config_file), "--out", str(out)]) == 0
    for name in ("manifest.json", "metrics.jsonl", "summary.csv", "model.ckpt", "detector.ckpt"):
        assert (out / name).exists(), name
    assert not (out / "INCOMPLETE").exists()
    assert len(_metrics(out)) == SMALL["rounds"]
    rows = list(csv.reader((out / "summary.csv").open()))
    assert rows[0] == ["round", "accuracy", "loss"] and len(rows) == SMALL["rounds"] + 1
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["finished"] is not None and manifest["master_seed"] == 0


def test_missing_key_exit_2(tmp_path, capsys):
    flat = dict(SMALL)
    del flat["partition.scheme"]
    path = tmp_path / "c.json"
    path.write_text(json.dumps(flat))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "partition.scheme" in capsys.readouterr().err


def test_bad_override_exit_2(config_file, tmp_path):
    assert main(["run", "--config", str(config_file), "--out", str(tmp_path / "o"), "--override", "xi=0.7"]) == 2
    assert main(["run", "--config", str(config_file), "--out", str(tmp_path / "o"), "--override", "noequals"]) == 2


def test_xi_zero_recall_one(config_file, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", str(config_file), "--out", str(out), "--override", "xi=0"]) == 0
    assert all(m["recall"] == 1.0 for m in _metrics(out))


def test_repeat_is_byte_identical(config_file, tmp_path):
    for name in ("a", "b"):
        assert main(["run", "--config", str(config_file), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()


def test_seed_flag_changes_run(config_file, tmp_path):
    main(["run", "--config", str(config_file), "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["run", "--config", str(config_file), "--out", str(tmp_path / "b"), "--seed", "2"])
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() != (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_abort_exit_3_leaves_sentinel(config_file, tmp_path):
    out = tmp_path / "run"
    args = ["run", "--config", str(config_file), "--out", str(out),
            "--override", "attack.c=1e308", "--override", "defense.kind=geomed"]
    with pytest.warns(RuntimeWarning):
        assert main(args) == 3
    assert (out / "INCOMPLETE").exists()


def test_manifest_digest_stable_under_reordering(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(json.dumps(SMALL))
    b.write_text(json.dumps(dict(reversed(list(SMALL.items())))))
    assert config_digest(load_config(str(a))) == config_digest(load_config(str(b)))


def test_sweep_gamma_rows(config_file, tmp_path):
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", str(config_file), "--out", str(out), "--axis", "gamma",
                 "--values", "[0.01,0.03,0.05,0.07,0.10]", "--seeds", "0,1", "--override", "rounds=1"])
    assert code == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert len(rows) == 10
    assert all(r["status"] == "ok" for r in rows)
    assert (out / "gamma=0.01" / "seed=1" / "metrics.jsonl").exists()


def test_sweep_records_failing_cell(config_file, tmp_path):
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", str(config_file), "--out", str(out), "--axis", "gamma",
                 "--values", "0.05,0.0001", "--override", "rounds=1"])
    assert code == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert [r["status"] == "ok" for r in rows] == [True, False]


@pytest.mark.parametrize("values", ["", "[]"])
def test_sweep_empty_values_exit_2(config_file, tmp_path, values):
    assert main(["sweep", "--config", str(config_file), "--out", str(tmp_path / "s"),
                 "--axis", "gamma", "--values", values]) == 2


def test_sweep_unknown_axis_exit_2(config_file, tmp_path):
    assert main(["sweep", "--config", str(config_file), "--out", str(tmp_path / "s"),
                 "--axis", "nope", "--values", "1"]) == 2


def test_pretrain_checkpoint_reused_across_attacks(config_file, tmp_path):
    ckpt = tmp_path / "det.ckpt"
    assert main(["pretrain", "--config", str(config_file), "--out", str(ckpt)]) == 0
    fresh, reused = tmp_path / "fresh", tmp_path / "reused"
    assert main(["run", "--config", str(config_file), "--out", str(fresh)]) == 0
    assert main(["run", "--config", str(config_file), "--out", str(reused),
                 "--override", f"detector.checkpoint={ckpt}"]) == 0
    assert _metrics(fresh) == _metrics(reused)
    for attack in ("gaussian", "sign-flipping"):
        assert main(["run", "--config", str(config_file), "--out", str(tmp_path / attack),
                     "--override", f"attack.kind={attack}",
                     "--override", f"detector.checkpoint={ckpt}"]) == 0
