"""End-to-end runs of the ``bitflip`` command in-process."""

import json
from pathlib import Path

import numpy as np
import pytest

from bitflip.cli import EXIT_ATTACK_FAILED, EXIT_INVALID, EXIT_OK, main, ssa_work_items
from bitflip.modelfile import load_model
from bitflip.netcore import Dataset

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
BLOB = str(CONFIGS / "blob_demo.json")
PATCH = str(CONFIGS / "patch_demo.json")


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def blob_model_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("blob") / "model.json"
    assert run("train", "--config", BLOB, "--out", path) == EXIT_OK
    return path


def test_train_prints_acc_and_is_reproducible(blob_model_file, tmp_path, capsys):
    again = tmp_path / "m2.json"
    assert run("train", "--config", BLOB, "--out", again) == EXIT_OK
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["acc"] >= 95.0
    assert again.read_bytes() == blob_model_file.read_bytes()


def test_train_missing_csv_path(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    paths = {"train": str(tmp_path / "nope.csv"), "aux": "a", "validation": "v", "input_dim": 2, "n_classes": 4}
    cfg.write_text(json.dumps({"data": {"kind": "csv", "csv": paths}}))
    assert run("train", "--config", cfg, "--out", tmp_path / "m.json") == EXIT_INVALID
    assert "data.csv.train" in capsys.readouterr().err


def test_attack_ssa_and_eval_replay(blob_model_file, tmp_path):
    rep_path = tmp_path / "ssa.json"
    assert run("attack", "ssa", "--config", BLOB, "--model", blob_model_file, "--out", rep_path) == EXIT_OK
    rep = json.loads(rep_path.read_text())
    assert rep["success"] and rep["source_class"] == 3 and rep["target_class"] == 1
    assert rep["n_flip"] <= rep["k_used"]
    assert rep_path.with_suffix(".trace.csv").exists()

    ev = tmp_path / "eval.json"
    assert run("eval", "--config", BLOB, "--model", blob_model_file, "--flips", rep_path, "--out", ev) == EXIT_OK
    m = json.loads(ev.read_text())
    assert (m["asr"], m["pa_acc"], m["n_flip"]) == (rep["asr"], rep["pa_acc"], rep["n_flip"])


def test_eval_empty_flips_keeps_accuracy(blob_model_file, tmp_path):
    flips = tmp_path / "f.json"
    flips.write_text("[]")
    ev = tmp_path / "eval.json"
    assert run("eval", "--config", BLOB, "--model", blob_model_file, "--flips", flips, "--out", ev) == EXIT_OK
    m = json.loads(ev.read_text())
    assert m["pa_acc"] == m["acc"] and m["n_flip"] == 0


@pytest.mark.parametrize(
    "flips, msg",
    [
        ([{"row": 0, "col": 0, "bit": 1}, {"row": 0, "col": 0, "bit": 1}], "duplicate"),
        ([{"row": 9, "col": 0, "bit": 0}], "outside"),
        ([{"row": 0, "col": 0}], "expected"),
    ],
)
def test_eval_rejects_bad_flip_lists(blob_model_file, tmp_path, capsys, flips, msg):
    f = tmp_path / "f.json"
    f.write_text(json.dumps(flips))
    assert run("eval", "--config", BLOB, "--model", blob_model_file, "--flips", f, "--out", tmp_path / "e.json") == EXIT_INVALID
    assert msg in capsys.readouterr().err


def test_corrupted_model_names_field(blob_model_file, tmp_path, capsys):
    doc = json.loads(blob_model_file.read_text())
    del doc["output"]["delta"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert run("attack", "ssa", "--config", BLOB, "--model", bad, "--out", tmp_path / "r.json") == EXIT_INVALID
    assert "model.output.delta" in capsys.readouterr().err


def test_attack_failure_exit_code(blob_model_file, tmp_path):
    cfg = tmp_path / "c.json"
    doc = json.loads(Path(BLOB).read_text())
    doc["search"] = {"k_init": 0, "k_searches": 1, "lambda_searches": 1}
    cfg.write_text(json.dumps(doc))
    assert run("attack", "ssa", "--config", cfg, "--model", blob_model_file, "--out", tmp_path / "r.json") == EXIT_ATTACK_FAILED
    assert json.loads((tmp_path / "r.json").read_text())["success"] is False


def test_oracle_linear(tmp_path, capsys):
    out = tmp_path / "o.json"
    assert run("oracle", "--out", out) == EXIT_OK
    doc = json.loads(out.read_text())
    assert {"oracle_value", "admm_value", "gap", "admm_feasible"} <= set(doc)
    assert doc["admm_feasible"] is True
    assert doc["gap"] >= 0


def test_oracle_k_zero_and_guard(blob_model_file, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"oracle": {"instance": "ssa_subset", "V": 10, "k": 0, "source": 3, "target": 1}}))
    out = tmp_path / "o.json"
    assert run("oracle", "--config", cfg, "--model", blob_model_file, "--out", out) == EXIT_OK
    assert json.loads(out.read_text())["gap"] == 0.0
    cfg.write_text(json.dumps({"oracle": {"V": 30}}))
    assert run("oracle", "--config", cfg, "--out", out) == EXIT_INVALID
    assert "V=30" in capsys.readouterr().err


def test_out_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("BITFLIP_OUT_DIR", str(tmp_path / "outs"))
    assert run("oracle") == EXIT_OK
    assert (tmp_path / "outs" / "oracle.json").exists()


def test_gen_data_writes_splits(tmp_path):
    assert run("gen-data", "--config", BLOB, "--out", tmp_path) == EXIT_OK
    assert sorted(p.name for p in tmp_path.iterdir()) == ["aux.csv", "train.csv", "validation.csv"]


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"admm": {"etaa": 1}}))
    assert run("oracle", "--config", cfg) == EXIT_INVALID
    assert "admm.etaa" in capsys.readouterr().err


def test_ssa_work_items_cover_each_target():
    val = Dataset(np.arange(8.0)[:, None], [0, 0, 1, 1, 2, 2, 3, 3], 4)
    work = ssa_work_items(None, val, [0, 1], 3, seed=0)
    assert [t for _, _, t in work] == [0, 0, 0, 1, 1, 1]
    assert all(s != t for _, s, t in work)
    assert ssa_work_items(None, val, [0, 1], 3, seed=0)[0][0] == work[0][0]


def test_campaign_tsa_single_target(tmp_path):
    model = tmp_path / "patch.json"
    assert run("train", "--config", PATCH, "--out", model) == EXIT_OK
    cfg = tmp_path / "c.json"
    doc = json.loads(Path(PATCH).read_text())
    doc["campaign"]["targets"] = [0]
    cfg.write_text(json.dumps(doc))
    out = tmp_path / "camp.json"
    assert run("campaign", "--config", cfg, "--model", model, "--out", out) == EXIT_OK
    summary = json.loads(out.read_text())
    (rep,) = summary["attacks"]
    assert rep["attack_type"] == "tsa" and rep["aux_asr"] is not None and "asr" in rep
    assert rep["trigger"]["mask_spec"] == {"patch": 2, "corner": "bottom-right"}
    assert out.with_suffix(".csv").exists()
    assert load_model(model).input_dim == 64
