import json

import pytest

from conftest import tiny_config
from hapfuse.analysis import read_eval_tsv
from hapfuse.cli import main
from hapfuse.storage import directory_digest


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.ini"
    cfg_path.write_text(tiny_config(eval={"trials": 2, "max_steps": 16}).to_text())
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(root / "data"),
                 "-n", "2", "--seed", "3"]) == 0
    return root, cfg_path


@pytest.mark.parametrize("args,expected", [
    (["0", "0", "0"], "0.0000"),
    (["1", "1", "1"], "1.0000"),
    (["2", "0", "5"], "2.6000"),
    (["1", "0", "0", "--weights", "0.5", "0.25", "0.25"], "0.5000"),
])
def test_metric_command(capsys, args, expected):
    assert main(["metric", *args]) == 0
    assert capsys.readouterr().out.strip() == expected


def test_metric_negative_input_fails(capsys):
    assert main(["metric", "--", "-1", "0", "0"]) != 0
    assert "non-negative" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[modle]\nD = 8\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "modle" in capsys.readouterr().err
    bad.write_text("[model]\nDee = 8\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "model.Dee" in capsys.readouterr().err


def test_usage_and_runtime_exit_codes(tmp_path, capsys):
    assert main([]) == 1
    assert main(["train", "--mode", "bogus"]) == 1
    assert main(["eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert all(line.startswith("hapfuse") for line in err)


def test_gen_data_is_reproducible(workspace, tmp_path):
    root, cfg_path = workspace
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "again"),
                 "-n", "2", "--seed", "3"]) == 0
    assert directory_digest(root / "data") == directory_digest(tmp_path / "again")
    meta = json.loads((root / "data" / "run.meta").read_text())
    assert meta["command"] == "gen-data" and meta["seeds"] == {"world": 3}


def test_train_eval_plot_pipeline(workspace, tmp_path):
    root, cfg_path = workspace
    for run in ("a", "b"):
        assert main(["train", "--config", str(cfg_path), "--data", str(root / "data"),
                     "--out", str(tmp_path / run), "--mode", "hierarchical"]) == 0
    ckpt = tmp_path / "a" / "policy.ckpt"
    assert ckpt.read_bytes() == (tmp_path / "b" / "policy.ckpt").read_bytes()
    assert (tmp_path / "a" / "metrics.tsv").read_bytes() == (tmp_path / "b" / "metrics.tsv").read_bytes()
    assert (tmp_path / "a" / "loss.png").exists()

    for run in ("ea", "eb"):
        assert main(["eval", "--checkpoint", str(ckpt), "--out", str(tmp_path / run)]) == 0
    rows = read_eval_tsv(tmp_path / "ea" / "eval.tsv")
    assert len(rows) == 1 and int(rows[0]["n_trials"]) == 2
    for name in ("eval.tsv", "eval.json", "eval.png"):
        assert (tmp_path / "ea" / name).read_bytes() == (tmp_path / "eb" / name).read_bytes()

    assert main(["generalize", "--checkpoint", str(ckpt), "--out", str(tmp_path / "gen"),
                 "--variants", "0,4", "--trials", "1"]) == 0
    assert len(read_eval_tsv(tmp_path / "gen" / "generalization.tsv")) == 2

    assert main(["mi", str(ckpt), "--out", str(tmp_path / "mi"), "--rollouts", "3"]) == 0
    assert (tmp_path / "mi" / "mi.tsv").exists()

    assert main(["plot", "--input", str(tmp_path), "--out", str(tmp_path / "figs")]) == 0
    pngs = sorted(p.name for p in (tmp_path / "figs").glob("*.png"))
    assert "loss_curves.png" in pngs and "ea_eval.png" in pngs and "mi_mi.png" in pngs


def test_expert_eval(tmp_path, workspace):
    _, cfg_path = workspace
    assert main(["eval", "--expert", "--config", str(cfg_path), "--out", str(tmp_path),
                 "--trials", "1"]) == 0
    assert read_eval_tsv(tmp_path / "eval.tsv")[0]["method"] == "expert"


def test_pretrain_then_train(tmp_path, workspace):
    root, cfg_path = workspace
    cfg = tiny_config(train={"pretrain_steps": 3})
    path = tmp_path / "c.ini"
    path.write_text(cfg.to_text())
    assert main(["pretrain", "--config", str(path), "--data", str(root / "data"),
                 "--out", str(tmp_path / "pre")]) == 0
    assert main(["train", "--config", str(path), "--data", str(root / "data"), "--out",
                 str(tmp_path / "t"), "--init-encoders", str(tmp_path / "pre" / "encoders.ckpt")]) == 0


def test_ablate_single_mode(tmp_path, workspace):
    root, cfg_path = workspace
    assert main(["ablate", "--config", str(cfg_path), "--data", str(root / "data"),
                 "--out", str(tmp_path), "--modes", "hierarchical,concat_ps", "--trials", "1"]) == 0
    rows = read_eval_tsv(tmp_path / "ablation.tsv")
    assert [r["method"] for r in rows] == ["hierarchical", "concat_ps"]
    flags = json.loads((tmp_path / "ablation_flags.json").read_text())
    assert set(flags["ordering"]) == {"hierarchical<concat_ps"}
