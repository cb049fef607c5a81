"""Operator-surface behavior: subcommand wiring, exit codes, config
precedence, deterministic synthesis, stem-stable inference, and the
self-check entry point. Everything runs through main(argv) in process;
one test execs the installed console script to prove the wiring."""

import hashlib
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from cosal import pnm
from cosal.cli import main

TINY_CFG = """\
[model]
d = 8
heads = 2
ffn_multiplier = 2
layers_refine = 1
layers_group = 1
layers_fuse = 1
stage_channels = 4,4,8,8
proj_dim = 8

[train]
group_size = 3
aux_size = 2
epochs = 2
eval_every = 0

[synth]
n_groups = 2
val_groups = 1
aux_count = 4
"""


@pytest.fixture(scope="module")
def tree(tmp_path_factory):
    """One synthesized dataset plus one short training run, shared by the
    read-only tests below."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    data = root / "data"
    run = root / "run"
    assert main(["synth", "--out", str(data), "--config", str(cfg), "--seed", "0"]) == 0
    assert main(["train", "--data", str(data), "--out", str(run), "--config", str(cfg)]) == 0
    return {"root": root, "cfg": cfg, "data": data, "run": run}


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def test_help_lists_flags_with_defaults(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for needle in ("--lr", "(default: 0.0001)", "--beta1", "(default: 0.9)", "--epochs", "--resume"):
        assert needle in out


def test_unknown_subcommand_is_usage_exit(capsys):
    assert main(["bogus"]) == 1
    assert "invalid choice" in capsys.readouterr().err


def test_synth_writes_tree_counts_and_echo(tree, capsys):
    data = tree["data"]
    assert (data / "train" / "group_000" / "img" / "im0.ppm").is_file()
    assert (data / "train" / "aux" / "gt").is_dir()
    assert (data / "val" / "group_002" / "img" / "im2.ppm").is_file()
    assert (data / "effective_config.cfg").is_file()
    echoed = (data / "effective_config.cfg").read_text()
    assert "n_groups = 2" in echoed
    assert "group_size = 3" in echoed


def test_synth_same_seed_gives_identical_trees(tmp_path, tree):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["synth", "--config", str(tree["cfg"]), "--seed", "4"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert _tree_digest(a) == _tree_digest(b)
    assert main(["synth", "--config", str(tree["cfg"]), "--seed", "5", "--out", str(tmp_path / "c")]) == 0
    assert _tree_digest(a) != _tree_digest(tmp_path / "c")


def test_unknown_config_key_names_the_key(tmp_path, capsys):
    rc = main(["synth", "--out", str(tmp_path / "x"), "--set", "model.learning=3"])
    assert rc == 1
    assert "learning" in capsys.readouterr().err


def test_flag_beats_config_and_echo_shows_the_final_value(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY_CFG.replace("[train]\n", "[train]\nlr = 0.003\n"))
    out = tmp_path / "out"
    assert main(["synth", "--out", str(out), "--config", str(cfg)]) == 0
    assert "lr = 0.003" in (out / "effective_config.cfg").read_text()
    out2 = tmp_path / "out2"
    assert main(["synth", "--out", str(out2), "--config", str(cfg), "--set", "train.lr=0.5"]) == 0
    assert "lr = 0.5" in (out2 / "effective_config.cfg").read_text()


def test_cosf_seed_env_is_lowest_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("COSF_SEED", "5")
    out = tmp_path / "env"
    assert main(["synth", "--out", str(out), "--set", "synth.n_groups=1", "--set", "synth.aux_count=0"]) == 0
    assert "seed = 5" in (out / "effective_config.cfg").read_text()
    out2 = tmp_path / "flag"
    assert main(["synth", "--out", str(out2), "--seed", "1", "--set", "synth.n_groups=1", "--set", "synth.aux_count=0"]) == 0
    text = (out2 / "effective_config.cfg").read_text()
    assert "seed = 1" in text.split("[synth]")[1]


def test_train_writes_checkpoint_csv_and_echo(tree, capsys):
    run = tree["run"]
    assert (run / "checkpoint.cosf").is_file()
    assert (run / "loss_log.csv").is_file()
    assert (run / "effective_config.cfg").is_file()
    header = (run / "loss_log.csv").read_text().splitlines()[0]
    assert header == "step,l_c,l_s,l_ct,l_single,l_group,total"


def test_infer_writes_one_map_per_stem(tree, tmp_path, capsys):
    preds = tmp_path / "preds"
    rc = main(
        ["infer", "--checkpoint", str(tree["run"] / "checkpoint.cosf"), "--images", str(tree["data"] / "val" / "group_002"), "--out", str(preds)]
    )
    assert rc == 0
    assert sorted(p.name for p in preds.glob("*.pgm")) == ["im0.pgm", "im1.pgm", "im2.pgm"]
    assert "wrote 3 maps" in capsys.readouterr().out


def test_infer_is_stable_under_a_shuffled_listing(tree, tmp_path):
    """Renaming files reshuffles the sorted input order; each prediction
    must still follow its image, not its position."""
    src = tree["data"] / "val" / "group_002" / "img"
    shuffled = tmp_path / "shuffled"
    shuffled.mkdir()
    renames = {"im0.ppm": "c.ppm", "im1.ppm": "a.ppm", "im2.ppm": "b.ppm"}
    for old, new in renames.items():
        shutil.copyfile(src / old, shuffled / new)
    base = tmp_path / "base_preds"
    moved = tmp_path / "shuffled_preds"
    ckpt = str(tree["run"] / "checkpoint.cosf")
    assert main(["infer", "--checkpoint", ckpt, "--images", str(src), "--out", str(base)]) == 0
    assert main(["infer", "--checkpoint", ckpt, "--images", str(shuffled), "--out", str(moved)]) == 0
    for old, new in renames.items():
        want = (base / old.replace(".ppm", ".pgm")).read_bytes()
        got = (moved / new.replace(".ppm", ".pgm")).read_bytes()
        assert got == want, f"{new} should carry {old}'s map"


def test_infer_needs_at_least_two_images(tree, tmp_path, capsys):
    single = tmp_path / "single"
    single.mkdir()
    shutil.copyfile(tree["data"] / "val" / "group_002" / "img" / "im0.ppm", single / "im0.ppm")
    rc = main(["infer", "--checkpoint", str(tree["run"] / "checkpoint.cosf"), "--images", str(single), "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "at least two" in capsys.readouterr().err


def test_infer_missing_checkpoint_is_an_io_error(tree, tmp_path, capsys):
    rc = main(["infer", "--checkpoint", str(tmp_path / "none.cosf"), "--images", str(tree["data"] / "val" / "group_002"), "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "cannot read checkpoint" in capsys.readouterr().err


def test_infer_rejects_wrong_image_size(tree, tmp_path, capsys):
    small = tmp_path / "small"
    small.mkdir()
    img = np.full((3, 32, 32), 0.5, dtype=np.float64)
    pnm.write_image(small / "a.ppm", img)
    pnm.write_image(small / "b.ppm", img)
    rc = main(["infer", "--checkpoint", str(tree["run"] / "checkpoint.cosf"), "--images", str(small), "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "expects 64x64" in capsys.readouterr().err


def test_eval_perfect_prediction_scores_perfectly(tree, tmp_path, capsys):
    gt = tree["data"] / "val" / "group_002" / "gt"
    out = tmp_path / "scores"
    assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["mae"] == 0.0
    for key in ("f_max", "s_alpha", "e_max"):
        assert abs(report[key] - 1.0) <= 1e-6, key
    assert sorted(report) == ["e_max", "f_max", "mae", "n_images", "s_alpha", "warnings"]
    csv_head = (out / "pr_curve.csv").read_text().splitlines()[0]
    assert csv_head == "threshold,precision,recall"


def test_eval_reports_mismatched_stems_with_count(tree, tmp_path, capsys):
    gt = tree["data"] / "val" / "group_002" / "gt"
    preds = tmp_path / "partial"
    preds.mkdir()
    shutil.copyfile(gt / "im0.pgm", preds / "im0.pgm")
    shutil.copyfile(gt / "im1.pgm", preds / "renamed.pgm")
    assert main(["eval", "--pred", str(preds), "--gt", str(gt), "--out", str(tmp_path / "s")]) == 0
    out = capsys.readouterr().out
    # one orphan prediction plus the two ground truths it left unmatched
    assert "3 warnings:" in out
    assert "renamed" in out


def test_eval_missing_pred_dir_is_usage(tree, tmp_path, capsys):
    rc = main(["eval", "--pred", str(tmp_path / "nope"), "--gt", str(tree["data"] / "val" / "group_002"), "--out", str(tmp_path / "s")])
    assert rc == 1


def test_selfcheck_passes_and_names_every_suite(capsys):
    assert main(["selfcheck", "--grad-instances", "1"]) == 0
    out = capsys.readouterr().out
    for needle in (
        "grad/matmul",
        "grad/loss/contrastive_group",
        "group-order-invariance",
        "position-injection-breaks-invariance",
        "mask-identities",
        "metric-oracles",
        "all 32 properties passed",
    ):
        assert needle in out


def test_selfcheck_mutations_exit_3_with_named_property(capsys):
    rc = main(["selfcheck", "--mutate", "xor-to-or"])
    captured = capsys.readouterr()
    assert rc == 3
    assert "mask-identities" in captured.err
    assert "m_s=" in captured.err
    rc = main(["selfcheck", "--mutate", "pe-in-group"])
    captured = capsys.readouterr()
    assert rc == 3
    assert "group-order-invariance" in captured.err


def test_selfcheck_rejects_unknown_mutation(capsys):
    assert main(["selfcheck", "--mutate", "everything"]) == 1
    assert "pe-in-group" in capsys.readouterr().err


def test_selfcheck_rejects_bad_instance_count(capsys):
    assert main(["selfcheck", "--grad-instances", "0"]) == 1


def test_console_script_is_wired():
    proc = subprocess.run(["cosal", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "synth" in proc.stdout and "selfcheck" in proc.stdout
