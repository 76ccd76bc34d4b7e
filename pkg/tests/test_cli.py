import dataclasses
import json

import numpy as np
import pytest

from mmintent import cli, data
from mmintent.trainer import Checkpoint, TrainConfig

SPEC_TEXT = """\
num_classes = 4
n_train = 48
n_val = 16
n_test = 16
latent_dim = 6
d_visual = 4
d_acoustic = 3
vocab_size = 24
text_len = 6
av_len = 5
min_text_len = 3
min_av_len = 2
seed = 2
"""
CONFIG = TrainConfig(lr=3e-3, batch_size=16, max_epochs=4, patience=10, d_model=8, n_heads=2,
                     n_enc_layers=1, n_coarse_layers=1, seeds=(1,))


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.txt").write_text(SPEC_TEXT)
    (root / "config.txt").write_text(CONFIG.to_text())
    assert run("gen", "--spec", root / "spec.txt", "--out", root / "data") == 0
    assert run("train", "--config", root / "config.txt", "--data", root / "data", "--out", root / "run") == 0
    return root


def read_tsv(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    header = lines[0].split("\t")
    return [dict(zip(header, l.split("\t"))) for l in lines[1:]]


def test_gen_writes_dataset_and_manifest(workspace):
    spec, splits = data.load_dataset(workspace / "data")
    assert spec.num_classes == 4 and spec.seed == 2 and len(splits["train"]) == 48
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert manifest["command"] == "gen" and manifest["seeds"] == [2]


def test_gen_preset_with_seed_override(tmp_path):
    assert run("gen", "--preset", "clean", "--seed", "9", "--out", tmp_path) == 0
    spec, _ = data.load_dataset(tmp_path)
    assert spec == dataclasses.replace(data.PRESETS["clean"], seed=9)


def test_gen_is_byte_stable(workspace, tmp_path):
    assert run("gen", "--spec", workspace / "spec.txt", "--out", tmp_path) == 0
    for name in ("train.bin", "val.bin", "test.bin"):
        assert (tmp_path / name).read_bytes() == (workspace / "data" / name).read_bytes()


@pytest.mark.parametrize("argv", [
    ["gen", "--out", "x"],
    ["gen", "--spec", "/nonexistent/spec.txt", "--out", "x"],
    ["train", "--data", "/nonexistent"],
    ["frobnicate"],
    ["eval", "--data", "x"],
])
def test_usage_errors_exit_2(argv, tmp_path, capsys):
    argv = [a if a != "x" else str(tmp_path / "x") for a in argv]
    assert cli.main(argv) == 2
    assert capsys.readouterr().err


def test_unknown_spec_or_config_key_exits_2(workspace, tmp_path, capsys):
    (tmp_path / "bad_spec.txt").write_text("num_clases = 3\n")
    assert run("gen", "--spec", tmp_path / "bad_spec.txt", "--out", tmp_path / "d") == 2
    (tmp_path / "bad.txt").write_text("learning_rate = 0.1\n")
    assert run("train", "--config", tmp_path / "bad.txt", "--data", workspace / "data",
               "--out", tmp_path / "r") == 2
    assert "learning_rate" in capsys.readouterr().err


def test_numeric_failure_exits_3(workspace, tmp_path):
    spec, splits = data.load_dataset(workspace / "data")
    train = splits["train"]
    visual = train.visual.copy()
    visual[3, 0, 1] = np.inf
    splits["train"] = dataclasses.replace(train, visual=visual, _masks={})
    data.save_dataset(splits, spec, tmp_path / "bad")
    assert run("train", "--config", workspace / "config.txt", "--data", tmp_path / "bad",
               "--out", tmp_path / "r") == 3


def test_train_outputs(workspace):
    out = workspace / "run"
    for name in ("train.log", "best.ckpt", "last.ckpt", "epochs.tsv", "results.tsv", "manifest.json"):
        assert (out / name).is_file()
    log = read_tsv(out / "train.log")
    assert len(log) == 4 * 3
    for r in log:
        parts = [float(r[k]) for k in ("l_text", "l_vis", "l_aud", "l_fine")]
        assert abs(float(r["l_contrastive"]) - sum(parts)) <= 1e-12
    rows = read_tsv(out / "results.tsv")
    assert [r["split"] for r in rows] == ["val", "test"]
    assert "# lr = 0.003" in (out / "results.tsv").read_text()


def test_eval_on_val_reproduces_best_val_wf1(workspace, capsys):
    capsys.readouterr()
    assert run("eval", "--checkpoint", workspace / "run" / "best.ckpt", "--data", workspace / "data",
               "--split", "val") == 0
    printed = dict(tok.split(" ") for tok in capsys.readouterr().out.strip().split("\t"))
    best = Checkpoint.load(workspace / "run" / "best.ckpt").meta["best_val_wf1"]
    assert float(printed["WF1"]) == best
    val_row = read_tsv(workspace / "run" / "results.tsv")[0]
    assert float(val_row["WF1"]) == best


def test_identical_train_runs_are_byte_identical(workspace, tmp_path):
    assert run("train", "--config", workspace / "config.txt", "--data", workspace / "data",
               "--out", tmp_path) == 0
    for name in ("train.log", "best.ckpt", "last.ckpt", "epochs.tsv", "results.tsv"):
        assert (tmp_path / name).read_bytes() == (workspace / "run" / name).read_bytes(), name


def test_resume_through_cli(workspace, tmp_path):
    short = CONFIG.replace(max_epochs=2)
    (tmp_path / "short.txt").write_text(short.to_text())
    assert run("train", "--config", tmp_path / "short.txt", "--data", workspace / "data", "--out", tmp_path) == 0
    assert run("train", "--config", workspace / "config.txt", "--data", workspace / "data", "--out", tmp_path,
               "--resume", tmp_path / "last.ckpt") == 0
    for name in ("train.log", "last.ckpt", "best.ckpt"):
        assert (tmp_path / name).read_bytes() == (workspace / "run" / name).read_bytes(), name


def test_attn_stats(workspace, tmp_path):
    assert run("attn-stats", "--checkpoint", workspace / "run" / "best.ckpt", "--data", workspace / "data",
               "--out", tmp_path) == 0
    rows = read_tsv(tmp_path / "attn_stats.tsv")
    assert len(rows) == 16 * 5
    sums = {}
    for r in rows:
        key = (r["instance"], r["stage"])
        sums[key] = sums.get(key, 0.0) + float(r["weight"])
    assert len(sums) == 32
    np.testing.assert_allclose(list(sums.values()), 1.0, atol=1e-6)
    summary = read_tsv(tmp_path / "attn_summary.tsv")
    assert [r["stream"] for r in summary] == ["text", "visual", "acoustic", "fine", "coarse"]
    for r in summary:
        q = [float(r[k]) for k in ("min", "q1", "median", "q3", "max")]
        assert q == sorted(q) and 0.0 <= q[0] and q[-1] <= 1.0


def test_dump_embeddings(workspace, tmp_path, capsys):
    assert run("dump-embeddings", "--checkpoint", workspace / "run" / "best.ckpt", "--data", workspace / "data",
               "--out", tmp_path) == 0
    rows = read_tsv(tmp_path / "embeddings.tsv")
    _, splits = data.load_dataset(workspace / "data")
    present = np.unique(splits["test"].labels).size
    assert len(rows) == 16 + present
    protos = np.array([[float(v) for k, v in r.items() if k.startswith("e")] for r in rows
                       if r["kind"] == "prototype"])
    np.testing.assert_allclose(np.linalg.norm(protos, axis=1), 1.0, atol=1e-12)
    assert "silhouette" in capsys.readouterr().out


def test_ablate_and_rerun(workspace, tmp_path):
    quick = CONFIG.replace(max_epochs=1)
    (tmp_path / "quick.txt").write_text(quick.to_text())
    assert run("ablate", "--config", tmp_path / "quick.txt", "--data", workspace / "data",
               "--seeds", "0,1", "--out", tmp_path / "a") == 0
    rows = read_tsv(tmp_path / "a" / "results.tsv")
    assert len(rows) == 8
    summary = read_tsv(tmp_path / "a" / "summary.tsv")
    assert [r["mask"] for r in summary] == ["cls", "cls+contrastive", "cls+proto", "cls+contrastive+proto"]
    assert run("rerun", "--manifest", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b") == 0
    for name in ("results.tsv", "summary.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_rerun_train_and_gen(workspace, tmp_path):
    assert run("rerun", "--manifest", workspace / "run" / "manifest.json", "--out", tmp_path / "t") == 0
    assert (tmp_path / "t" / "results.tsv").read_bytes() == (workspace / "run" / "results.tsv").read_bytes()
    assert run("rerun", "--manifest", workspace / "data" / "manifest.json", "--out", tmp_path / "g") == 0
    assert (tmp_path / "g" / "train.bin").read_bytes() == (workspace / "data" / "train.bin").read_bytes()


def test_config_command_prints_parseable_defaults(capsys):
    assert cli.main(["config"]) == 0
    assert TrainConfig.from_text(capsys.readouterr().out) == TrainConfig()
