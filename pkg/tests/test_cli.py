import json

import numpy as np
import pytest
from scipy.stats import chisquare

from modest.cli import digest, main, weight_histogram


def run(*argv):
    return main([str(a) for a in argv])


def snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("gen-synthetic", "--out", out, "--num-users", 60, "--num-items", 40,
               "--dim-v", 4, "--dim-t", 4, "--interactions-per-user", 8, "--seed", 1) == 0
    return out


def data_args(d):
    return ["--data", d / "interactions.tsv", "--items", d / "items.tsv",
            "--features", f"v={d / 'features_v.mdft'}", "--features", f"t={d / 'features_t.mdft'}"]


SMALL = ["--dim", 4, "--shared-dim", 4, "--epochs-max", 3, "--batch-size", 64, "--seed", 7]


def test_gen_synthetic_outputs(synth):
    names = {p.name for p in synth.iterdir()}
    assert {"interactions.tsv", "items.tsv", "spec.toml", "shifted.tsv", "features_v.mdft",
            "features_t.mdft", "ood_truth.tsv", "iid_truth.tsv", "manifest.json"} <= names


def test_manifest_digests(synth):
    manifest = json.loads((synth / "manifest.json").read_text())
    assert manifest["command"] == "gen-synthetic" and manifest["seed"] == 1
    assert all(not k.startswith("time") for k in manifest)


def test_train_twice_is_byte_identical(synth, tmp_path):
    before = snapshot(synth)
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("train", *data_args(synth), *SMALL, "--lambda", 0.2, "--out", out) == 0
    for name in ("train_log.tsv", "sample_weights.tsv", "checkpoint.mdck", "config.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert snapshot(synth) == before
    manifest = json.loads((a / "manifest.json").read_text())
    for path, h in manifest["inputs"].items():
        assert digest(path) == h


def test_train_log_columns(synth, tmp_path):
    assert run("train", *data_args(synth), *SMALL, "--out", tmp_path) == 0
    lines = (tmp_path / "train_log.tsv").read_text().splitlines()
    header = lines[0].split("\t")
    assert "epoch" in header and len(lines) == 4
    assert all(len(line.split("\t")) == len(header) for line in lines[1:])


def test_dump_mask(synth, tmp_path):
    assert run("train", *data_args(synth), *SMALL, "--lambda", 0.1, "--dump-mask", "--out", tmp_path) == 0
    rows = (tmp_path / "mask.tsv").read_text().splitlines()
    assert len(rows) >= 3


def test_missing_feature_file_exits_2(synth, tmp_path, capsys):
    argv = ["--data", synth / "interactions.tsv", "--items", synth / "items.tsv",
            "--features", f"v={synth / 'features_v.mdft'}", "--features", f"t={tmp_path / 'gone.mdft'}"]
    assert run("train", *argv, *SMALL, "--out", tmp_path / "o") == 2
    assert "'t'" in capsys.readouterr().err


def test_vbpr_without_features_exits_2(synth, tmp_path):
    assert run("train", "--data", synth / "interactions.tsv", *SMALL, "--out", tmp_path) == 2


@pytest.mark.parametrize("extra", [["--lambda", "-1"], ["--patience", "0"], ["--bogus", "1"],
                                   ["--hsic-mode", "nope"]])
def test_bad_config_exits_1(synth, tmp_path, extra):
    assert run("train", *data_args(synth), *SMALL, *extra, "--out", tmp_path) == 1


def test_config_file_then_flags(synth, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("lambda = 0.3\nepochs_max = 2\n")
    assert run("train", *data_args(synth), *SMALL[:6], "--config", cfg, "--epochs-max", 1,
               "--out", tmp_path / "o") == 0
    text = (tmp_path / "o" / "config.txt").read_text()
    assert "lam = 0.3" in text and "epochs_max = 1" in text


def test_no_command_exits_1():
    assert run() == 1


# -- eval ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(synth, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("train", *data_args(synth), *SMALL, "--out", out) == 0
    return out


def test_eval_writes_metrics(synth, trained, tmp_path, capsys):
    assert run("eval", *data_args(synth), "--checkpoint", trained / "checkpoint.mdck",
               "--k", "5,10", "--per-user", "--out", tmp_path) == 0
    lines = (tmp_path / "metrics.tsv").read_text().splitlines()
    assert lines[0] == "split\tk\trecall\tndcg\tprecision\tusers"
    assert [line.split("\t")[1] for line in lines[1:]] == ["5", "10"]
    assert (tmp_path / "per_user.tsv").exists()
    assert "Recall" in capsys.readouterr().out


def test_eval_k_zero_exits_1(synth, trained, tmp_path):
    assert run("eval", *data_args(synth), "--checkpoint", trained / "checkpoint.mdck",
               "--k", "0", "--out", tmp_path) == 1


def test_eval_data_mismatch_exits_2(synth, trained, tmp_path):
    # same shape, different ids: caught by the run's users.tsv / items.tsv
    renamed = tmp_path / "renamed"
    renamed.mkdir()
    for name in ("interactions.tsv", "items.tsv"):
        text = (synth / name).read_text()
        (renamed / name).write_text("\n".join("x" + line for line in text.splitlines()) + "\n")
    for name in ("features_v.mdft", "features_t.mdft"):
        (renamed / name).write_bytes((synth / name).read_bytes())
    ckpt = trained / "checkpoint.mdck"
    assert run("eval", *data_args(renamed), "--checkpoint", ckpt, "--out", tmp_path / "o") == 2
    # fewer users than the checkpoint
    short = tmp_path / "short"
    short.mkdir()
    lines = (synth / "interactions.tsv").read_text().splitlines()
    (short / "interactions.tsv").write_text("".join(l + "\n" for l in lines if not l.startswith("u0\t")))
    for name in ("items.tsv", "features_v.mdft", "features_t.mdft"):
        (short / name).write_bytes((synth / name).read_bytes())
    assert run("eval", *data_args(short), "--checkpoint", ckpt, "--out", tmp_path / "p") == 2


def test_eval_missing_checkpoint_exits_2(synth, tmp_path):
    assert run("eval", *data_args(synth), "--checkpoint", tmp_path / "x.mdck", "--out", tmp_path) == 2


def test_memorized_train_split_scores_one(tmp_path):
    # MF whose scores are exactly the training matrix: every train item ranks first
    from modest.backbone import BackboneParams, save_checkpoint
    data = tmp_path / "inter.tsv"
    pairs = [("u0", "a"), ("u0", "b"), ("u1", "c"), ("u2", "a"), ("u2", "d")]
    data.write_text("".join(f"{u}\t{i}\ttrain\n" for u, i in pairs))
    items = ["a", "b", "c", "d"]
    R = np.zeros((3, 4))
    for u, i in pairs:
        R[int(u[1]), items.index(i)] = 1.0
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    save_checkpoint(BackboneParams("mf", np.eye(3), R.T.copy()), run_dir / "checkpoint.mdck")
    assert run("eval", "--data", data, "--checkpoint", run_dir / "checkpoint.mdck", "--split", "train",
               "--exclude", "none", "--k", "2", "--out", tmp_path / "o") == 0
    row = (tmp_path / "o" / "metrics.tsv").read_text().splitlines()[1].split("\t")
    assert float(row[2]) == 1.0 and float(row[3]) == 1.0


# -- sweep ---------------------------------------------------------------------

def test_sweep_rows_and_single_run_match(synth, tmp_path):
    assert run("sweep-lambda", *data_args(synth), *SMALL, "--lambdas", "0,0.1,0.3,0.5",
               "--out", tmp_path / "s") == 0
    rows = (tmp_path / "s" / "sweep.tsv").read_text().splitlines()
    assert len(rows) == 5 and all(r.split("\t")[1] == "ok" for r in rows[1:])
    assert run("train", *data_args(synth), *SMALL, "--lambda", 0, "--out", tmp_path / "t") == 0
    assert ((tmp_path / "s" / "lambda_0" / "train_log.tsv").read_bytes()
            == (tmp_path / "t" / "train_log.tsv").read_bytes())


def test_sweep_negative_lambda_exits_1(synth, tmp_path):
    assert run("sweep-lambda", *data_args(synth), *SMALL, "--lambdas", "0,-0.1", "--out", tmp_path) == 1


# -- weights-hist ----------------------------------------------------------------

def write_weights(path, values):
    path.write_text("".join(f"i{k}\t{v!r}\n" for k, v in enumerate(values)))
    return path


def test_hist_all_ones_single_bin(tmp_path):
    w = write_weights(tmp_path / "w.tsv", [1.0] * 50)
    assert run("weights-hist", "--weights", w, "--out", tmp_path / "o") == 0
    counts = [int(r.split("\t")[2]) for r in (tmp_path / "o" / "weights_hist.tsv").read_text().splitlines()[1:]]
    assert len(counts) == 20 and sorted(counts)[-1] == 50 and sum(counts) == 50


def test_hist_uniform_is_flat():
    w = np.random.default_rng(0).uniform(0, 2, 20_000)
    _, counts = weight_histogram(w, 2.0, 20)
    assert counts.sum() == 20_000
    assert chisquare(counts).pvalue > 0.01


def test_hist_items_with(tmp_path):
    w = write_weights(tmp_path / "w.tsv", [0.1, 1.9, 1.9])
    keep = tmp_path / "keep.tsv"
    keep.write_text("i0\n")
    assert run("weights-hist", "--weights", w, "--items-with", keep, "--out", tmp_path / "o") == 0
    counts = [int(r.split("\t")[2]) for r in (tmp_path / "o" / "weights_hist.tsv").read_text().splitlines()[1:]]
    assert counts[1] == 1 and sum(counts) == 1


def test_hist_missing_file_exits_2(tmp_path):
    assert run("weights-hist", "--weights", tmp_path / "nope.tsv", "--out", tmp_path / "o") == 2


# -- split / ood-split / mix ---------------------------------------------------

def test_split_command(tmp_path):
    rng = np.random.default_rng(0)
    data = tmp_path / "raw.tsv"
    data.write_text("".join(f"u{u}\ti{i}\n" for u in range(10) for i in rng.choice(30, 10, replace=False)))
    before = data.read_bytes()
    assert run("split", "--data", data, "--out", tmp_path / "o", "--seed", 3) == 0
    tags = [line.split("\t")[2] for line in (tmp_path / "o" / "interactions.tsv").read_text().splitlines()]
    assert tags.count("train") == 80 and tags.count("valid") == 10 and tags.count("test") == 10
    assert data.read_bytes() == before
    assert run("split", "--data", data, "--ratios", "0.5,0.5", "--out", tmp_path / "p") == 1


def test_ood_split_command(synth, tmp_path):
    before = snapshot(synth)
    assert run("ood-split", *data_args(synth), "--fraction", 0.3, "--epochs", 3, "--out", tmp_path) == 0
    assert (tmp_path / "ood_split.tsv").exists()
    probs = [float(r.split("\t")[1]) for r in (tmp_path / "match_prob.tsv").read_text().splitlines()]
    assert len(probs) == 40 and all(0 < p < 1 for p in probs)
    assert snapshot(synth) == before
    assert run("ood-split", *data_args(synth), "--fraction", 0, "--out", tmp_path / "x") == 1


def test_mix_command(synth, tmp_path):
    other = tmp_path / "b"
    assert run("gen-synthetic", "--out", other, "--num-users", 30, "--num-items", 20, "--dim-v", 4,
               "--dim-t", 4, "--interactions-per-user", 8, "--seed", 5) == 0
    feats = lambda d, tag: [f"--features-{tag}", f"v={d / 'features_v.mdft'}",
                            f"--features-{tag}", f"t={d / 'features_t.mdft'}"]
    assert run("mix", "--data-a", synth / "interactions.tsv", "--items-a", synth / "items.tsv",
               "--data-b", other / "interactions.tsv", "--items-b", other / "items.tsv",
               *feats(synth, "a"), *feats(other, "b"), "--ratios-b", "0.1,0.1,0.8",
               "--out", tmp_path / "m") == 0
    items = (tmp_path / "m" / "items.tsv").read_text().splitlines()
    assert len(items) == 60 and items[0].startswith("A:") and items[-1].startswith("B:")
    assert (tmp_path / "m" / "features_v.mdft").exists()
