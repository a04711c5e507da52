import json
import os

import numpy as np
import pytest

from dcgp.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from dcgp.train import load_checkpoint


def small_args(mnist_dir, out, *extra):
    return ["train", "--dataset", "mnist", "--data-dir", mnist_dir, "--layers", "1", "--num-inducing", "8",
            "--subsample", "40", "--test-subsample", "20", "--minibatch", "10", "--kmeans-patches", "500",
            "--init-images", "20", "--log-every", "2", "--checkpoint-every", "3", "--train-samples", "1",
            "--eval-samples", "2", "--no-time", "--seed", "3", "--out", str(out), *extra]


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


@pytest.fixture(scope="module")
def trained(mnist_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(small_args(mnist_dir, out, "--max-steps", "6")) == EXIT_OK
    return out


def test_train_writes_artifacts(trained, capsys):
    assert os.path.exists(trained / "checkpoint.dcgp")
    lines = read(trained / "metrics.csv").decode().strip().splitlines()
    assert len(lines) == 1 + 3  # header plus steps 2, 4, 6
    _, _, _, _, saved = load_checkpoint(str(trained / "checkpoint.dcgp"))
    assert saved["step"] == 6
    assert saved["run"]["dataset"]["subsample"] == 40
    assert saved["run"]["model"]["num_inducing"] == 8


def same_checkpoint(path_a, path_b):
    a, ta, _, _, sa = load_checkpoint(str(path_a))
    b, tb, _, _, sb = load_checkpoint(str(path_b))
    assert sorted(a.params) == sorted(b.params)
    for k in b.params:
        assert a.params[k].tobytes() == b.params[k].tobytes(), k
    assert ta == tb
    # the run block records the output directory, the only field allowed to differ
    for s in (sa, sb):
        s["run"].pop("out_dir")
    assert sa == sb


def test_train_is_reproducible(mnist_dir, trained, tmp_path):
    assert main(small_args(mnist_dir, tmp_path, "--max-steps", "6")) == EXIT_OK
    same_checkpoint(tmp_path / "checkpoint.dcgp", trained / "checkpoint.dcgp")
    assert read(tmp_path / "metrics.csv") == read(trained / "metrics.csv")


def test_resume_matches_unbroken(mnist_dir, trained, tmp_path):
    assert main(small_args(mnist_dir, tmp_path, "--max-steps", "3")) == EXIT_OK
    ckpt = str(tmp_path / "checkpoint.dcgp")
    assert main(small_args(mnist_dir, tmp_path, "--max-steps", "6", "--resume", ckpt)) == EXIT_OK
    same_checkpoint(ckpt, trained / "checkpoint.dcgp")
    assert read(tmp_path / "metrics.csv") == read(trained / "metrics.csv")


def test_json_config_and_flag_precedence(mnist_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"num_inducing": 6, "max_steps": 2, "subsample": 30}))
    args = small_args(mnist_dir, tmp_path / "o", "--config", str(cfg))
    args[args.index("--num-inducing") + 1] = "5"
    args.remove("--subsample"), args.remove("40")
    assert main(args) == EXIT_OK
    _, _, _, _, saved = load_checkpoint(str(tmp_path / "o" / "checkpoint.dcgp"))
    assert saved["run"]["model"]["num_inducing"] == 5  # flag wins
    assert saved["run"]["dataset"]["subsample"] == 30  # file value kept
    assert saved["step"] == 2


def test_deepen(trained, tmp_path, capsys):
    out = tmp_path / "deep"
    assert main(["deepen", str(trained / "checkpoint.dcgp"), "--layers", "2", "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    elbo = float(text.split("initial train ELBO:")[1].split()[0])
    assert np.isfinite(elbo)
    deep, _, _, _, _ = load_checkpoint(str(out / "checkpoint.dcgp"))
    assert deep.config.depth == 2
    assert deep.config.layers[0].stride == 2 and deep.config.classifier.stride == 1


def test_deepen_shape_preserving_copies_bits(trained, tmp_path):
    out = tmp_path / "deep"
    args = ["deepen", str(trained / "checkpoint.dcgp"), "--new-layer", "1x1:1:1", "--out", str(out)]
    assert main(args) == EXIT_OK
    deep, _, _, _, _ = load_checkpoint(str(out / "checkpoint.dcgp"))
    donor, _, _, _, _ = load_checkpoint(str(trained / "checkpoint.dcgp"))
    assert deep.config.classifier == donor.config.classifier
    for k, v in donor.params.items():
        assert deep.params[k].tobytes() == v.tobytes(), k


def test_deepen_wrong_depth(trained, capsys):
    assert main(["deepen", str(trained / "checkpoint.dcgp"), "--layers", "3"]) == EXIT_CONFIG
    assert "depth" in capsys.readouterr().err


def test_evaluate_and_inspect_agree(trained, tmp_path, capsys):
    ckpt = str(trained / "checkpoint.dcgp")
    assert main(["evaluate", ckpt, "--samples", "3", "--out", str(tmp_path)]) == EXIT_OK
    ev = capsys.readouterr().out
    assert (tmp_path / "evaluation_test.csv").exists()
    conf = read(tmp_path / "confusion_test.csv").decode().strip().splitlines()
    counts = np.array([[int(v) for v in row.split(",")[1:]] for row in conf[1:]])
    assert counts.shape == (10, 10) and counts.sum() == 20
    exp = tmp_path / "img"
    assert main(["inspect", ckpt, "--export", str(exp)]) == EXIT_OK
    ins = capsys.readouterr().out
    assert "depth 1: 0 conv + 1 classifier" in ins
    kl_eval = ev.split("KL classifier: ")[1].split()[0]
    kl_ins = ins.split(" KL ")[1].split()[0]
    assert kl_eval == kl_ins
    pgms = sorted(os.listdir(exp))
    assert len(pgms) == 8
    blob = read(exp / pgms[0])
    assert blob.startswith(b"P5\n5 5\n255\n") and len(blob) == len(b"P5\n5 5\n255\n") + 25


def test_untrained_model_near_chance(mnist_dir, tmp_path, capsys):
    assert main(small_args(mnist_dir, tmp_path, "--max-steps", "0")) == EXIT_OK
    capsys.readouterr()
    assert main(["evaluate", str(tmp_path / "checkpoint.dcgp"), "--subsample", "200", "--samples", "2"]) == EXIT_OK
    out = capsys.readouterr().out
    acc = float(out.split("accuracy:")[1].split()[0])
    ll = float(out.split("mean log-likelihood:")[1].split()[0])
    assert acc < 0.5
    assert abs(ll - np.log(0.1)) < 0.5


def test_exit_codes(tmp_path, mnist_dir):
    assert main(["train", "--layers", "0", "--data-dir", mnist_dir, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--bogus"]) == EXIT_CONFIG
    assert main(["train", "--data-dir", str(tmp_path / "missing"), "--out", str(tmp_path)]) == EXIT_DATA
    assert main(["evaluate", str(tmp_path / "nope.dcgp")]) == EXIT_DATA
    bad = tmp_path / "bad.dcgp"
    bad.write_bytes(b"XXXX")
    assert main(["inspect", str(bad)]) == EXIT_DATA
    assert main(["train", "--dataset", "cifar10", "--data-dir", mnist_dir, "--out", str(tmp_path)]) == EXIT_DATA


def test_deepen_hidden_mean_init(trained, tmp_path):
    for mode in ("zero", "pca"):
        out = tmp_path / mode
        args = ["deepen", str(trained / "checkpoint.dcgp"), "--hidden-mean-init", mode, "--out", str(out)]
        assert main(args) == EXIT_OK
        deep, tc, _, _, saved = load_checkpoint(str(out / "checkpoint.dcgp"))
        means = deep.params["layer0.q_mu"]
        assert tc.hidden_mean_init == mode and saved["run"]["train"]["hidden_mean_init"] == mode
        assert (np.all(means == 0.0)) == (mode == "zero")
