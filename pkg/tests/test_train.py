import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcgp import autodiff as ad
from dcgp import checkpoint
from dcgp.errors import CheckpointError, InsufficientPatches, NonFiniteGradient, ShapeMismatch
from dcgp.layers import conditional_moments, kl_to_prior
from dcgp.linalg import cholesky
from dcgp.model import LayerConfig, ModelConfig, elbo, layer_kls
from dcgp.train import (
    AdamState,
    TrainConfig,
    adam_ascent,
    deepen,
    init_model,
    init_variational,
    kmeans,
    kmeans_init,
    load_checkpoint,
    lr_schedule,
    minibatch_indices,
    pca_means,
    read_metrics,
    save_checkpoint,
    smoothed,
    train_loop,
)

SMALL = TrainConfig(kmeans_patches=300, init_images=30, log_every=1, checkpoint_every=5, record_time=False)


def toy_data(rng, n=30, side=6, classes=3):
    y = np.arange(n) % classes
    x = rng.standard_normal((n, side, side, 1)) * 0.3
    x[np.arange(n), y, :, 0] += 2.0  # class-dependent bright row
    return x, y


def toy_config(layers=(), classifier=LayerConfig(3, 3, 1, 0), M=5):
    return ModelConfig(input_shape=(6, 6, 1), num_classes=3, layers=list(layers), classifier=classifier,
                       num_inducing=M)


def test_lr_schedule():
    assert lr_schedule(0) == 0.01
    assert lr_schedule(99_999) == 0.01
    assert lr_schedule(100_000) == pytest.approx(0.001, rel=1e-15)
    assert lr_schedule(10**7) == 1e-5
    steps = np.arange(0, 2_000_000, 25_000)
    lrs = [lr_schedule(int(s)) for s in steps]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert min(lrs) >= 1e-5 and max(lrs) <= 0.01


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(minibatch=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_decay=1.5)
    with pytest.raises(ValueError):
        TrainConfig(hidden_mean_init="random")


def test_adam_zero_gradient_is_noop(rng):
    params = {"a": rng.standard_normal(3)}
    before = params["a"].copy()
    state = AdamState()
    for _ in range(3):
        adam_ascent(params, {"a": np.zeros(3)}, state, 0.01)
    np.testing.assert_array_equal(params["a"], before)
    assert state.step == 3


def test_adam_ascends_concave_objective():
    params = {"x": np.array([3.0, -2.0])}
    state = AdamState()
    for _ in range(2000):
        adam_ascent(params, {"x": -2.0 * params["x"]}, state, 0.05)
    assert np.max(np.abs(params["x"])) < 1e-2


def test_kmeans_examples(rng):
    X = rng.standard_normal((6, 2))
    centers, hist = kmeans(X, 6, seed=0)
    assert hist[-1] == 0.0
    assert sorted(map(tuple, centers)) == sorted(map(tuple, X))
    a = rng.standard_normal((50, 2)) * 0.1 + 10.0
    b = rng.standard_normal((50, 2)) * 0.1 - 10.0
    centers = kmeans_init(np.vstack([a, b]), 2, seed=3)
    centers = centers[np.argsort(centers[:, 0])]
    np.testing.assert_allclose(centers, [b.mean(0), a.mean(0)], atol=1e-9)
    with pytest.raises(InsufficientPatches):
        kmeans_init(np.ones((10, 2)), 2)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), M=st.integers(1, 8))
def test_kmeans_properties(seed, M):
    r = np.random.default_rng(seed)
    X = r.standard_normal((40, 3))
    centers, hist = kmeans(X, M, seed=seed)
    assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))
    assert np.all(centers >= X.min(0) - 1e-12) and np.all(centers <= X.max(0) + 1e-12)
    np.testing.assert_array_equal(centers, kmeans(X, M, seed=seed)[0])


def test_init_variational():
    q = init_variational(2, 2, np.eye(3))
    assert abs(kl_to_prior(q, cholesky(np.eye(3)))) < 1e-12
    q = init_variational(1, 2, np.eye(2))
    np.testing.assert_allclose(q.cov, 1e-5 * np.eye(2), rtol=1e-12)
    np.testing.assert_array_equal(q.mean, 0.0)


def test_hidden_init_variance_is_prior_minus_nystrom(rng):
    x, _ = toy_data(rng)
    model = init_model(toy_config([LayerConfig(3, 3, 1, 2)]), x, SMALL, seed=0)
    layer = model.layer(0)
    X = rng.standard_normal((5, 9))
    _, var = conditional_moments(X, layer, jitter=model.config.jitter)
    from dcgp.kernels import inducing_gram, kernel_matrix
    K = inducing_gram(layer.Z, layer.hyper) + model.config.jitter * layer.hyper.variance * np.eye(5)
    Kxz = kernel_matrix(X, layer.Z, layer.hyper)
    nystrom = np.sum(Kxz * np.linalg.solve(K, Kxz.T).T, axis=1)
    expected = layer.hyper.variance - nystrom
    np.testing.assert_allclose(var[:, 0], expected, atol=1e-5 * layer.hyper.variance)


def test_pca_means_project_onto_principal_axes(rng):
    sample = rng.standard_normal((500, 3)) * np.array([5.0, 1.0, 0.1])
    Z = sample[:20]
    m = pca_means(Z, sample, 2)
    assert m.shape == (2, 20)
    # first channel tracks the dominant axis
    assert abs(np.corrcoef(m[0], Z[:, 0])[0, 1]) > 0.99


def test_init_model_shapes_and_prior_classifier(rng):
    x, y = toy_data(rng)
    model = init_model(toy_config([LayerConfig(3, 3, 1, 2)]), x, SMALL, seed=0)
    kls = layer_kls(model)
    assert abs(kls[-1]) < 1e-8
    assert kls[0] > 0
    with pytest.raises(ShapeMismatch):
        init_model(toy_config(), rng.standard_normal((5, 7, 7, 1)), SMALL)


def test_deepen_copies_classifier_bit_for_bit(rng):
    x, y = toy_data(rng)
    donor = init_model(toy_config(), x, SMALL, seed=0)
    donor, _, _ = train_loop(donor, x, y, SMALL, 5)
    # a shape-preserving inserted layer keeps every classifier tensor compatible
    deep = deepen(donor, LayerConfig(1, 1, 1, 1), x, SMALL, seed=1)
    assert deep.config.depth == 2
    for key in ("Z", "q_mu", "q_sqrt", "w", "log_lengthscale", "log_variance"):
        a, b = donor.params[f"classifier.{key}"], deep.params[f"classifier.{key}"]
        assert a.tobytes() == b.tobytes()
    assert np.isfinite(elbo(x, y, deep, seed=0).value)


def test_deepen_inserted_layer_kl_matches_fresh_init(rng):
    x, y = toy_data(rng)
    donor = init_model(toy_config(), x, SMALL, seed=0)
    deep = deepen(donor, LayerConfig(3, 3, 1, 2), x, SMALL, seed=1)
    M, C = 5, 2
    fresh = 0.5 * C * M * (1e-5 - 1.0 - np.log(1e-5))
    assert layer_kls(deep)[0] == pytest.approx(fresh, rel=1e-6)
    assert np.isfinite(elbo(x, y, deep, seed=0).value)


def test_deepen_preserves_prefix(rng):
    x, y = toy_data(rng)
    donor = init_model(toy_config([LayerConfig(2, 2, 1, 2)], classifier=LayerConfig(2, 2, 1, 0)), x, SMALL, seed=0)
    donor, _, _ = train_loop(donor, x, y, SMALL, 3)
    deep = deepen(donor, LayerConfig(2, 2, 1, 2), x, SMALL, seed=1)
    assert deep.config.depth == 3
    X = rng.standard_normal((4, 4))
    a = conditional_moments(X, donor.layer(0), jitter=1e-6)
    b = conditional_moments(X, deep.layer(0), jitter=1e-6)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    # classifier input channels unchanged (2 -> 2), so the classifier is copied too
    assert donor.params["classifier.q_mu"].tobytes() == deep.params["classifier.q_mu"].tobytes()


def test_deepen_rejects_non_chaining_layer(rng):
    x, _ = toy_data(rng)
    donor = init_model(toy_config(), x, SMALL, seed=0)
    with pytest.raises(ShapeMismatch):
        deepen(donor, LayerConfig(5, 5, 1, 2), x, SMALL)


def test_minibatches_cover_each_epoch():
    cfg = TrainConfig(minibatch=4, seed=3)
    seen = np.concatenate([minibatch_indices(s, 12, cfg) for s in range(3)])
    assert sorted(seen) == list(range(12))
    np.testing.assert_array_equal(minibatch_indices(5, 12, cfg), minibatch_indices(5, 12, cfg))


def test_training_is_deterministic_and_logs(rng, tmp_path):
    x, y = toy_data(rng)
    cfg = SMALL
    runs = []
    for name in ("a", "b"):
        model = init_model(toy_config(), x, cfg, seed=0)
        train_loop(model, x, y, cfg, 12, out_dir=str(tmp_path / name))
        runs.append((tmp_path / name / "metrics.csv").read_bytes())
    assert runs[0] == runs[1]
    header, rows = read_metrics(str(tmp_path / "a" / "metrics.csv"))
    assert header == ["step", "elbo", "ell", "kl", "lr", "seconds"]
    assert rows[0][0] == 0 and rows[0][4] == 0.01
    assert len(rows) == 12
    for r in rows:
        assert r[1] == pytest.approx(r[2] - r[3], rel=1e-12, abs=1e-9)
    model, cfg2, adam, _, saved = load_checkpoint(str(tmp_path / "a" / "checkpoint.dcgp"))
    assert saved["step"] == 12 and adam.step == 12 and cfg2 == cfg


def test_resume_matches_unbroken_run(rng, tmp_path):
    x, y = toy_data(rng)
    m0 = init_model(toy_config(), x, SMALL, seed=0)
    full, _, rows_full = train_loop(m0, x, y, SMALL, 10)
    half, adam, rows_a = train_loop(m0, x, y, SMALL, 5, out_dir=str(tmp_path))
    model, _, adam2, _, saved = load_checkpoint(str(tmp_path / "checkpoint.dcgp"))
    rest, _, rows_b = train_loop(model, x, y, SMALL, 5, adam=adam2, start_step=saved["step"])
    assert rows_full == rows_a + rows_b
    for k in full.params:
        np.testing.assert_array_equal(full.params[k], rest.params[k])


def test_non_finite_gradient_keeps_last_checkpoint(rng, tmp_path, monkeypatch):
    x, y = toy_data(rng)
    model = init_model(toy_config(), x, SMALL, seed=0)
    real_backward = ad.backward
    calls = {"n": 0}

    def poisoned(out, grad=None):
        calls["n"] += 1
        g = real_backward(out, grad)
        if calls["n"] > 7:
            g = {k: np.full_like(v, np.nan) for k, v in g.items()}
        return g

    monkeypatch.setattr(ad, "backward", poisoned)
    with pytest.raises(NonFiniteGradient):
        train_loop(model, x, y, SMALL, 20, out_dir=str(tmp_path))
    _, _, _, _, saved = load_checkpoint(str(tmp_path / "checkpoint.dcgp"))
    assert saved["step"] == 5


def test_checkpoint_round_trip_bit_identical(rng, tmp_path):
    x, y = toy_data(rng)
    model = init_model(toy_config([LayerConfig(3, 3, 1, 2)]), x, SMALL, seed=0)
    model, adam, _ = train_loop(model, x, y, SMALL, 3)
    p1, p2 = str(tmp_path / "one.dcgp"), str(tmp_path / "two.dcgp")
    norm = (np.array([0.5]), np.array([2.0]))
    save_checkpoint(p1, model, SMALL, adam, norm, step=3)
    loaded, cfg, adam2, norm2, saved = load_checkpoint(p1)
    save_checkpoint(p2, loaded, cfg, adam2, norm2, step=saved["step"])
    assert open(p1, "rb").read() == open(p2, "rb").read()
    for k, v in model.params.items():
        assert v.tobytes() == loaded.params[k].tobytes()
    assert loaded.config == model.config


def test_checkpoint_format_layout():
    blob = checkpoint.dumps({"a": 1}, {"t": np.arange(6.0).reshape(2, 3)})
    assert blob[:4] == b"DCGP" and blob[4] == 1
    n = int.from_bytes(blob[5:13], "little")
    assert blob[13:13 + n] == b'{"a": 1}'
    config, tensors = checkpoint.loads(blob)
    np.testing.assert_array_equal(tensors["t"], np.arange(6.0).reshape(2, 3))
    with pytest.raises(CheckpointError):
        checkpoint.loads(b"NOPE" + blob[4:])
    with pytest.raises(CheckpointError):
        checkpoint.loads(blob[:-3])
    with pytest.raises(CheckpointError):
        checkpoint.loads(blob + b"\0")


@pytest.mark.slow
def test_mnist_subset_elbo_improves(mnist_dir):
    from dcgp.data import load_mnist, mnist_paths, normalize, take_balanced

    ds, _ = normalize(take_balanced(load_mnist(*mnist_paths(mnist_dir, "train")), 500))
    cfg = ModelConfig(input_shape=(28, 28, 1), num_classes=10, classifier=LayerConfig(5, 5, 2, 0), num_inducing=16)
    tc = TrainConfig(log_every=1)
    model = init_model(cfg, ds.images, tc)
    _, _, rows = train_loop(model, ds.images, ds.labels, tc, 2000)
    s = smoothed([r[1] for r in rows])
    assert rows[0][4] == 0.01
    assert s[-1] > s[0]
