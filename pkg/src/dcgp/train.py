"""Initialization, Adam, the minibatch loop, iterative deepening and checkpoints."""
import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels, checkpoint
from . import autodiff as ad
from .errors import InsufficientPatches, NonFiniteGradient, PatchTooLarge, ShapeMismatch
from .kernels import RBFHyper
from .layers import layer_graph, q_sqrt_from_raw, raw_from_q_sqrt, VariationalGaussian
from .linalg import cholesky
from .model import (
    DeepModel,
    LayerConfig,
    ModelConfig,
    check_params,
    elbo_graph,
    seed_seq,
)
from .patches import output_shape

log = logging.getLogger(__name__)

HIDDEN_INIT_SCALE = 1e-5
KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-6
METRICS_HEADER = ["step", "elbo", "ell", "kl", "lr", "seconds"]


@dataclass
class TrainConfig:
    minibatch: int = 32
    lr0: float = 0.01
    lr_decay: float = 0.1
    decay_every: int = 100_000
    lr_floor: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_samples: int = 1
    eval_samples: int = 25
    kmeans_patches: int = 10_000
    init_images: int = 1000
    log_every: int = 10
    checkpoint_every: int = 1000
    record_time: bool = True
    seed: int = 0
    hidden_mean_init: str = "zero"  # or "pca"

    def __post_init__(self):
        for name in ("minibatch", "lr0", "decay_every", "lr_floor", "train_samples", "eval_samples",
                     "kmeans_patches", "log_every", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.hidden_mean_init not in ("zero", "pca"):
            raise ValueError(f"unknown hidden_mean_init {self.hidden_mean_init!r}")


def lr_schedule(step, cfg=None):
    cfg = TrainConfig() if cfg is None else cfg
    return max(cfg.lr_floor, cfg.lr0 * cfg.lr_decay ** (step // cfg.decay_every))


# ------------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_ascent(params, grads, state, lr):
    """One Adam step that *increases* the objective; updates ``params`` in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] = params[name] + lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ------------------------------------------------------------- initialization

def kmeans(X, M, seed=0, max_iter=KMEANS_MAX_ITER, tol=KMEANS_TOL):
    """Lloyd's algorithm; returns ``(centers, objective_history)``.

    Centers start at ``M`` distinct sample points.  An empty cluster is
    re-seeded at the point farthest from its current center.
    """
    X = np.asarray(X, dtype=np.float64)
    uniq = np.unique(X, axis=0)
    if len(uniq) < M:
        raise InsufficientPatches(f"{len(uniq)} distinct patches for {M} clusters")
    rng = np.random.default_rng(seed)
    centers = uniq[rng.choice(len(uniq), size=M, replace=False)].copy()
    history = []
    for _ in range(max_iter):
        d = _kernels.sqdist(X, centers)
        assign = np.argmin(d, axis=1)
        dist = d[np.arange(len(X)), assign]
        history.append(float(dist.sum()))
        counts = np.bincount(assign, minlength=M)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, X)
        new = centers.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        for k in np.flatnonzero(~filled):
            far = int(np.argmax(dist))
            new[k] = X[far]
            dist[far] = -1.0
        centers = new
        if len(history) > 1:
            prev, cur = history[-2], history[-1]
            if prev - cur <= tol * max(prev, 1e-300):
                break
    d = _kernels.sqdist(X, centers)
    history.append(float(np.min(d, axis=1).sum()))
    return centers, history


def kmeans_init(patches, M, seed=0):
    return kmeans(patches, M, seed)[0]


def median_distance(X, rng, max_points=1000):
    """Median non-zero pairwise distance of a row subsample (lengthscale heuristic)."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) > max_points:
        X = X[rng.choice(len(X), size=max_points, replace=False)]
    d = np.sqrt(_kernels.sqdist(X, X)[np.triu_indices(len(X), 1)])
    d = d[d > 1e-12]
    return float(np.median(d)) if d.size else 1.0


def init_variational(l, depth, Kzz, channels=1):
    """Zero means; ``S = 1e-5 K_zz`` below the last layer, ``S = K_zz`` at it.

    ``l`` is 1-based.  Returns one :class:`VariationalGaussian` (channels
    share the same initial value).
    """
    L = cholesky(Kzz, base_jitter=0.0).L
    scale = L if l == depth else np.sqrt(HIDDEN_INIT_SCALE) * L
    return VariationalGaussian(mean=np.zeros(Kzz.shape[0]), scale=scale)


def _sample_patches(h, cfg, count, rng):
    """Uniformly sampled patches (with replacement) of a batch of representations."""
    n = h.shape[0]
    out = output_shape(h.shape[1:], cfg, 1)
    P = out.height * out.width
    img_idx = rng.integers(n, size=count)
    p_idx = rng.integers(P, size=count)
    order = np.argsort(img_idx, kind="stable")
    rows = np.empty((count, cfg.patch_dim(h.shape[3])))
    uniq, starts = np.unique(img_idx[order], return_index=True)
    bounds = list(starts[1:]) + [count]
    for i, s, e in zip(uniq, starts, bounds):
        pats = _kernels.gather_patches(h[i:i + 1], cfg.patch_h, cfg.patch_w, cfg.stride)[0]
        sel = order[s:e]
        rows[sel] = pats[p_idx[sel]]
    return rows


def pca_means(Z, sample, channels):
    """``C x M`` means whose GP interpolant is roughly a unit-variance PCA projection.

    Channel ``c`` gets the inducing patches' scores on the sample's ``c``-th
    principal direction (directions are reused cyclically when ``C > D``).
    """
    mu = sample.mean(axis=0)
    _, s, vt = np.linalg.svd(sample - mu, full_matrices=False)
    scores = (Z - mu) @ vt.T
    sd = np.maximum(s / np.sqrt(max(len(sample) - 1, 1)), 1e-12)
    idx = np.arange(channels) % vt.shape[0]
    return (scores[:, idx] / sd[idx]).T


def _init_block(name, h, lc, channels, M, depth_index, depth, jitter, kmeans_patches, rng, params,
                classifier=False, mean_init="zero"):
    """Fill ``params`` for one layer from the representation batch ``h``."""
    cfg = lc.patch
    sample = _sample_patches(h, cfg, kmeans_patches, rng)
    Z = kmeans_init(sample, M, seed=int(rng.integers(2**31)))
    ell = median_distance(sample, rng)
    hyper = RBFHyper(np.log(ell), 0.0)
    if classifier:
        w = params.get(f"{name}.w")
        if w is None:
            grid = output_shape(h.shape[1:], cfg, 1)
            w = np.full(grid.height * grid.width, 1.0 / (grid.height * grid.width))
            params[f"{name}.w"] = w
        pats = _kernels.gather_patches(h[:min(len(h), 200)], cfg.patch_h, cfg.patch_w, cfg.stride)
        prior = _kernels.weighted_self_kernel(pats, w, ell, 1.0)
        # scale the base variance so the prior image-kernel variance is ~1
        hyper = RBFHyper(np.log(ell), -np.log(max(float(np.mean(prior)), 1e-12)))
    K, _ = _kernels.rbf_cross(Z, Z, hyper.lengthscale, hyper.variance)
    K = 0.5 * (K + K.T) + jitter * hyper.variance * np.eye(M)
    q = init_variational(depth_index, depth, K)
    params[f"{name}.Z"] = Z
    params[f"{name}.q_mu"] = pca_means(Z, sample, channels) if mean_init == "pca" else np.zeros((channels, M))
    params[f"{name}.q_sqrt"] = np.repeat(raw_from_q_sqrt(q.scale)[None], channels, axis=0)
    params[f"{name}.log_lengthscale"] = np.array(hyper.log_lengthscale)
    params[f"{name}.log_variance"] = np.array(hyper.log_variance)


def _propagate(h, params, config, l, rng):
    """One sampled pass of representation batch ``h`` through hidden layer ``l``."""
    pre = f"layer{l}."
    lc = config.layers[l]
    out = output_shape(h.shape[1:], lc.patch, lc.channels)
    eps = rng.standard_normal((len(h) * out.height * out.width, lc.channels))
    f, _ = layer_graph(h, params[pre + "Z"], params[pre + "q_mu"],
                       q_sqrt_from_raw(ad.Tensor(params[pre + "q_sqrt"])),
                       params[pre + "log_lengthscale"], params[pre + "log_variance"], lc.patch, eps, config.jitter)
    return f.value


def _init_subset(images, cfg, rng):
    n = min(len(images), cfg.init_images)
    return np.asarray(images, dtype=np.float64)[np.sort(rng.choice(len(images), size=n, replace=False))]


def init_model(config, images, train_cfg=None, seed=None):
    """Fresh model: k-means inducing patches per layer, default variational init."""
    train_cfg = TrainConfig() if train_cfg is None else train_cfg
    rng = np.random.default_rng(seed_seq(train_cfg.seed if seed is None else seed, 7))
    h = _init_subset(images, train_cfg, rng)
    if h.shape[1:] != tuple(config.input_shape):
        raise ShapeMismatch(f"images {h.shape[1:]} vs configured input {tuple(config.input_shape)}")
    params = {}
    depth = config.depth
    M = config.num_inducing
    for l, lc in enumerate(config.layers):
        _init_block(f"layer{l}", h, lc, lc.channels, M, l + 1, depth, config.jitter,
                    train_cfg.kmeans_patches, rng, params, mean_init=train_cfg.hidden_mean_init)
        h = _propagate(h, params, config, l, rng)
    _init_block("classifier", h, config.classifier, config.num_classes, M, depth, depth, config.jitter,
                train_cfg.kmeans_patches, rng, params, classifier=True)
    check_params(config, params)
    return DeepModel(config, params)


def deepen(donor, new_layer, images, train_cfg=None, seed=None):
    """Insert ``new_layer`` just before the classifier of a trained model.

    Hidden layers are copied.  Classifier tensors are copied whenever their
    shapes survive the insertion: ``Z`` together with its variational
    parameters and hyperparameters when the patch dimension is unchanged,
    ``w`` when the patch count is unchanged.  Everything else, including the
    new layer, gets default initialization.
    """
    train_cfg = TrainConfig() if train_cfg is None else train_cfg
    if not isinstance(new_layer, LayerConfig):
        new_layer = LayerConfig(**new_layer)
    old = donor.config
    cfg_dict = old.to_dict()
    cfg_dict["layers"] = [asdict(lc) for lc in old.layers] + [asdict(new_layer)]
    try:
        config = ModelConfig.from_dict(cfg_dict)
        config.shapes()
    except PatchTooLarge as exc:
        raise ShapeMismatch(f"inserted layer does not chain: {exc}") from exc
    rng = np.random.default_rng(seed_seq(train_cfg.seed if seed is None else seed, 11))
    params = {k: v.copy() for k, v in donor.params.items() if k.startswith("layer")}
    h = _init_subset(images, train_cfg, rng)
    for l in range(len(old.layers)):
        h = _propagate(h, params, config, l, rng)
    L = config.depth
    new = len(old.layers)
    _init_block(f"layer{new}", h, new_layer, new_layer.channels, config.num_inducing, new + 1, L,
                config.jitter, train_cfg.kmeans_patches, rng, params, mean_init=train_cfg.hidden_mean_init)
    h = _propagate(h, params, config, new, rng)
    if config.classifier_patches == old.classifier_patches:
        params["classifier.w"] = donor.params["classifier.w"].copy()
    if config.patch_dims()[-1] == old.patch_dims()[-1]:
        for key in ("Z", "q_mu", "q_sqrt", "log_lengthscale", "log_variance"):
            params[f"classifier.{key}"] = donor.params[f"classifier.{key}"].copy()
        if "classifier.w" not in params:
            P = config.classifier_patches
            params["classifier.w"] = np.full(P, 1.0 / P)
    else:
        _init_block("classifier", h, config.classifier, config.num_classes, config.num_inducing, L, L,
                    config.jitter, train_cfg.kmeans_patches, rng, params, classifier=True)
    check_params(config, params)
    return DeepModel(config, params)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model, train_cfg=None, adam=None, norm=None, step=0, extra=None):
    config = {"format": checkpoint.VERSION, "model": model.config.to_dict(), "step": int(step)}
    if train_cfg is not None:
        config["train"] = asdict(train_cfg)
    if extra:
        config.update(extra)
    tensors = dict(model.params)
    if adam is not None:
        config["adam_step"] = adam.step
        for name in adam.m:
            tensors[f"adam.m/{name}"] = adam.m[name]
            tensors[f"adam.v/{name}"] = adam.v[name]
    if norm is not None:
        tensors["norm.mean"], tensors["norm.std"] = norm
    tmp = f"{path}.tmp"
    checkpoint.save(tmp, config, tensors)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns ``(model, train_cfg or None, adam or None, norm or None, config dict)``."""
    config, tensors = checkpoint.load(path)
    model_cfg = ModelConfig.from_dict(config["model"])
    params = {k: v for k, v in tensors.items() if k.startswith(("layer", "classifier."))}
    check_params(model_cfg, params)
    train_cfg = TrainConfig(**config["train"]) if "train" in config else None
    adam = None
    if "adam_step" in config:
        kw = {} if train_cfg is None else dict(beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.adam_eps)
        adam = AdamState(step=config["adam_step"], **kw)
        for k, v in tensors.items():
            if k.startswith("adam.m/"):
                adam.m[k[7:]] = v.copy()
            elif k.startswith("adam.v/"):
                adam.v[k[7:]] = v.copy()
    norm = (tensors["norm.mean"], tensors["norm.std"]) if "norm.mean" in tensors else None
    return DeepModel(model_cfg, params), train_cfg, adam, norm, config


# ----------------------------------------------------------------- the loop

def minibatch_indices(step, n, cfg):
    """Deterministic minibatch for a global step: seeded shuffle, reshuffled per epoch."""
    b = min(cfg.minibatch, n)
    per_epoch = n // b
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng(seed_seq(cfg.seed, 1, epoch)).permutation(n)
    return perm[k * b:(k + 1) * b]


def objective(model_config, images, labels, num_samples, total_n):
    def f(t, seed):
        return elbo_graph(t, model_config, images, labels, num_samples, total_n, seed)[0]
    return f


def train_loop(model, images, labels, cfg, max_steps, out_dir=None, adam=None, start_step=0, norm=None,
               metrics_path=None, callback=None, extra=None):
    """Maximize the ELBO with Adam; returns ``(model, adam, metrics rows)``.

    ``start_step`` / ``adam`` resume a previous run.  Metrics are appended to
    ``metrics_path`` (default ``out_dir/metrics.csv``) every ``log_every``
    steps; checkpoints go to ``out_dir/checkpoint.dcgp``.
    """
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    if n == 0:
        raise ValueError("no training data")
    adam = AdamState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps) if adam is None else adam
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in model.params.items()}
    model = DeepModel(model.config, params)
    ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "checkpoint.dcgp")
        metrics_path = metrics_path or os.path.join(out_dir, "metrics.csv")
    writer = fh = None
    if metrics_path is not None:
        new_file = not os.path.exists(metrics_path) or os.path.getsize(metrics_path) == 0
        fh = open(metrics_path, "a", newline="")
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(METRICS_HEADER)
    rows = []
    t0 = time.perf_counter()
    step = start_step
    try:
        for step in range(start_step, start_step + max_steps):
            idx = minibatch_indices(step, n, cfg)
            xb, yb = images[idx], np.asarray(labels)[idx]
            lr = lr_schedule(step, cfg)
            seed = seed_seq(cfg.seed, 2, step)
            leaves = {k: ad.Tensor(v) for k, v in params.items()}
            value, ell, kls = elbo_graph(leaves, model.config, xb, yb, cfg.train_samples, n, seed)
            adj = ad.backward(value)
            grads = {}
            for name, leaf in leaves.items():
                g = adj.get(id(leaf))
                g = np.zeros_like(leaf.value) if g is None else g.reshape(leaf.value.shape)
                if not np.all(np.isfinite(g)):
                    raise NonFiniteGradient(name)
                grads[name] = g
            if step % cfg.log_every == 0:
                kl = float(sum(float(k.value) for k in kls))
                secs = time.perf_counter() - t0 if cfg.record_time else 0.0
                row = [step, float(value.value), float(ell.value), kl, lr, secs]
                rows.append(row)
                if writer is not None:
                    writer.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
                if callback is not None:
                    callback(row)
            adam_ascent(params, grads, adam, lr)
            done = step + 1
            if ckpt_path and done % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_path, model, cfg, adam, norm, step=done, extra=extra)
    except NonFiniteGradient:
        if ckpt_path:
            log.error("non-finite gradient at step %d; keeping last good checkpoint", step)
        raise
    finally:
        if fh is not None:
            fh.close()
    if ckpt_path:
        save_checkpoint(ckpt_path, model, cfg, adam, norm, step=start_step + max_steps, extra=extra)
    return model, adam, rows


def read_metrics(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [[float(x) for x in row] for row in reader]


def smoothed(values, window=100):
    """Trailing moving average (shorter windows at the start)."""
    values = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)
