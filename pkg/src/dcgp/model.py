"""Deep convolutional GP: stacked conv GP layers and a weighted-conv classifier.

A depth-``L`` model has ``L - 1`` convolutional layers followed by the
classifier layer.  Parameters are kept in one flat, named dict of
unconstrained arrays (the optimizer's view); :class:`ModelConfig` holds the
architecture.  Parameter names:

``layer{l}.Z``, ``layer{l}.q_mu``, ``layer{l}.q_sqrt``,
``layer{l}.log_lengthscale``, ``layer{l}.log_variance`` and the same under
``classifier.`` plus ``classifier.w``.  ``q_sqrt`` entries are raw: their
diagonals pass through softplus (see :func:`dcgp.layers.q_sqrt_from_raw`).
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch, LabelOutOfRange, ShapeMismatch
from .kernels import RBFHyper
from .layers import (
    SVGPLayerParams,
    inducing_chol_graph,
    kl_graph,
    layer_graph,
    q_sqrt_from_raw,
    raw_from_q_sqrt,
    svgp_moments_graph,
)
from .patches import PatchConfig, Shape3, output_shape

TRAIN_SAMPLES = 1
EVAL_SAMPLES = 25
# sampled forward paths (images x samples) evaluated at once by elbo / predict
MAX_PATHS = 400


@dataclass
class LayerConfig:
    patch_h: int = 5
    patch_w: int = 5
    stride: int = 1
    channels: int = 10

    @property
    def patch(self):
        return PatchConfig(self.patch_h, self.patch_w, self.stride)


@dataclass
class ModelConfig:
    input_shape: tuple
    num_classes: int
    layers: list = field(default_factory=list)
    classifier: LayerConfig = field(default_factory=lambda: LayerConfig(channels=0))
    num_inducing: int = 384
    likelihood: str = "softmax"  # or "gaussian" (diagnostic mode)
    noise_variance: float = 1.0
    jitter: float = 1e-6

    def __post_init__(self):
        self.input_shape = Shape3(*self.input_shape)
        self.layers = [lc if isinstance(lc, LayerConfig) else LayerConfig(**lc) for lc in self.layers]
        if not isinstance(self.classifier, LayerConfig):
            self.classifier = LayerConfig(**self.classifier)
        if self.likelihood not in ("softmax", "gaussian"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")

    @property
    def depth(self):
        return len(self.layers) + 1

    def shapes(self):
        """Representation shapes: input, each conv output, classifier patch grid."""
        shapes = [self.input_shape]
        for lc in self.layers:
            shapes.append(output_shape(shapes[-1], lc.patch, lc.channels))
        shapes.append(output_shape(shapes[-1], self.classifier.patch, 1))
        return shapes

    def patch_dims(self):
        shapes = self.shapes()
        dims = [lc.patch.patch_dim(shapes[i].channels) for i, lc in enumerate(self.layers)]
        dims.append(self.classifier.patch.patch_dim(shapes[-2].channels))
        return dims

    @property
    def classifier_patches(self):
        s = self.shapes()[-1]
        return s.height * s.width

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ClassifierParams:
    Z: np.ndarray
    q_mu: np.ndarray  # C_y x M
    q_sqrt: np.ndarray  # C_y x M x M
    w: np.ndarray
    hyper: RBFHyper
    cfg: PatchConfig


@dataclass
class ELBOEstimate:
    value: float
    expected_loglik: float
    kl_total: float
    per_layer_kl: np.ndarray


@dataclass
class DeepModel:
    config: ModelConfig
    params: dict

    @property
    def depth(self):
        return self.config.depth

    def copy(self):
        return DeepModel(ModelConfig.from_dict(self.config.to_dict()),
                         {k: v.copy() for k, v in self.params.items()})

    def layer(self, l):
        """Constrained view of hidden layer ``l`` as :class:`SVGPLayerParams`."""
        p = self.params
        pre = f"layer{l}."
        return SVGPLayerParams(
            Z=p[pre + "Z"], q_mu=p[pre + "q_mu"],
            q_sqrt=q_sqrt_from_raw(ad.Tensor(p[pre + "q_sqrt"])).value,
            hyper=RBFHyper(float(p[pre + "log_lengthscale"]), float(p[pre + "log_variance"])),
            cfg=self.config.layers[l].patch,
        )

    def classifier(self):
        p = self.params
        return ClassifierParams(
            Z=p["classifier.Z"], q_mu=p["classifier.q_mu"],
            q_sqrt=q_sqrt_from_raw(ad.Tensor(p["classifier.q_sqrt"])).value,
            w=p["classifier.w"],
            hyper=RBFHyper(float(p["classifier.log_lengthscale"]), float(p["classifier.log_variance"])),
            cfg=self.config.classifier.patch,
        )


def layer_names(config):
    return [f"layer{l}" for l in range(len(config.layers))] + ["classifier"]


def check_params(config, params):
    """Raise ShapeMismatch unless every tensor has the shape ``config`` implies."""
    M = config.num_inducing
    dims = config.patch_dims()
    outs = [lc.channels for lc in config.layers] + [config.num_classes]
    for name, D, C in zip(layer_names(config), dims, outs):
        expected = {"Z": (M, D), "q_mu": (C, M), "q_sqrt": (C, M, M), "log_lengthscale": (), "log_variance": ()}
        if name == "classifier":
            expected["w"] = (config.classifier_patches,)
        for key, shape in expected.items():
            arr = params.get(f"{name}.{key}")
            if arr is None or np.shape(arr) != shape:
                got = None if arr is None else np.shape(arr)
                raise ShapeMismatch(f"{name}.{key}: expected {shape}, got {got}")


# ------------------------------------------------------------------ graph level

def _draw_noise(config, n, num_samples, rng):
    shapes = config.shapes()
    eps = []
    for l, lc in enumerate(config.layers):
        s = shapes[l + 1]
        eps.append(rng.standard_normal((num_samples * n * s.height * s.width, lc.channels)))
    eps.append(rng.standard_normal((num_samples * n, config.num_classes)))
    return eps


def classifier_graph(h, t, config, eps):
    """Logit moments and one sample per class for a batch ``h`` (``B x H x W x C``)."""
    cc = config.classifier
    B = h.shape[0]
    pat = ad.patches(h, cc.patch_h, cc.patch_w, cc.stride)
    P, D = pat.shape[1], pat.shape[2]
    ll, lv, w = t["classifier.log_lengthscale"], t["classifier.log_variance"], t["classifier.w"]
    Z = t["classifier.Z"]
    Lz = inducing_chol_graph(Z, ll, lv, config.jitter)
    Kpz = ad.reshape(ad.rbf_cross(ad.reshape(pat, (B * P, D)), Z, ll, lv), (B, P, Z.shape[0]))
    kfz = ad.tsum(Kpz * ad.reshape(w, (1, P, 1)), axis=1)
    kff = ad.weighted_self_kernel(pat, w, ll, lv)
    q_sqrt = q_sqrt_from_raw(t["classifier.q_sqrt"])
    mean, var = svgp_moments_graph(Lz, ad.transpose(kfz), kff, t["classifier.q_mu"], q_sqrt)
    logits = mean + ad.sqrt(var) * eps
    return logits, mean, var, Lz, q_sqrt


def forward_graph(t, config, images, num_samples, eps):
    """Sampled logits ``S x N x C_y`` plus per-layer (Lz, q_mu, q_sqrt) for the KL."""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    factors = []
    if config.layers:
        h = np.broadcast_to(images[None], (num_samples,) + images.shape)
        h = h.reshape((num_samples * n,) + images.shape[1:])
    else:
        h = images
    for l, lc in enumerate(config.layers):
        pre = f"layer{l}."
        q_sqrt = q_sqrt_from_raw(t[pre + "q_sqrt"])
        h, Lz = layer_graph(h, t[pre + "Z"], t[pre + "q_mu"], q_sqrt, t[pre + "log_lengthscale"],
                            t[pre + "log_variance"], lc.patch, eps[l], config.jitter)
        factors.append((Lz, t[pre + "q_mu"], q_sqrt))
    cls_eps = eps[-1].reshape(num_samples, n, config.num_classes)
    if config.layers:
        logits, _, _, Lz, q_sqrt = classifier_graph(h, t, config, cls_eps.reshape(num_samples * n, -1))
        logits = ad.reshape(logits, (num_samples, n, config.num_classes))
    else:
        # deterministic input: moments once, S draws
        _, mean, var, Lz, q_sqrt = classifier_graph(h, t, config, np.zeros((n, config.num_classes)))
        logits = ad.reshape(mean, (1, n, -1)) + ad.reshape(ad.sqrt(var), (1, n, -1)) * cls_eps
    factors.append((Lz, t["classifier.q_mu"], q_sqrt))
    return logits, factors


def _ell_graph(logits, labels, config):
    """Sum over images of the Monte Carlo expected log-likelihood."""
    S, n, C = logits.shape
    if config.likelihood == "softmax":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise DimensionMismatch(f"expected {n} labels, got {labels.shape}")
        if np.any(labels < 0) or np.any(labels >= C):
            raise LabelOutOfRange(f"labels must lie in [0, {C})")
        picked = ad.getitem(ad.log_softmax(logits, axis=-1), (slice(None), np.arange(n), labels))
        return ad.tsum(picked) * (1.0 / S)
    Y = np.asarray(labels, dtype=np.float64).reshape(n, C)
    s2 = config.noise_variance
    sq = ad.tsum(ad.square(logits - Y[None]))
    return sq * (-0.5 / (s2 * S)) - 0.5 * n * C * np.log(2 * np.pi * s2)


def elbo_graph(t, config, images, labels, num_samples, total_n, seed):
    """Doubly stochastic ELBO as a graph: returns (elbo, scaled ell, [kl per layer])."""
    n = len(images)
    if n == 0:
        raise ValueError("empty batch")
    if total_n < n:
        raise ValueError("total_n must be >= batch size")
    rng = np.random.default_rng(seed)
    eps = _draw_noise(config, n, num_samples, rng)
    logits, factors = forward_graph(t, config, images, num_samples, eps)
    ell = _ell_graph(logits, labels, config) * (total_n / n)
    kls = [kl_graph(*f) for f in factors]
    kl_total = kls[0]
    for k in kls[1:]:
        kl_total = kl_total + k
    return ell - kl_total, ell, kls


def seed_seq(*parts):
    """Flatten ints / int sequences into one entropy list for ``default_rng``."""
    out = []
    for p in parts:
        out.extend(int(x) for x in np.atleast_1d(p))
    return out


def _leaves(model):
    return {k: ad.Tensor(v) for k, v in model.params.items()}


# ------------------------------------------------------------------- numpy API

def classifier_forward(rep, params, eps, jitter=1e-6):
    """Sampled logits (length ``C_y``) for one ``H x W x C`` representation.

    ``params`` is a :class:`ClassifierParams`; ``eps`` is one standard-normal
    draw per class.
    """
    rep = np.asarray(rep, dtype=np.float64)
    if rep.ndim == 3:
        rep = rep[None]
    t = {
        "classifier.Z": ad.Tensor(params.Z), "classifier.q_mu": ad.Tensor(params.q_mu),
        "classifier.q_sqrt": ad.Tensor(_raw(params.q_sqrt)), "classifier.w": ad.Tensor(params.w),
        "classifier.log_lengthscale": ad.Tensor(params.hyper.log_lengthscale),
        "classifier.log_variance": ad.Tensor(params.hyper.log_variance),
    }
    cfg = ModelConfig(input_shape=rep.shape[1:], num_classes=params.q_mu.shape[0],
                      classifier=LayerConfig(params.cfg.patch_h, params.cfg.patch_w, params.cfg.stride, 0),
                      num_inducing=params.Z.shape[0], jitter=jitter)
    eps = np.asarray(eps, dtype=np.float64).reshape(rep.shape[0], -1)
    logits, mean, var, _, _ = classifier_graph(rep, t, cfg, eps)
    return logits.value[0] if logits.shape[0] == 1 else logits.value


def _raw(q_sqrt):
    diag = np.diagonal(q_sqrt, axis1=-2, axis2=-1)
    if np.any(diag <= 0):
        raise ValueError("classifier scale needs a positive diagonal")
    return raw_from_q_sqrt(q_sqrt)


def forward_sample(images, model, num_samples=EVAL_SAMPLES, seed=0):
    """``S x N x C_y`` logits, one independent path through the layers per sample."""
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    images = np.asarray(images, dtype=np.float64)
    rng = np.random.default_rng(seed)
    eps = _draw_noise(model.config, len(images), num_samples, rng)
    logits, _ = forward_graph(_leaves(model), model.config, images, num_samples, eps)
    return logits.value


def expected_loglik(logits, y):
    """Monte Carlo ``E[log softmax(f)[y]]`` from an ``S x C_y`` array of samples."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    C = logits.shape[-1]
    if not 0 <= int(y) < C:
        raise LabelOutOfRange(f"label {y} outside [0, {C})")
    mx = logits.max(axis=-1, keepdims=True)
    lsm = logits - mx - np.log(np.sum(np.exp(logits - mx), axis=-1, keepdims=True))
    return float(np.mean(lsm[:, int(y)]))


def layer_kls(model):
    """Per-layer KL values (hidden layers first, classifier last)."""
    t = _leaves(model)
    cfg = model.config
    out = []
    for name in layer_names(cfg):
        Lz = inducing_chol_graph(t[name + ".Z"], t[name + ".log_lengthscale"], t[name + ".log_variance"],
                                 cfg.jitter)
        out.append(float(kl_graph(Lz, t[name + ".q_mu"], q_sqrt_from_raw(t[name + ".q_sqrt"])).value))
    return np.array(out)


def _batch(batch_size, num_samples):
    return batch_size if batch_size is not None else max(1, MAX_PATHS // max(int(num_samples), 1))


def elbo(images, labels, model, num_samples=TRAIN_SAMPLES, total_n=None, seed=0, batch_size=None):
    """Value-only ELBO estimate.

    Inputs larger than ``batch_size`` images (default: ``MAX_PATHS`` sampled
    paths) are evaluated in batches, with noise seeded per batch from ``seed``
    and the batch start, to bound memory.  The expected log-likelihood is
    summed over batches and the KL added once.
    """
    n = len(images)
    total_n = n if total_n is None else total_n
    batch_size = _batch(batch_size, num_samples)
    t = _leaves(model)
    if n <= batch_size:
        _, ell, kls = elbo_graph(t, model.config, images, labels, num_samples, total_n, seed)
        ell_v = float(ell.value)
    else:
        ell_sum = 0.0
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            _, ell, kls = elbo_graph(t, model.config, images[start:stop], labels[start:stop], num_samples,
                                     stop - start, seed_seq(seed, start))
            ell_sum += float(ell.value)
        ell_v = ell_sum * (total_n / n)
    per_layer = np.array([float(k.value) for k in kls])
    kl_total = float(np.sum(per_layer))
    return ELBOEstimate(value=ell_v - kl_total, expected_loglik=ell_v, kl_total=kl_total, per_layer_kl=per_layer)


def predict(images, model, num_samples=EVAL_SAMPLES, seed=0, batch_size=None):
    """Class probabilities ``N x C_y``: softmax averaged over sampled paths.

    Images are processed ``batch_size`` at a time (default: ``MAX_PATHS``
    sampled paths per batch).
    """
    images = np.asarray(images, dtype=np.float64)
    batch_size = _batch(batch_size, num_samples)
    out = []
    for start in range(0, len(images), batch_size):
        logits = forward_sample(images[start:start + batch_size], model, num_samples, seed_seq(seed, start))
        mx = logits.max(axis=-1, keepdims=True)
        p = np.exp(logits - mx)
        p /= p.sum(axis=-1, keepdims=True)
        probs = p.mean(axis=0)
        out.append(probs / probs.sum(axis=-1, keepdims=True))
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.num_classes))
