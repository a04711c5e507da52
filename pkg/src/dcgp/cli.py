"""Command-line entry point: ``dcgp {train,deepen,evaluate,inspect}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Flags override values from an optional JSON ``--config`` file, which in turn
override the built-in defaults.
"""
import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import data as dio
from .errors import (
    BadMagic,
    CheckpointError,
    CountMismatch,
    DCGPError,
    LabelOutOfRange,
    NegativeVariance,
    NonFiniteGradient,
    NotPositiveDefinite,
    PatchTooLarge,
    SingularMatrix,
    TruncatedFile,
    ZeroVariance,
)
from .model import LayerConfig, ModelConfig, elbo, layer_kls, layer_names, predict, seed_seq
from .train import TrainConfig, deepen, init_model, load_checkpoint, save_checkpoint, train_loop

log = logging.getLogger("dcgp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.dcgp"
DATASETS = {"mnist": ((28, 28, 1), 10), "cifar10": ((32, 32, 3), 10)}


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- run config

@dataclass
class DatasetSpec:
    name: str = "mnist"
    data_dir: str = None
    subsample: int = None
    test_subsample: int = None
    balanced: bool = True


@dataclass
class RunConfig:
    command: str
    dataset: DatasetSpec
    model: ModelConfig
    train: TrainConfig
    out_dir: str = "runs/default"
    seed: int = 0
    max_steps: int = 5000

    def to_dict(self):
        return {"command": self.command, "dataset": asdict(self.dataset), "model": self.model.to_dict(),
                "train": asdict(self.train), "out_dir": self.out_dir, "seed": self.seed,
                "max_steps": self.max_steps}

    @classmethod
    def from_dict(cls, d):
        return cls(command=d["command"], dataset=DatasetSpec(**d["dataset"]),
                   model=ModelConfig.from_dict(d["model"]), train=TrainConfig(**d["train"]),
                   out_dir=d["out_dir"], seed=d["seed"], max_steps=d["max_steps"])


def parse_layer(spec, default_channels=10):
    """``"5x5:2:10"`` (filter h x w, stride, channels); stride and channels optional."""
    try:
        parts = spec.split(":")
        h, w = (int(v) for v in parts[0].lower().split("x"))
        stride = int(parts[1]) if len(parts) > 1 and parts[1] else 1
        channels = int(parts[2]) if len(parts) > 2 and parts[2] else default_channels
    except ValueError as exc:
        raise ConfigError(f"bad layer spec {spec!r}; expected HxW[:stride[:channels]]") from exc
    if min(h, w, stride) < 1 or channels < 0:
        raise ConfigError(f"layer spec {spec!r} has non-positive entries")
    return LayerConfig(h, w, stride, channels)


def default_layers(dataset, depth, channels=10):
    """Defaults: 5x5 filters, stride 2 on the first patch layer and 1 after; 4x4 first filter on CIFAR-10."""
    if depth < 1:
        raise ConfigError("--layers must be >= 1")
    out = []
    for i in range(depth):
        k = 4 if (dataset == "cifar10" and i == 0) else 5
        out.append(LayerConfig(k, k, 2 if i == 0 else 1, channels if i < depth - 1 else 0))
    return out[:-1], out[-1]


OPTION_KEYS = ("dataset", "data_dir", "layers", "layer_spec", "classifier_spec", "channels", "num_inducing",
               "subsample", "test_subsample", "first_n", "max_steps", "minibatch", "lr", "log_every",
               "checkpoint_every", "train_samples", "eval_samples", "kmeans_patches", "init_images", "seed",
               "out", "no_time", "likelihood", "jitter", "hidden_mean_init")


def _merged(args):
    opts = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                file_opts = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(file_opts, dict):
            raise ConfigError("config file must hold a JSON object")
        for k, v in file_opts.items():
            key = k.replace("-", "_")
            if key not in OPTION_KEYS:
                raise ConfigError(f"unknown config key {k!r}")
            opts[key] = v
    for key in OPTION_KEYS:
        v = getattr(args, key, None)
        if v is not None and v is not False:
            opts[key] = v
    return opts


def build_run_config(args, command="train"):
    """Validated :class:`RunConfig` from parsed flags (and ``--config``)."""
    o = _merged(args)
    name = o.get("dataset", "mnist")
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
    input_shape, num_classes = DATASETS[name]
    channels = int(o.get("channels", 10))
    if o.get("layer_spec"):
        specs = o["layer_spec"]
        specs = specs.split(",") if isinstance(specs, str) else list(specs)
        layers = [parse_layer(s, channels) for s in specs if s]
        if "layers" in o and int(o["layers"]) != len(layers) + 1:
            raise ConfigError("--layers disagrees with --layer-spec (depth = conv layers + classifier)")
        classifier = parse_layer(o.get("classifier_spec", "5x5:1"), 0)
    else:
        layers, classifier = default_layers(name, int(o.get("layers", 1)), channels)
        if o.get("classifier_spec"):
            classifier = parse_layer(o["classifier_spec"], 0)
    classifier.channels = 0
    seed = int(o.get("seed", 0))
    try:
        model = ModelConfig(input_shape=input_shape, num_classes=num_classes, layers=layers,
                            classifier=classifier, num_inducing=int(o.get("num_inducing", 384)),
                            likelihood=o.get("likelihood", "softmax"), jitter=float(o.get("jitter", 1e-6)))
        model.shapes()
        if model.num_inducing < 1:
            raise ValueError("--num-inducing must be positive")
        train = TrainConfig(minibatch=int(o.get("minibatch", 32)), lr0=float(o.get("lr", 0.01)),
                            log_every=int(o.get("log_every", 10)),
                            checkpoint_every=int(o.get("checkpoint_every", 1000)),
                            train_samples=int(o.get("train_samples", 1)),
                            eval_samples=int(o.get("eval_samples", 25)),
                            kmeans_patches=int(o.get("kmeans_patches", 10_000)),
                            init_images=int(o.get("init_images", 1000)),
                            record_time=not o.get("no_time", False), seed=seed,
                            hidden_mean_init=o.get("hidden_mean_init", "zero"))
    except (ValueError, TypeError, PatchTooLarge) as exc:
        raise ConfigError(str(exc)) from exc
    for key in ("subsample", "test_subsample"):
        if key in o and int(o[key]) < 1:
            raise ConfigError(f"--{key.replace('_', '-')} must be positive")
    if int(o.get("max_steps", 0)) < 0:
        raise ConfigError("--max-steps must be non-negative")
    dataset = DatasetSpec(name=name, data_dir=o.get("data_dir"), subsample=o.get("subsample"),
                          test_subsample=o.get("test_subsample"), balanced=not o.get("first_n", False))
    return RunConfig(command=command, dataset=dataset, model=model, train=train,
                     out_dir=o.get("out", "runs/default"), seed=seed, max_steps=int(o.get("max_steps", 5000)))


# ---------------------------------------------------------------------- data

def _subsample(ds, n, balanced):
    if n is None or n >= len(ds):
        return ds
    return dio.take_balanced(ds, n) if balanced else dio.take_first(ds, n)


def load_data(spec, split, n=None):
    """Split of the configured dataset; subsets are deterministic (first examples per class)."""
    try:
        ds = dio.load_split(spec.name, split, spec.data_dir)
        return _subsample(ds, n, spec.balanced)
    except (OSError, BadMagic, TruncatedFile, CountMismatch, ValueError) as exc:
        raise DataError(f"{spec.name}/{split}: {exc}") from exc


def _normalize(ds, stats):
    try:
        return dio.normalize(ds, stats)
    except ZeroVariance as exc:
        raise DataError(str(exc)) from exc


def _check_input(ds, model_cfg):
    if ds.images.shape[1:] != tuple(model_cfg.input_shape):
        raise DataError(f"data shape {ds.images.shape[1:]} does not match model input {tuple(model_cfg.input_shape)}")


# ------------------------------------------------------------------ commands

def evaluate_model(model, ds, num_samples, seed):
    """Accuracy, mean test log-likelihood and ``C x C`` confusion counts (rows true, cols predicted)."""
    probs = predict(ds.images, model, num_samples, seed=seed)
    pred = probs.argmax(axis=1)
    C = model.config.num_classes
    if np.any((ds.labels < 0) | (ds.labels >= C)):
        raise LabelOutOfRange(f"labels outside [0, {C})")
    loglik = np.log(np.maximum(probs[np.arange(len(pred)), ds.labels], 1e-300))
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (ds.labels, pred), 1)
    return float(np.mean(pred == ds.labels)), float(np.mean(loglik)), confusion


def cmd_train(args):
    run = build_run_config(args, "train")
    spec = run.dataset
    adam, start, norm = None, 0, None
    if args.resume:
        model, train_cfg, adam, norm, saved = _load(args.resume)
        start = int(saved.get("step", 0))
        if "run" in saved:
            saved_run = RunConfig.from_dict(saved["run"])
            spec, train_cfg = saved_run.dataset, saved_run.train
            run = RunConfig("train", spec, model.config, train_cfg, run.out_dir, saved_run.seed, run.max_steps)
        elif train_cfg is not None:
            run.train = train_cfg
        run.model = model.config
    train_ds = load_data(spec, "train", spec.subsample)
    _check_input(train_ds, run.model)
    train_ds, stats = _normalize(train_ds, norm)
    test_ds = None
    try:
        test_ds = load_data(spec, "test", spec.test_subsample or spec.subsample)
        test_ds, _ = _normalize(test_ds, stats)
    except DataError as exc:
        log.warning("no test split (%s); skipping test accuracy", exc)
    if not args.resume:
        model = init_model(run.model, train_ds.images, run.train)
    remaining = max(run.max_steps - start, 0)
    print(f"training depth-{run.model.depth} model on {len(train_ds)} images, steps {start}..{start + remaining}")
    model, adam, rows = train_loop(model, train_ds.images, train_ds.labels, run.train, remaining,
                                   out_dir=run.out_dir, adam=adam, start_step=start, norm=stats,
                                   extra={"run": run.to_dict()})
    _train_summary(model, train_ds, test_ds, run)
    return EXIT_OK


def _train_summary(model, train_ds, test_ds, run):
    est = elbo(train_ds.images, train_ds.labels, model, run.train.train_samples, seed=seed_seq(run.seed, 5))
    print(f"final train ELBO: {est.value:.6f} (E[loglik] {est.expected_loglik:.6f}, KL {est.kl_total:.6f})")
    if test_ds is not None:
        acc, ll, _ = evaluate_model(model, test_ds, run.train.eval_samples, seed_seq(run.seed, 6))
        print(f"test accuracy: {acc:.4f}  mean test log-likelihood: {ll:.6f}")


def _load(path):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_deepen(args):
    donor, train_cfg, _, norm, saved = _load(args.donor)
    run = RunConfig.from_dict(saved["run"]) if "run" in saved else None
    target = args.layers if args.layers is not None else donor.config.depth + 1
    if target != donor.config.depth + 1:
        raise ConfigError(f"donor has depth {donor.config.depth}; deepen builds depth {donor.config.depth + 1}, "
                          f"not {target}")
    channels = args.channels if args.channels is not None else 10
    if args.new_layer:
        new_layer = parse_layer(args.new_layer, channels)
    else:
        stride = 2 if donor.config.depth == 1 else 1
        name = run.dataset.name if run else "mnist"
        k = 4 if (name == "cifar10" and donor.config.depth == 1) else 5
        new_layer = LayerConfig(k, k, stride, channels)
    if donor.config.depth == 1 and not args.classifier_spec and not args.new_layer:
        # the first patch layer takes over stride 2; the classifier moves to stride 1
        classifier = LayerConfig(donor.config.classifier.patch_h, donor.config.classifier.patch_w, 1, 0)
    elif args.classifier_spec:
        classifier = parse_layer(args.classifier_spec, 0)
    else:
        classifier = donor.config.classifier
    if classifier != donor.config.classifier:
        cfg = donor.config.to_dict()
        cfg["classifier"] = asdict(classifier)
        donor = type(donor)(ModelConfig.from_dict(cfg), donor.params)
    train_cfg = train_cfg or TrainConfig()
    if args.hidden_mean_init:
        train_cfg = replace(train_cfg, hidden_mean_init=args.hidden_mean_init)
        if run is not None:
            run.train = train_cfg
    spec = run.dataset if run else DatasetSpec()
    if args.dataset:
        spec.name = args.dataset
    if args.data_dir:
        spec.data_dir = args.data_dir
    seed = args.seed if args.seed is not None else train_cfg.seed
    train_ds = load_data(spec, "train", spec.subsample)
    _check_input(train_ds, donor.config)
    train_ds, stats = _normalize(train_ds, norm)
    model = deepen(donor, new_layer, train_ds.images, train_cfg, seed=seed)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.donor)), "deepened")
    os.makedirs(out, exist_ok=True)
    extra = {}
    if run is not None:
        run.model = model.config
        run.out_dir = out
        extra["run"] = run.to_dict()
    path = os.path.join(out, CHECKPOINT_NAME)
    save_checkpoint(path, model, train_cfg, None, stats, step=0, extra=extra)
    est = elbo(train_ds.images, train_ds.labels, model, train_cfg.train_samples, seed=seed_seq(seed, 5))
    print(f"deepened depth {donor.config.depth} -> {model.config.depth}; wrote {path}")
    print(f"initial train ELBO: {est.value:.6f}")
    return EXIT_OK


def cmd_evaluate(args):
    model, train_cfg, _, norm, saved = _load(args.checkpoint)
    run = RunConfig.from_dict(saved["run"]) if "run" in saved else None
    spec = run.dataset if run else DatasetSpec()
    if args.dataset:
        spec.name = args.dataset
    if args.data_dir:
        spec.data_dir = args.data_dir
    n = args.subsample if args.subsample is not None else (spec.test_subsample or spec.subsample
                                                           if args.split == "test" else spec.subsample)
    seed = args.seed if args.seed is not None else (run.seed if run else 0)
    ds = load_data(spec, args.split, n)
    _check_input(ds, model.config)
    ds, _ = _normalize(ds, norm)
    S = args.samples or (train_cfg.eval_samples if train_cfg else 25)
    acc, ll, confusion = evaluate_model(model, ds, S, seed_seq(seed, 6))
    kls = layer_kls(model)
    print(f"split {args.split}: N={len(ds)} S={S}")
    print(f"accuracy: {acc:.6f}")
    print(f"mean log-likelihood: {ll:.6f}")
    for name, kl in zip(layer_names(model.config), kls):
        print(f"KL {name}: {float(kl)!r}")
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, f"evaluation_{args.split}.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "n", "samples", "accuracy", "mean_loglik"])
        w.writerow([args.split, len(ds), S, repr(acc), repr(ll)])
    with open(os.path.join(out, f"confusion_{args.split}.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + list(range(model.config.num_classes)))
        for c, row in enumerate(confusion):
            w.writerow([c] + [int(v) for v in row])
    return EXIT_OK


def _write_pnm(path, img):
    """Binary PGM (``H x W``) or PPM (``H x W x 3``), min-max scaled to 0..255."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    pix = np.round(255 * scaled).astype(np.uint8)
    magic = b"P6" if img.ndim == 3 else b"P5"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def export_inducing(model, out_dir):
    """One image per inducing patch per layer; multi-channel inputs show channel 0 (or RGB for 3 channels)."""
    os.makedirs(out_dir, exist_ok=True)
    shapes = model.config.shapes()
    cfgs = list(model.config.layers) + [model.config.classifier]
    written = []
    for l, (name, lc) in enumerate(zip(layer_names(model.config), cfgs)):
        cin = shapes[l].channels
        Z = model.params[f"{name}.Z"].reshape(-1, lc.patch_h, lc.patch_w, cin)
        for m, z in enumerate(Z):
            img, ext = (z, "ppm") if cin == 3 else (z[..., 0], "pgm")
            path = os.path.join(out_dir, f"{name}_z{m:04d}.{ext}")
            _write_pnm(path, img)
            written.append(path)
    return written


def cmd_inspect(args):
    model, train_cfg, _, _, saved = _load(args.checkpoint)
    cfg = model.config
    shapes = cfg.shapes()
    print(f"depth {cfg.depth}: {len(cfg.layers)} conv + 1 classifier; input {tuple(shapes[0])}; "
          f"M={cfg.num_inducing}; step {saved.get('step', 0)}")
    kls = layer_kls(model)
    cfgs = list(cfg.layers) + [cfg.classifier]
    for l, (name, lc, kl) in enumerate(zip(layer_names(cfg), cfgs, kls)):
        p = model.params
        out = tuple(shapes[l + 1]) if name != "classifier" else (shapes[-1].height, shapes[-1].width, cfg.num_classes)
        print(f"{name}: filter {lc.patch_h}x{lc.patch_w} stride {lc.stride} in {tuple(shapes[l])} out {out} "
              f"Z {p[name + '.Z'].shape} q_mu {p[name + '.q_mu'].shape} "
              f"lengthscale {float(np.exp(p[name + '.log_lengthscale'])):.6g} "
              f"variance {float(np.exp(p[name + '.log_variance'])):.6g} KL {float(kl)!r}")
    if args.export:
        paths = export_inducing(model, args.export)
        print(f"exported {len(paths)} inducing patches to {args.export}")
    return EXIT_OK


# ------------------------------------------------------------------- parsing

def _add_run_flags(p):
    p.add_argument("--config", help="JSON file of option values (flags win)")
    p.add_argument("--dataset", choices=sorted(DATASETS))
    p.add_argument("--data-dir", help=f"dataset root (default ${dio.DATA_DIR_ENV})")
    p.add_argument("--layers", type=int, help="depth: conv layers + classifier")
    p.add_argument("--layer-spec", help="comma list of conv layers HxW:stride:channels")
    p.add_argument("--classifier-spec", help="classifier HxW:stride")
    p.add_argument("--channels", type=int, help="channels per conv layer (default 10)")
    p.add_argument("--num-inducing", type=int, help="inducing patches per layer (default 384)")
    p.add_argument("--subsample", type=int, help="class-balanced training subset size")
    p.add_argument("--test-subsample", type=int, help="test subset size (default: --subsample)")
    p.add_argument("--first-n", action="store_true", help="take the first N examples instead of balancing")
    p.add_argument("--max-steps", type=int, help="total optimization steps (default 5000; 0 only initializes)")
    p.add_argument("--minibatch", type=int)
    p.add_argument("--lr", type=float, help="initial Adam learning rate")
    p.add_argument("--log-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--train-samples", type=int)
    p.add_argument("--eval-samples", type=int)
    p.add_argument("--kmeans-patches", type=int)
    p.add_argument("--init-images", type=int)
    p.add_argument("--likelihood", choices=["softmax", "gaussian"])
    p.add_argument("--jitter", type=float)
    p.add_argument("--hidden-mean-init", choices=["zero", "pca"],
                   help="initial variational means of hidden layers (default zero)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-time", action="store_true", help="write 0 in the seconds column (reproducible CSV)")


def build_parser():
    parser = argparse.ArgumentParser(prog="dcgp", description="Deep convolutional Gaussian process classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model (or resume a checkpoint)")
    _add_run_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("deepen", help="insert a fresh layer before the classifier of a trained model")
    p.add_argument("donor", help="checkpoint of the shallower model")
    p.add_argument("--layers", type=int, help="target depth (must be donor depth + 1)")
    p.add_argument("--new-layer", help="inserted layer HxW:stride:channels")
    p.add_argument("--classifier-spec", help="classifier HxW:stride after insertion")
    p.add_argument("--channels", type=int)
    p.add_argument("--hidden-mean-init", choices=["zero", "pca"],
                   help="initial variational means of the inserted layer (default: donor's setting)")
    p.add_argument("--dataset", choices=sorted(DATASETS))
    p.add_argument("--data-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory for the deepened checkpoint")
    p.set_defaults(func=cmd_deepen)

    p = sub.add_parser("evaluate", help="accuracy, log-likelihood and confusion counts")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", choices=sorted(DATASETS))
    p.add_argument("--data-dir")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--subsample", type=int)
    p.add_argument("--samples", type=int, help="Monte Carlo samples S")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="directory for evaluation and confusion CSVs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="print layer shapes, hyperparameters and KLs")
    p.add_argument("checkpoint")
    p.add_argument("--export", metavar="DIR", help="write inducing patches as PGM/PPM images")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, LabelOutOfRange) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NotPositiveDefinite, NonFiniteGradient, NegativeVariance, SingularMatrix, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DCGPError as exc:
        # remaining package errors are shape / configuration problems
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
