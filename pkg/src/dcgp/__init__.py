"""Deep convolutional Gaussian process classifiers in numpy.

Hot loops (RBF cross-covariances, weighted patch kernels, patch gathering)
are compiled with numba when available; set ``DCGP_NUMBA=0`` to force the
pure-numpy implementations.
"""
from ._kernels import BACKEND
from .errors import DCGPError
from .kernels import RBFHyper
from .layers import SVGPLayerParams, VariationalGaussian, conditional_moments, kl_to_prior
from .model import DeepModel, LayerConfig, ModelConfig, elbo, forward_sample, layer_kls, predict
from .patches import PatchConfig, extract_patches, output_shape
from .train import TrainConfig, deepen, init_model, load_checkpoint, save_checkpoint, train_loop

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DCGPError",
    "DeepModel",
    "LayerConfig",
    "ModelConfig",
    "PatchConfig",
    "RBFHyper",
    "SVGPLayerParams",
    "TrainConfig",
    "VariationalGaussian",
    "conditional_moments",
    "deepen",
    "elbo",
    "extract_patches",
    "forward_sample",
    "init_model",
    "kl_to_prior",
    "layer_kls",
    "load_checkpoint",
    "output_shape",
    "predict",
    "save_checkpoint",
    "train_loop",
]
