"""Federated learning with batch normalization and layer-wise statistic sync."""
from .kernels import BACKEND
from .nn import (BnLayerParams, BnStatGrads, BnStats, DenseLayerParams, ModelParams,
                 NetworkSpec, init_params, mlp_spec, mnist_spec, model_backward,
                 model_forward)
from .sim import Scheme, SchemeConfig, Simulation, run_experiment

__all__ = [
    "BACKEND", "BnLayerParams", "BnStatGrads", "BnStats", "DenseLayerParams",
    "ModelParams", "NetworkSpec", "Scheme", "SchemeConfig", "Simulation",
    "init_params", "mlp_spec", "mnist_spec", "model_backward", "model_forward",
    "run_experiment",
]
__version__ = "0.1.0"
