"""Dual-distribution anomaly detection with masked autoencoders.

Everything runs on a small reverse-mode autodiff engine over float64 numpy
arrays, so results are bit-reproducible on a CPU.
"""

from .config import RunConfig
from .estimators import AMAE, MaskedAutoencoder, ProxyAnomalyClassifier
from .exceptions import AMAEError
from .pipeline import run_pipeline, run_sweep
from .synth import build_split, load_split, save_split

__version__ = "0.1.0"

__all__ = [
    "AMAE",
    "AMAEError",
    "MaskedAutoencoder",
    "ProxyAnomalyClassifier",
    "RunConfig",
    "build_split",
    "load_split",
    "run_pipeline",
    "run_sweep",
    "save_split",
]
