"""Tensor-CSPNet: SPD-manifold network over a (time-window x frequency-band)
grid of covariance matrices, with reference baselines and an experiment CLI.
"""
from .errors import ConfigError, DomainError, NumericalError, TensorCSPNetError
from .symmat import BACKEND, fun_spd, sym_eig
from .geometry import distance, exp_map, frechet_mean, geodesic, log_map, parallel_transport
from .model import Model, ModelConfig, TrainSpec, parameter_count, train
from .signal import BandSpec, SegSpec, tensor_stack
from .data import Dataset, DatasetMeta, load_dataset, save_dataset, synth_generate

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BandSpec", "ConfigError", "Dataset", "DatasetMeta", "DomainError", "Model",
    "ModelConfig", "NumericalError", "SegSpec", "TensorCSPNetError", "TrainSpec", "distance",
    "exp_map", "frechet_mean", "fun_spd", "geodesic", "load_dataset", "log_map",
    "parallel_transport", "parameter_count", "save_dataset", "sym_eig", "synth_generate",
    "tensor_stack", "train",
]
