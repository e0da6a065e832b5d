"""The network, its configuration and parameter storage."""

from __future__ import annotations

from .config import ModelConfig
from .network import DenoiseInputs, GraphBatch, MatrisPotential, ModelOutput, Prediction, forward, predict
from .params import ParameterSet, init_params, load_checkpoint, parameter_shapes, save_checkpoint

__all__ = [
    "ModelConfig",
    "ParameterSet",
    "init_params",
    "parameter_shapes",
    "save_checkpoint",
    "load_checkpoint",
    "GraphBatch",
    "ModelOutput",
    "Prediction",
    "DenoiseInputs",
    "MatrisPotential",
    "forward",
    "predict",
]
