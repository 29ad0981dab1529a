"""Probabilistic dynamics models over (state, action) -> state-delta."""

from .base import PredictiveGaussian, Standardizer, predict_arrays
from .gp import GpModel, gp_fit, gp_predict
from .dgcn import DgcnModel, dgcn_fit, dgcn_forward, dgcn_predict
from .pnn import EpnnModel, PnnModel, epnn_fit, epnn_predict, pnn_fit, pnn_loss
from .io import load_model, save_model

__all__ = [
    "PredictiveGaussian",
    "Standardizer",
    "predict_arrays",
    "GpModel",
    "gp_fit",
    "gp_predict",
    "DgcnModel",
    "dgcn_fit",
    "dgcn_forward",
    "dgcn_predict",
    "PnnModel",
    "EpnnModel",
    "pnn_loss",
    "pnn_fit",
    "epnn_fit",
    "epnn_predict",
    "load_model",
    "save_model",
]
