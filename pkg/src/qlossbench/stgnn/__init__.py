"""Spatiotemporal graph network decoder with logical and loss heads."""

from qlossbench.stgnn.checkpoint import load_model, save_model
from qlossbench.stgnn.model import STGNN, ModelConfig, encode, encode_dataset
from qlossbench.stgnn.train import OptimizerConfig, predict, predict_loss_mask, train

__all__ = [
    "STGNN", "ModelConfig", "OptimizerConfig", "encode", "encode_dataset",
    "load_model", "predict", "predict_loss_mask", "save_model", "train",
]
