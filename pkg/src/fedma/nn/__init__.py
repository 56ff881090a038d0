"""Minimal deterministic neural-network engine."""
from .layers import LSTM_GATES, Conv2d, Dense, Dropout, Embedding, Layer, Lstm, MaxPool
from .network import (
    NetworkModel,
    backward,
    build_model,
    char_lstm,
    cross_entropy,
    evaluate,
    forward,
    lenet,
    partial_forward,
    logits,
    mlp,
    predict,
    predict_proba,
    small_cnn,
    softmax,
    vgg9,
)
from .training import SgdConfig, prox_penalty, train_local
from . import checkpoint

__all__ = [
    "LSTM_GATES", "Conv2d", "Dense", "Dropout", "Embedding", "Layer", "Lstm", "MaxPool",
    "NetworkModel", "backward", "build_model", "char_lstm", "cross_entropy", "evaluate",
    "forward", "partial_forward", "lenet", "logits", "mlp", "predict", "predict_proba", "small_cnn", "softmax",
    "vgg9", "SgdConfig", "prox_penalty", "train_local", "checkpoint",
]
