"""Unified spatio-temporal graph convolution for traffic speed forecasting."""

from .graph import NEIGHBORS_AND_SELF, SELF_ONLY, build_st_adjacency
from .model import init_params, model_forward
from .training import TrainConfig, evaluate, train

__all__ = ["NEIGHBORS_AND_SELF", "SELF_ONLY", "TrainConfig", "build_st_adjacency", "evaluate", "init_params",
           "model_forward", "train"]
