"""Generalized category discovery with instance- and cluster-level contextual losses."""

from .dataset import AugmentConfig, GcdDataset, ViewPair, augment_pair, gen_gaussian_gcd, load_embeddings, save_embeddings
from .evaluation import GcdMetrics, gcd_accuracy, hungarian_match
from .losses import LossBreakdown, LossConfig
from .model import ModelParams, classify, forward, init_params
from .numeric import Rng
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "GcdDataset",
    "GcdMetrics",
    "LossBreakdown",
    "LossConfig",
    "ModelParams",
    "Rng",
    "TrainConfig",
    "ViewPair",
    "augment_pair",
    "classify",
    "evaluate",
    "forward",
    "gcd_accuracy",
    "gen_gaussian_gcd",
    "hungarian_match",
    "init_params",
    "load_embeddings",
    "save_embeddings",
    "train",
]
