"""Diffusion-based sequential recommendation."""
from .approximator import Approximator, ConditioningConfig, TransformerConfig, build_model
from .data import SplitDataset, Vocabulary, load_bundle, prepare, save_bundle
from .diffusion import DiffusionConfig, NoiseSchedule, build_schedule
from .evaluation import evaluate, paired_t_test
from .inference import InferenceConfig, Recommender, ensemble_infer, reverse_generate
from .training import ModelConfigs, TrainConfig, fit, load_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Approximator",
    "ConditioningConfig",
    "DiffusionConfig",
    "InferenceConfig",
    "ModelConfigs",
    "NoiseSchedule",
    "Recommender",
    "SplitDataset",
    "TrainConfig",
    "TransformerConfig",
    "Vocabulary",
    "build_model",
    "build_schedule",
    "ensemble_infer",
    "evaluate",
    "fit",
    "load_bundle",
    "load_checkpoint",
    "paired_t_test",
    "prepare",
    "reverse_generate",
    "save_bundle",
]
