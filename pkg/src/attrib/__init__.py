"""Class-specific relevance maps for small vision/text transformers.

Pure numpy: a tape-based autodiff, a pre-norm transformer, relevance
propagation rules, several explanation methods and desk-scale evaluation.
"""
from .explainers import CLASS_AGNOSTIC, METHODS, RelevanceMap, explain
from .model import Model, ModelConfig, forward_record, init_model, load_model, save_model
from .relevance import CLASSIC_LRP, POSITIVE_SUBSET, RuleSet, propagate_network

__version__ = "0.1.0"

__all__ = [
    "CLASS_AGNOSTIC", "CLASSIC_LRP", "METHODS", "Model", "ModelConfig", "POSITIVE_SUBSET",
    "RelevanceMap", "RuleSet", "explain", "forward_record", "init_model", "load_model",
    "propagate_network", "save_model",
]
