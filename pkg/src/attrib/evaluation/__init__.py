"""Synthetic tasks, toy training and the perturbation/segmentation/token-F1 protocols."""
from .datasets import NEUTRAL, SyntheticDataset, SyntheticItem, default_config, gen_synthetic_dataset
from .metrics import (FRACTIONS, PerturbationResult, SegmentationScores, auc, perturbation_test,
                      segmentation_metrics, token_f1_topk)
from .report import composite_score, evaluate
from .training import TrainResult, train_toy

__all__ = [
    "FRACTIONS", "NEUTRAL", "PerturbationResult", "SegmentationScores", "SyntheticDataset",
    "SyntheticItem", "TrainResult", "auc", "composite_score", "default_config", "evaluate",
    "gen_synthetic_dataset", "perturbation_test", "segmentation_metrics", "token_f1_topk",
    "train_toy",
]
