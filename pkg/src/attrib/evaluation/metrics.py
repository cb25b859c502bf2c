"""Perturbation AUC, segmentation scores and top-k token F1."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy.integrate import trapezoid

from ..model import Model, forward_record

FRACTIONS = tuple(round(0.1 * i, 1) for i in range(1, 10))
POLARITIES = ("positive", "negative")
CLASS_MODES = ("predicted", "target")

PixelExplainer = Callable[[Model, np.ndarray, int], np.ndarray]


@dataclass
class PerturbationResult:
    polarity: str
    class_mode: str
    fractions: list[float] = field(default_factory=lambda: list(FRACTIONS))
    accuracy_at_fraction: list[float] = field(default_factory=list)
    auc: float = 0.0

    def to_dict(self) -> dict:
        return {"polarity": self.polarity, "class_mode": self.class_mode,
                "fractions": list(self.fractions),
                "accuracy_at_fraction": list(self.accuracy_at_fraction), "auc": self.auc}


@dataclass
class SegmentationScores:
    pixel_accuracy: float
    mAP: float
    mIoU: float

    def to_dict(self) -> dict:
        return {"pixel_accuracy": self.pixel_accuracy, "mAP": self.mAP, "mIoU": self.mIoU}


def auc(fractions: Iterable[float], values: Iterable[float]) -> float:
    """Trapezoidal area under ``values`` divided by the fraction span."""
    f = np.asarray(list(fractions), dtype=np.float64)
    v = np.asarray(list(values), dtype=np.float64)
    if f.shape != v.shape or f.size < 2:
        raise ValueError("need at least two matching fraction/value points")
    return float(trapezoid(v, f) / (f[-1] - f[0]))


def removal_order(pixel_map: np.ndarray, polarity: str) -> np.ndarray:
    """Flat pixel indices in removal order; ties go to the lower index."""
    flat = np.asarray(pixel_map, dtype=np.float64).reshape(-1)
    if polarity == "positive":
        return np.argsort(-flat, kind="stable")
    if polarity == "negative":
        return np.argsort(flat, kind="stable")
    raise ValueError(f"polarity must be one of {POLARITIES}, got {polarity!r}")


def masked_inputs(image: np.ndarray, pixel_map: np.ndarray, polarity: str,
                  fractions=FRACTIONS) -> np.ndarray:
    """One copy of ``image`` per fraction with that share of pixels set to 0."""
    order = removal_order(pixel_map, polarity)
    out = np.repeat(np.asarray(image, dtype=np.float64)[None], len(fractions), axis=0)
    flat = out.reshape(len(fractions), -1)
    for i, f in enumerate(fractions):
        flat[i, order[:int(round(f * order.size))]] = 0.0
    return out


def perturbation_test(model: Model, dataset, explainer: PixelExplainer, polarity: str,
                      class_mode: str, maps: list[np.ndarray] | None = None) -> PerturbationResult:
    """Mask pixels by relevance rank and track top-1 accuracy against dataset labels.

    ``explainer(model, image, t)`` returns an H x W map; ``t`` is the predicted
    class or the label depending on ``class_mode``. Precomputed ``maps`` skip
    the explainer entirely.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.modality != "image":
        raise ValueError("perturbation test needs pixel maps (image modality)")
    if class_mode not in CLASS_MODES:
        raise ValueError(f"class_mode must be one of {CLASS_MODES}, got {class_mode!r}")
    X, y = dataset.inputs(), dataset.labels()
    if maps is None:
        maps = explain_dataset(model, dataset, explainer, class_mode)
    batch = np.concatenate([masked_inputs(x, m, polarity) for x, m in zip(X, maps)])
    pred = forward_record(model, batch).output_logits.argmax(axis=-1)
    correct = (pred.reshape(len(y), len(FRACTIONS)) == y[:, None])
    acc = [float(a) for a in correct.mean(axis=0)]
    return PerturbationResult(polarity, class_mode, list(FRACTIONS), acc, auc(FRACTIONS, acc))


def explain_dataset(model: Model, dataset, explainer: PixelExplainer, class_mode: str):
    if class_mode == "target":
        targets = dataset.labels()
    else:
        targets = forward_record(model, dataset.inputs()).output_logits.argmax(axis=-1)
    return [np.asarray(explainer(model, it.input, int(t)), dtype=np.float64)
            for it, t in zip(dataset.items, targets)]


def average_precision(scores: np.ndarray, mask: np.ndarray) -> float:
    """All-points interpolated AP; tied scores form a single threshold."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    n_pos = int(m.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive pixel")
    order = np.argsort(-s, kind="stable")
    s, m = s[order], m[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]  # end of each tie group
    tp = np.cumsum(m)[last]
    precision = tp / (last + 1)
    recall = tp / n_pos
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def segmentation_metrics(maps, gts) -> SegmentationScores:
    """Pixel accuracy, mAP and two-class mIoU of maps against binary masks.

    Each map is binarised at its own mean (strictly above = foreground).
    Accuracy and IoU accumulate counts over the whole dataset; an IoU whose
    union is empty counts as 1.
    """
    maps, gts = list(maps), list(gts)
    if not maps or len(maps) != len(gts):
        raise ValueError(f"need equally many maps and masks, got {len(maps)} and {len(gts)}")
    correct = total = 0
    inter = np.zeros(2)
    union = np.zeros(2)
    aps = []
    for i, (m, g) in enumerate(zip(maps, gts)):
        m = np.asarray(m, dtype=np.float64)
        g = np.asarray(g, dtype=bool)
        if m.shape != g.shape:
            raise ValueError(f"item {i}: map shape {m.shape} != mask shape {g.shape}")
        if not g.any():
            raise ValueError(f"item {i}: ground-truth mask is empty")
        pred = m > m.mean()
        correct += int((pred == g).sum())
        total += g.size
        for c, (p, t) in enumerate(((~pred, ~g), (pred, g))):
            inter[c] += np.logical_and(p, t).sum()
            union[c] += np.logical_or(p, t).sum()
        aps.append(average_precision(m, g))
    ious = [1.0 if union[c] == 0 else inter[c] / union[c] for c in range(2)]
    return SegmentationScores(correct / total, float(np.mean(aps)), float(np.mean(ious)))


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")[:k]


def token_f1_topk(scores, gold, k: int) -> float:
    """F1 between the ``k`` highest-scoring token indices and the gold set."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if k <= 0:
        raise ValueError("k must be positive")
    if k > scores.size:
        raise ValueError(f"k={k} exceeds the {scores.size} scored tokens")
    pred = {int(i) for i in top_k(scores, k)}
    gold = {int(g) for g in gold}
    hit = len(pred & gold)
    if hit == 0:
        return 0.0
    p, r = hit / len(pred), hit / len(gold)
    return 2 * p * r / (p + r)


def random_explainer(seed: int = 0) -> PixelExplainer:
    """Uniform-random maps; reproducible for a fixed call sequence."""
    rng = np.random.default_rng(seed)

    def explain(model: Model, image: np.ndarray, t: int) -> np.ndarray:
        return rng.random(np.shape(image))
    return explain


def oracle_explainer(dataset) -> PixelExplainer:
    """Ground-truth mask of the matching item (looked up by identity)."""
    lookup = {id(it.input): it for it in dataset.items}

    def explain(model: Model, image: np.ndarray, t: int) -> np.ndarray:
        it = lookup[id(image)]
        return np.asarray(it.masks.get(t, it.mask), dtype=np.float64)
    return explain
