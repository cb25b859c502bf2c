"""Seeded synthetic tasks with known evidence locations.

Image items carry a bright oriented-bar pattern in one patch of the grid;
the pattern identifies the class and its patch is the ground-truth mask.
Text items contain sentinel tokens whose kind decides the label; their
positions form the gold rationale.

Training sets may also carry neutral items (label ``NEUTRAL``): blank
backgrounds and images holding both patterns, with a uniform target. They
keep the classifier from encoding one class as "the other pattern is
absent", so each class has its own positive evidence.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..model import ModelConfig

# content vocabulary for the text task: 0 = CLS, 1 = UNK
FILLER_IDS = tuple(range(2, 12))
SENTINEL_IDS = {0: (12, 13), 1: (14, 15)}
TEXT_VOCAB_SIZE = 16
NEUTRAL = -1


def class_pattern(c: int, p: int = 4) -> np.ndarray:
    """Binary p x p pattern for class ``c``: horizontal bars, vertical bars, then seeded blobs."""
    bars = (np.arange(p) % 2 == 0).astype(float)
    if c == 0:
        return np.repeat(bars[:, None], p, axis=1)
    if c == 1:
        return np.repeat(bars[None, :], p, axis=0)
    rng = np.random.default_rng(1000 + c)
    return (rng.random((p, p)) < 0.5).astype(float)


@dataclass
class SyntheticItem:
    input: np.ndarray
    label: int
    mask: np.ndarray | None = None
    masks: dict[int, np.ndarray] = field(default_factory=dict)
    gold: frozenset[int] = frozenset()


@dataclass
class SyntheticDataset:
    modality: str
    seed: int
    items: list[SyntheticItem]
    two_object: bool = False

    def __len__(self) -> int:
        return len(self.items)

    def inputs(self) -> np.ndarray:
        return np.stack([it.input for it in self.items])

    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items])

    def labelled(self) -> "SyntheticDataset":
        """The items with a definite class (neutral items dropped)."""
        return SyntheticDataset(self.modality, self.seed,
                                [it for it in self.items if it.label != NEUTRAL], self.two_object)


def _paint(img: np.ndarray, patch: int, pattern: np.ndarray, rng, grid_w: int,
           amplitude: float = 0.8) -> np.ndarray:
    p = pattern.shape[0]
    r, c = divmod(patch, grid_w)
    mask = np.zeros(img.shape, dtype=bool)
    img[r * p:(r + 1) * p, c * p:(c + 1) * p] = 0.15 + amplitude * pattern + rng.uniform(0, 0.05, (p, p))
    mask[r * p:(r + 1) * p, c * p:(c + 1) * p] = True
    return mask


def gen_synthetic_dataset(modality: str = "image", n_items: int = 100, seed: int = 0,
                          two_object: bool = False, classes: int = 2,
                          image_size: tuple[int, int] = (16, 16), patch_size: int = 4,
                          text_len: int = 16, neutral_items: int = 0) -> SyntheticDataset:
    """``n_items`` labelled items, then ``neutral_items`` neutral ones (image only).

    A third of the neutral items are blank, the rest carry both patterns.
    """
    if n_items < 1:
        raise ValueError("n_items must be >= 1")
    if neutral_items < 0 or neutral_items and modality != "image":
        raise ValueError("neutral items are only defined for the image task")
    rng = np.random.default_rng(seed)
    items = []
    if modality == "image":
        H, W = image_size
        gh, gw = H // patch_size, W // patch_size
        for _ in range(n_items):
            img = rng.uniform(0.0, 0.3, (H, W))
            if two_object:
                patches = rng.choice(gh * gw, size=2, replace=False)
                masks = {c: _paint(img, int(patches[c]), class_pattern(c, patch_size), rng, gw)
                         for c in (0, 1)}
                label = int(rng.integers(2))
                items.append(SyntheticItem(img, label, masks[label], masks))
            else:
                label = int(rng.integers(classes))
                patch = int(rng.integers(gh * gw))
                mask = _paint(img, patch, class_pattern(label, patch_size), rng, gw)
                items.append(SyntheticItem(img, label, mask, {label: mask}))
        for j in range(neutral_items):
            img = rng.uniform(0.0, 0.3, (H, W))
            masks = {}
            if j % 3:
                patches = rng.choice(gh * gw, size=2, replace=False)
                masks = {c: _paint(img, int(patches[c]), class_pattern(c, patch_size), rng, gw)
                         for c in (0, 1)}
            items.append(SyntheticItem(img, NEUTRAL, None, masks))
    elif modality == "text":
        for _ in range(n_items):
            label = int(rng.integers(2))
            ids = rng.choice(FILLER_IDS, size=text_len)
            k = int(rng.integers(1, 4))
            pos = np.sort(rng.choice(text_len, size=k, replace=False))
            ids[pos] = rng.choice(SENTINEL_IDS[label], size=k)
            items.append(SyntheticItem(ids.astype(np.float64), label,
                                       gold=frozenset(int(i) for i in pos)))
    else:
        raise ValueError(f"unknown modality {modality!r}")
    return SyntheticDataset(modality, seed, items, two_object)


def default_config(modality: str = "image", classes: int = 2) -> ModelConfig:
    if modality == "image":
        return ModelConfig(modality="image", classes=classes)
    return ModelConfig(modality="text", classes=2, vocab_size=TEXT_VOCAB_SIZE, text_len=16,
                       patch_size=1, image_size=(1, 1))


def text_vocab() -> dict[str, int]:
    """Token strings for the synthetic text task (whitespace-tokenised input)."""
    vocab = {"[CLS]": 0, "[UNK]": 1}
    vocab.update({f"w{i}": i for i in FILLER_IDS})
    vocab.update({"good": 12, "great": 13, "bad": 14, "awful": 15})
    return vocab
