"""Run explainers through the evaluation protocols and serialise the results."""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..explainers import CLASS_AGNOSTIC, METHODS, RelevanceMap, cls_row_to_map, explain
from ..model import Model, forward_record
from .datasets import SyntheticDataset
from .metrics import (CLASS_MODES, POLARITIES, perturbation_test, segmentation_metrics,
                      token_f1_topk)

BASELINES = ("random",)
TEXT_K = tuple(range(1, 9))


def thread_count() -> int:
    """Worker threads for per-item work, capped by ``ATTRIB_THREADS`` (default 1)."""
    raw = os.environ.get("ATTRIB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"ATTRIB_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def ordered_map(fn, items, threads: int | None = None) -> list:
    threads = thread_count() if threads is None else threads
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def random_map(model: Model, index: int, t: int, seed: int) -> RelevanceMap:
    """Uniform-random token scores, seeded per (seed, item, class)."""
    cfg = model.config
    scores = np.random.default_rng([seed, index, t]).random(cfg.seq_len - 1)
    rmap = RelevanceMap("random", t, scores)
    if cfg.modality == "image":
        rmap.grid = cfg.grid
        rmap.pixel_map = np.random.default_rng([seed, index, t, 1]).random(tuple(cfg.image_size))
    return rmap


class MapCache:
    """Explanations per (item, class), computed at most once."""

    def __init__(self, model: Model, dataset: SyntheticDataset, method: str, seed: int = 0):
        if method not in METHODS and method not in BASELINES:
            raise ValueError(f"unknown method {method!r}")
        self.model, self.dataset, self.method, self.seed = model, dataset, method, seed
        self._maps: dict[tuple[int, int], RelevanceMap] = {}

    def _compute(self, key: tuple[int, int]) -> RelevanceMap:
        i, t = key
        if self.method == "random":
            return random_map(self.model, i, t, self.seed)
        return explain(self.model, self.dataset.items[i].input, self.method, t)

    def get_many(self, keys: list[tuple[int, int]]) -> list[RelevanceMap]:
        todo = sorted({k for k in keys if k not in self._maps})
        for k, m in zip(todo, ordered_map(self._compute, todo)):
            self._maps[k] = m
        return [self._maps[k] for k in keys]


def _targets(model: Model, dataset: SyntheticDataset, class_mode: str) -> list[int]:
    if class_mode == "target":
        return [int(t) for t in dataset.labels()]
    pred = forward_record(model, dataset.inputs()).output_logits.argmax(axis=-1)
    return [int(t) for t in pred]


def evaluate_method(model: Model, dataset: SyntheticDataset, method: str, seed: int = 0,
                    cache: MapCache | None = None) -> dict:
    """All protocols applicable to the dataset's modality for one method."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    cache = cache or MapCache(model, dataset, method, seed)
    out: dict = {"method": method, "class_agnostic": method in CLASS_AGNOSTIC}
    n = len(dataset)
    if dataset.modality == "image":
        perturbation = []
        for class_mode in CLASS_MODES:
            keys = list(zip(range(n), _targets(model, dataset, class_mode)))
            maps = [m.pixel_map for m in cache.get_many(keys)]
            for polarity in POLARITIES:
                res = perturbation_test(model, dataset, None, polarity, class_mode, maps=maps)
                perturbation.append(res.to_dict())
        out["perturbation"] = perturbation
        keys = list(zip(range(n), _targets(model, dataset, "target")))
        maps = [m.pixel_map for m in cache.get_many(keys)]
        out["segmentation"] = segmentation_metrics(maps, [it.mask for it in dataset.items]).to_dict()
    else:
        keys = list(zip(range(n), _targets(model, dataset, "target")))
        scores = [m.token_scores for m in cache.get_many(keys)]
        ks = [k for k in TEXT_K if k <= model.config.seq_len - 1]
        f1 = [float(np.mean([token_f1_topk(s, it.gold, k) for s, it in zip(scores, dataset.items)]))
              for k in ks]
        out["token_f1"] = {"k": ks, "f1": f1}
    return out


def evaluate(model: Model, dataset: SyntheticDataset, methods, seed: int = 0,
             provenance: dict | None = None) -> dict:
    """Report dict: provenance header plus one entry per method, in request order."""
    methods = list(methods)
    for m in methods:
        if m not in METHODS and m not in BASELINES:
            raise ValueError(f"unknown method {m!r}")
    report = {"modality": dataset.modality, "dataset_seed": dataset.seed, "items": len(dataset),
              "seed": seed, "config": model.config.to_dict()}
    if provenance:
        report.update(provenance)
    report["methods"] = [evaluate_method(model, dataset, m, seed) for m in methods]
    return report


def composite_score(entry: dict) -> float:
    """Single number for ranking methods on the image task (higher is better).

    Negative-perturbation AUC minus positive-perturbation AUC (target class)
    plus mAP and mIoU.
    """
    auc = {(p["polarity"], p["class_mode"]): p["auc"] for p in entry["perturbation"]}
    seg = entry["segmentation"]
    return (auc[("negative", "target")] - auc[("positive", "target")]
            + seg["mAP"] + seg["mIoU"])


CSV_FIELDS = ("method", "table", "polarity", "class_mode", "metric", "x", "value")


def report_rows(report: dict) -> list[tuple]:
    rows = []
    for entry in report["methods"]:
        m = entry["method"]
        for p in entry.get("perturbation", []):
            for f, a in zip(p["fractions"], p["accuracy_at_fraction"]):
                rows.append((m, "perturbation", p["polarity"], p["class_mode"], "accuracy", f, a))
            rows.append((m, "perturbation", p["polarity"], p["class_mode"], "auc", "", p["auc"]))
        for name, v in entry.get("segmentation", {}).items():
            rows.append((m, "segmentation", "", "", name, "", v))
        if "token_f1" in entry:
            for k, v in zip(entry["token_f1"]["k"], entry["token_f1"]["f1"]):
                rows.append((m, "token_f1", "", "", "f1", k, v))
    return rows


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for row in report_rows(report):
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()
