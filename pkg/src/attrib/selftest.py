"""Invariant suite behind ``attrib selftest``.

Each check returns ``(ok, detail)``. ``fault`` is a test hook that
deliberately breaks one piece so the suite can be shown to catch it.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .autodiff import finite_diff_check
from .explainers import explain
from .model import ModelConfig, forward_record, init_model
from .relevance import (POSITIVE_SUBSET, normalize_binary, propagate_binary,
                        propagate_lrp_classic, propagate_network)

FAULTS = ("no-normalization",)
MICRO = ModelConfig(modality="image", embed_dim=16, heads=2, head_dim=8, blocks=2, classes=2,
                    mlp_dim=32, patch_size=4, image_size=(16, 16))


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def _micro_case(seed: int):
    rng = np.random.default_rng(seed)
    model = init_model(MICRO, seed)
    x = rng.uniform(0.0, 1.0, MICRO.image_size)
    return model, x, int(rng.integers(MICRO.classes))


def check_conservation(fault=None, trials: int = 20):
    rules = replace(POSITIVE_SUBSET, normalize_binary=fault != "no-normalization")
    worst = 0.0
    for s in range(trials):
        model, x, t = _micro_case(s)
        rel = propagate_network(forward_record(model, x), t, rules)
        worst = max(worst, max(abs(v - 1.0) for v in rel.frontier_sums.values()))
    return worst <= 1e-6, f"max |frontier sum - 1| = {worst:.2e} over {trials} networks"


def check_add(fault=None, trials: int = 100):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(trials):
        u, v = rng.uniform(0.1, 2.0, (2, 8))
        R = rng.uniform(0.0, 1.0, 8)
        Ru, Rv = propagate_binary(u, v, R, "add")
        worst = max(worst, abs(Ru.sum() + Rv.sum() - R.sum()))
    return worst <= 1e-9, f"max add defect = {worst:.2e}"


def check_matmul_doubles(fault=None, trials: int = 100):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(trials):
        a = rng.uniform(0.1, 1.0, (4, 5))
        b = rng.uniform(0.1, 1.0, (5, 3))
        R = rng.uniform(0.0, 1.0, (4, 3))
        Ra, Rb = propagate_binary(a, b, R, "matmul")
        worst = max(worst, abs(Ra.sum() + Rb.sum() - 2.0 * R.sum()))
    return worst <= 1e-9, f"max |sum - 2 * R_in| = {worst:.2e}"


def check_matmul_conservation(fault=None, trials: int = 100):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(trials):
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        R = rng.uniform(0.0, 1.0, (4, 3))
        R /= R.sum()
        Ra, Rb = propagate_binary(a, b, R, "matmul")
        if fault != "no-normalization":
            Ra, Rb = normalize_binary(Ra, Rb, 1.0)
        worst = max(worst, abs(Ra.sum() + Rb.sum() - 1.0))
    return worst <= 1e-9, f"max normalised matmul defect = {worst:.2e}"


def check_normalized_bounds(fault=None, trials: int = 100):
    rng = np.random.default_rng(4)
    ok = True
    for _ in range(trials):
        Ru, Rv = rng.normal(size=(2, 6))
        if fault != "no-normalization":
            Ru, Rv = normalize_binary(Ru, Rv, 1.0)
        su, sv = Ru.sum(), Rv.sum()
        ok &= abs(su + sv - 1.0) <= 1e-9 and -1e-9 <= su <= 1 + 1e-9 and -1e-9 <= sv <= 1 + 1e-9
    return bool(ok), f"{trials} random branch pairs"


def skip_instability_case(a: float = 20.0, b: float = 20.0):
    """u = exp([a, b]), v = 1 - u, R = [1, 1]: u + v = 1 but each branch is huge."""
    u = np.exp([a, b])
    return u, 1.0 - u, np.ones(2)


def check_skip_stability(fault=None):
    u, v, R = skip_instability_case()
    Ru, Rv = propagate_binary(u, v, R, "add")
    raw = max(np.abs(Ru).max(), np.abs(Rv).max())
    if fault != "no-normalization":
        Ru, Rv = normalize_binary(Ru, Rv, float(R.sum()))
    bounded = all(0.0 <= s <= 2.0 for s in (Ru.sum(), Rv.sum()))
    return raw > 1e8 and bounded, f"raw |R| = {raw:.2e}, branch sums {Ru.sum():.3f}, {Rv.sum():.3f}"


def check_classic_lrp_doubles(fault=None):
    # every output has a (+,+) and a (-,-) pair, so both branches are live
    x = np.array([1.0, -1.0, 0.5])
    w = np.array([[1.0, 0.5], [-0.5, -1.0], [0.3, 0.2]])
    R = np.array([0.6, 0.4])
    Rx = propagate_lrp_classic(x, w, R)
    err = abs(Rx.sum() - 2.0 * R.sum())
    return err <= 1e-9, f"sum R_out = {Rx.sum():.12f} vs 2 * sum R_in = {2 * R.sum():.12f}"


def check_gradients(fault=None):
    model, x, t = _micro_case(7)
    err = finite_diff_check(model, x, t, h=1e-5, n_coords=100)
    return err < 1e-4, f"max relative error = {err:.2e}"


def check_class_agnostic(fault=None):
    model, x, _ = _micro_case(8)
    same = all(np.array_equal(explain(model, x, m, 0).token_scores,
                              explain(model, x, m, 1).token_scores)
               for m in ("rollout", "raw_attention"))
    return same, "rollout and raw_attention identical across classes"


CHECKS: list[tuple[str, Callable]] = [
    ("conservation_chain", check_conservation),
    ("add_conserves", check_add),
    ("matmul_unnormalised_doubles", check_matmul_doubles),
    ("matmul_normalised_conserves", check_matmul_conservation),
    ("normalised_branch_bounds", check_normalized_bounds),
    ("skip_instability_contained", check_skip_stability),
    ("classic_lrp_doubles", check_classic_lrp_doubles),
    ("gradient_check", check_gradients),
    ("class_agnostic_baselines", check_class_agnostic),
]


def run_selftest(fault: str | None = None) -> list[CheckResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}")
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn(fault)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results
