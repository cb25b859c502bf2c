"""Relevance propagation rules and the full backward relevance pass.

All primitive rules take and return plain arrays. :func:`propagate_network`
walks a recorded :class:`~attrib.autodiff.Tape` in reverse, applies the rule
matching each record, and keeps per-layer bookkeeping (relevance at every
record output, the relevance reaching each attention map, conservation
defects).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import OPS, LayerRecord, Tape, vjp

DEFAULT_EPS = 1e-9


class RelevanceError(RuntimeError):
    pass


@dataclass(frozen=True)
class RuleSet:
    linear_rule: str = "positive_subset"
    epsilon: float = DEFAULT_EPS
    normalize_binary: bool = True
    empty_subset: str = "fallback"

    def __post_init__(self) -> None:
        if self.linear_rule not in ("positive_subset", "classic_lrp"):
            raise ValueError(f"unknown linear rule {self.linear_rule!r}")
        if self.empty_subset not in ("fallback", "drop"):
            raise ValueError(f"unknown empty-subset policy {self.empty_subset!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


POSITIVE_SUBSET = RuleSet()
CLASSIC_LRP = RuleSet(linear_rule="classic_lrp", normalize_binary=False)


@dataclass
class RelevanceVector:
    values: np.ndarray
    layer_index: int

    @property
    def total(self) -> float:
        return float(self.values.sum())


def stabilize(z: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Push denominators with ``|z| < eps`` out to ``sign(z) * eps`` (sign(0) = +1).

    Denominators that are already at least ``eps`` in magnitude are left
    untouched, so conservation holds to rounding on non-degenerate units.
    """
    z = np.asarray(z, dtype=np.float64)
    floor = np.where(z < 0, -eps, eps)
    return np.where(np.abs(z) < eps, floor, z)


def init_relevance(t: int, C: int) -> np.ndarray:
    if not 0 <= t < C:
        raise IndexError(f"class index {t} out of range for {C} classes")
    r = np.zeros(C)
    r[t] = 1.0
    return r


def propagate_generic(x: np.ndarray, layer: LayerRecord, R_in: np.ndarray,
                      eps: float = DEFAULT_EPS, input_index: int = 0) -> np.ndarray:
    """Deep-Taylor style redistribution through an arbitrary recorded layer.

    ``R_j = x_j * sum_i dL_i/dx_j * R_i / L_i`` for the layer's input
    ``input_index``; the sum over ``i`` is the layer's vector-Jacobian product.
    """
    R_in = np.asarray(R_in, dtype=np.float64)
    if R_in.shape != layer.saved_output.shape:
        raise ValueError(f"relevance shape {R_in.shape} != layer output {layer.saved_output.shape}")
    s = R_in / stabilize(layer.saved_output, eps)
    return x * vjp(layer, s)[input_index]


def _as_record(op: str, xs: list[np.ndarray], **attrs) -> LayerRecord:
    return LayerRecord(op, tuple(range(len(xs))), len(xs), xs, OPS[op][0](*xs, **attrs), attrs)


def propagate_binary(u: np.ndarray, v: np.ndarray, R_in: np.ndarray, op: str,
                     eps: float = DEFAULT_EPS, **attrs) -> tuple[np.ndarray, np.ndarray]:
    """Split relevance between the two operands of ``add`` or ``matmul``."""
    if op not in ("add", "matmul"):
        raise ValueError(f"binary relevance is defined for add/matmul, not {op!r}")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    rec = _as_record(op, [u, v], **attrs)
    return (propagate_generic(u, rec, R_in, eps, 0),
            propagate_generic(v, rec, R_in, eps, 1))


def normalize_binary(Ru: np.ndarray, Rv: np.ndarray, R_prev_sum: float,
                     eps: float = DEFAULT_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Rescale both branches so they share ``R_prev_sum`` by absolute mass.

    A branch whose signed sum is (numerically) zero cannot be rescaled; it
    receives nothing and the other branch takes all of ``R_prev_sum``.
    """
    su, sv = float(Ru.sum()), float(Rv.sum())
    au, av = float(np.abs(Ru).sum()), float(np.abs(Rv).sum())
    u_dead, v_dead = abs(su) < eps, abs(sv) < eps
    if u_dead and v_dead or au + av == 0.0:
        return np.zeros_like(Ru), np.zeros_like(Rv)
    if u_dead:
        return np.zeros_like(Ru), Rv * (R_prev_sum / sv)
    if v_dead:
        return Ru * (R_prev_sum / su), np.zeros_like(Rv)
    wu, wv = au / (au + av), av / (au + av)
    return Ru * (wu * R_prev_sum / su), Rv * (wv * R_prev_sum / sv)


def _pairwise(x: np.ndarray, w: np.ndarray, R_in: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    R_in = np.asarray(R_in, dtype=np.float64)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or R_in.shape != (*x.shape[:-1], w.shape[1]):
        raise ValueError(f"linear relevance: x {x.shape}, w {w.shape}, R {R_in.shape} do not conform")
    return x[..., :, None] * w  # (..., d_in, d_out)


def _share(z: np.ndarray, R_in: np.ndarray, eps: float) -> np.ndarray:
    denom = stabilize(z.sum(axis=-2), eps)
    return (z * (R_in / denom)[..., None, :]).sum(axis=-1)


def empty_subset_units(x, w, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Mask over outputs whose non-negative pairs ``x_j * w_ji`` sum below ``eps``."""
    z = np.asarray(x, dtype=np.float64)[..., :, None] * np.asarray(w, dtype=np.float64)
    return np.where(z >= 0, z, 0.0).sum(axis=-2) < eps


def propagate_linear_positive_subset(x, w, R_in, eps: float = DEFAULT_EPS,
                                     empty: str = "fallback") -> np.ndarray:
    """Redistribute only over input/output pairs with ``x_j * w_ji >= 0``.

    An output whose admissible pairs carry no mass (every product negative)
    is handled per ``empty``: ``"fallback"`` shares it over its negative
    pairs, whose ratios are again non-negative and sum to one; ``"drop"``
    passes nothing down and the leak shows up as a conservation defect.
    """
    z = _pairwise(x, w, R_in)
    zq = np.where(z >= 0, z, 0.0)
    if empty == "fallback":
        dead = zq.sum(axis=-2) < eps
        if dead.any():
            zq = np.where(dead[..., None, :], np.where(z < 0, z, 0.0), zq)
    elif empty != "drop":
        raise ValueError(f"unknown empty-subset policy {empty!r}")
    return _share(zq, R_in, eps)


def propagate_lrp_classic(x, w, R_in, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Sign-split LRP: (x+, w+) and (x-, w-) branches, each normalised on its own."""
    _pairwise(x, w, R_in)
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    zp = np.maximum(x, 0)[..., :, None] * np.maximum(w, 0)
    zn = np.minimum(x, 0)[..., :, None] * np.minimum(w, 0)
    return _share(zp, R_in, eps) + _share(zn, R_in, eps)


@dataclass
class RelevancePass:
    target_class: int
    rules: RuleSet
    layers: dict[int, RelevanceVector] = field(default_factory=dict)
    attention: dict[int, np.ndarray] = field(default_factory=dict)
    frontier_sums: dict[int, float] = field(default_factory=dict)
    defects: dict[int, float] = field(default_factory=dict)
    fallback_units: dict[int, int] = field(default_factory=dict)
    input_relevance: np.ndarray | None = None
    leaves: dict[str, np.ndarray] = field(default_factory=dict)  # relevance handed to tape leaves

    def attention_relevance(self, block: int) -> np.ndarray:
        """Relevance at the attention map of forward block ``block`` (h x s x s)."""
        return self.attention[block]


_PASS_THROUGH = {"softmax", "gelu", "layer_norm"}
_REINDEX = {"split_heads", "merge_heads", "select_cls"}


def _record_rule(rec: LayerRecord, R_out: np.ndarray,
                 rules: RuleSet) -> list[tuple[int, np.ndarray]]:
    kind, eps = rec.op_kind, rules.epsilon
    if kind in _PASS_THROUGH:
        return [(rec.inputs[0], R_out)]
    if kind in _REINDEX:
        return [(rec.inputs[0], vjp(rec, R_out)[0])]
    if kind == "linear":
        x, w = rec.saved_inputs[:2]
        if rules.linear_rule == "classic_lrp":
            return [(rec.inputs[0], propagate_lrp_classic(x, w, R_out, eps))]
        return [(rec.inputs[0],
                 propagate_linear_positive_subset(x, w, R_out, eps, rules.empty_subset))]
    if kind in ("add", "matmul"):
        u, v = rec.saved_inputs
        Ru = propagate_generic(u, rec, R_out, eps, 0)
        Rv = propagate_generic(v, rec, R_out, eps, 1)
        if rules.normalize_binary:
            Ru, Rv = normalize_binary(Ru, Rv, float(R_out.sum()), eps)
        return [(rec.inputs[0], Ru), (rec.inputs[1], Rv)]
    raise RelevanceError(f"no relevance rule for op {kind!r}")


def propagate_network(tape: Tape, t: int, rules: RuleSet = POSITIVE_SUBSET) -> RelevancePass:
    """Full reverse relevance pass for target class ``t`` on an unbatched tape."""
    logits = tape.output_logits
    if logits.ndim != 1:
        raise RelevanceError(f"relevance pass needs an unbatched tape, got logits {logits.shape}")
    result = RelevancePass(t, rules)
    pending: dict[int, np.ndarray] = {tape.output_id: init_relevance(t, logits.shape[0])}
    absorbed = 0.0
    for n in range(len(tape.records) - 1, -1, -1):
        rec = tape.records[n]
        R_out = pending.pop(rec.output, None)
        if R_out is None:
            continue
        result.layers[n] = RelevanceVector(R_out, n)
        if rec.is_attention_map:
            result.attention[rec.block_index] = R_out
        if rec.op_kind == "embed":
            result.input_relevance = R_out
            absorbed += float(R_out.sum())
            result.defects[n] = 0.0
        else:
            try:
                contributions = _record_rule(rec, R_out, rules)
            except (ValueError, FloatingPointError) as exc:
                raise RelevanceError(f"layer {n} ({rec.op_kind}): {exc}") from exc
            passed = 0.0
            for vid, r in contributions:
                if vid in tape.leaf_names:
                    name = tape.leaf_names[vid]
                    prev = result.leaves.get(name)
                    result.leaves[name] = r if prev is None else prev + r
                    continue
                pending[vid] = pending[vid] + r if vid in pending else r
                passed += float(r.sum())
            result.defects[n] = passed - float(R_out.sum())
            if rec.op_kind == "linear" and rules.linear_rule == "positive_subset":
                result.fallback_units[n] = int(empty_subset_units(*rec.saved_inputs[:2], rules.epsilon).sum())
        result.frontier_sums[n] = absorbed + sum(float(r.sum()) for r in pending.values())
    return result
