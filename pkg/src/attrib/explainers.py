"""Token/pixel relevance maps: the gradient-weighted relevance method, its
ablations, and the attention/gradient/LRP baselines.

Block numbering follows forward order (0 is closest to the input). The
aggregation multiplies per-block matrices starting from the block closest to
the output, so ``C = Abar[B-1] @ ... @ Abar[0]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, backward
from .model import Model, forward_record
from .relevance import CLASSIC_LRP, POSITIVE_SUBSET, RuleSet, propagate_network

METHODS = (
    "ours",
    "ours_no_grad",
    "ours_block_last",
    "ours_block_first",
    "rollout",
    "raw_attention",
    "gradcam_attn",
    "partial_lrp",
    "full_lrp",
)
CLASS_AGNOSTIC = frozenset({"rollout", "raw_attention"})


@dataclass
class RelevanceMap:
    method: str
    target_class: int | None
    token_scores: np.ndarray
    pixel_map: np.ndarray | None = None
    grid: tuple[int, int] | None = None


def _target(tape: Tape, t: int | None) -> int:
    logits = tape.output_logits
    if t is None:
        return int(np.argmax(logits))
    if not 0 <= t < logits.shape[-1]:
        raise IndexError(f"target class {t} out of range for {logits.shape[-1]} classes")
    return int(t)


def _require_blocks(tape: Tape) -> None:
    if tape.num_blocks == 0:
        raise ValueError("attention-based explanations need at least one block")


def weighted_attention(grad: np.ndarray, rel: np.ndarray, clamp: bool = True) -> np.ndarray:
    """``I + mean_h (grad * rel)^+`` for one block (h x s x s -> s x s)."""
    cam = grad * rel
    if clamp:
        cam = np.maximum(cam, 0.0)
    cam = cam.mean(axis=0)
    return np.eye(cam.shape[-1]) + cam


def chain(mats: list[np.ndarray]) -> np.ndarray:
    """Left-to-right product of per-block matrices given in forward order.

    ``mats[-1]`` (the block closest to the output) is the leftmost factor.
    """
    out = np.eye(mats[0].shape[-1])
    for m in reversed(mats):
        out = out @ m
    return out


def ours_matrix(tape: Tape, t: int, variant: str = "ours",
                rules: RuleSet = POSITIVE_SUBSET, clamp: bool = True) -> np.ndarray:
    """The full s x s aggregated matrix C for one of the method variants."""
    _require_blocks(tape)
    grads = backward(tape, t)
    rel = propagate_network(tape, t, rules)
    B = tape.num_blocks
    if variant == "ours_no_grad":
        per_block = [weighted_attention(np.ones_like(rel.attention[b]), rel.attention[b], clamp)
                     for b in range(B)]
        return chain(per_block)
    if variant == "ours_block_last":
        return weighted_attention(grads.attention(B - 1), rel.attention[B - 1], clamp)
    if variant == "ours_block_first":
        return weighted_attention(grads.attention(0), rel.attention[0], clamp)
    if variant != "ours":
        raise ValueError(f"unknown variant {variant!r}")
    return chain([weighted_attention(grads.attention(b), rel.attention[b], clamp) for b in range(B)])


def rollout_matrix(tape: Tape) -> np.ndarray:
    _require_blocks(tape)
    mats = []
    for rec in tape.attention_records():
        A = rec.saved_output.mean(axis=0)
        mats.append(np.eye(A.shape[-1]) + A)
    return chain(mats)


def cls_row_to_map(scores: np.ndarray, grid: tuple[int, int], out: tuple[int, int]) -> np.ndarray:
    """Reshape content-token scores to the patch grid and resize bilinearly.

    Sampling is corner-aligned: output pixel (0, 0) and (H-1, W-1) coincide
    with the first and last grid cells.
    """
    gh, gw = grid
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size != gh * gw:
        raise ValueError(f"{scores.size} scores do not fill a {gh}x{gw} grid")
    g = scores.reshape(gh, gw)
    H, W = out

    def coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = coords(H, gh)
    c0, c1, fc = coords(W, gw)
    top = g[r0][:, c0] * (1 - fc) + g[r0][:, c1] * fc
    bot = g[r1][:, c0] * (1 - fc) + g[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def _finish(model: Model, method: str, t: int | None, scores: np.ndarray) -> RelevanceMap:
    cfg = model.config
    rmap = RelevanceMap(method, t, np.asarray(scores, dtype=np.float64))
    if cfg.modality == "image":
        rmap.grid = cfg.grid
        rmap.pixel_map = cls_row_to_map(rmap.token_scores, cfg.grid, tuple(cfg.image_size))
    return rmap


def explain_ours(model: Model, raw, t: int | None = None, variant: str = "ours",
                 tape: Tape | None = None) -> RelevanceMap:
    tape = tape or forward_record(model, raw)
    t = _target(tape, t)
    C = ours_matrix(tape, t, variant)
    return _finish(model, variant, t, C[0, 1:])


def explain_rollout(model: Model, raw, tape: Tape | None = None) -> RelevanceMap:
    tape = tape or forward_record(model, raw)
    return _finish(model, "rollout", None, rollout_matrix(tape)[0, 1:])


def explain_raw_attention(model: Model, raw, tape: Tape | None = None) -> RelevanceMap:
    tape = tape or forward_record(model, raw)
    _require_blocks(tape)
    A = tape.attention_records()[-1].saved_output.mean(axis=0)
    return _finish(model, "raw_attention", None, A[0, 1:])


def explain_gradcam_attn(model: Model, raw, t: int | None = None,
                         tape: Tape | None = None) -> RelevanceMap:
    """GradCAM with the last attention map's CLS row as an h-channel feature map."""
    tape = tape or forward_record(model, raw)
    _require_blocks(tape)
    t = _target(tape, t)
    B = tape.num_blocks
    feats = tape.attention_records()[-1].saved_output[:, 0, 1:]
    grad = backward(tape, t).attention(B - 1)[:, 0, 1:]
    weights = grad.mean(axis=-1)
    cam = np.maximum((weights[:, None] * feats).sum(axis=0), 0.0)
    return _finish(model, "gradcam_attn", t, cam)


def explain_partial_lrp(model: Model, raw, t: int | None = None,
                        tape: Tape | None = None, rules: RuleSet = CLASSIC_LRP) -> RelevanceMap:
    tape = tape or forward_record(model, raw)
    _require_blocks(tape)
    t = _target(tape, t)
    rel = propagate_network(tape, t, rules)
    R = rel.attention[tape.num_blocks - 1].mean(axis=0)
    return _finish(model, "partial_lrp", t, R[0, 1:])


def explain_full_lrp(model: Model, raw, t: int | None = None,
                     tape: Tape | None = None, rules: RuleSet = CLASSIC_LRP) -> RelevanceMap:
    """Relevance at the embedding output, summed over channels, content tokens only."""
    tape = tape or forward_record(model, raw)
    t = _target(tape, t)
    rel = propagate_network(tape, t, rules)
    per_token = rel.input_relevance.sum(axis=-1)
    return _finish(model, "full_lrp", t, per_token[1:])


def explain(model: Model, raw, method: str = "ours", target_class: int | None = None) -> RelevanceMap:
    """Dispatch on method name; class-agnostic methods ignore ``target_class``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    tape = forward_record(model, raw)
    if method.startswith("ours"):
        return explain_ours(model, raw, target_class, method, tape)
    if method == "rollout":
        return explain_rollout(model, raw, tape)
    if method == "raw_attention":
        return explain_raw_attention(model, raw, tape)
    if method == "gradcam_attn":
        return explain_gradcam_attn(model, raw, target_class, tape)
    if method == "partial_lrp":
        return explain_partial_lrp(model, raw, target_class, tape)
    return explain_full_lrp(model, raw, target_class, tape)
