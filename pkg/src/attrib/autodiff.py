"""Forward tape and exact reverse-mode gradients.

A :class:`Tape` is a Wengert list: leaves (the network input and named
parameters) followed by one :class:`LayerRecord` per executed operation.
The same records drive the gradient pass here and the relevance pass in
:mod:`attrib.relevance`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T

OP_KINDS = (
    "matmul",
    "add",
    "softmax",
    "gelu",
    "layer_norm",
    "linear",
    "embed",
    "select_cls",
    "split_heads",
    "merge_heads",
)


class TapeError(ValueError):
    pass


@dataclass
class LayerRecord:
    op_kind: str
    inputs: tuple[int, ...]
    output: int
    saved_inputs: list[np.ndarray]
    saved_output: np.ndarray
    attrs: dict = field(default_factory=dict)
    block_index: int | None = None
    is_attention_map: bool = False


# --- patch helpers ---------------------------------------------------------

def patchify(pixels: np.ndarray, p: int) -> np.ndarray:
    """(..., H, W) -> (..., gh*gw, p*p), patches in row-major grid order."""
    *lead, H, W = pixels.shape
    gh, gw = H // p, W // p
    x = pixels.reshape(*lead, gh, p, gw, p)
    x = np.moveaxis(x, -3, -2)  # (..., gh, gw, p, p)
    return x.reshape(*lead, gh * gw, p * p)


def unpatchify(patches: np.ndarray, p: int, H: int, W: int) -> np.ndarray:
    *lead, _, _ = patches.shape
    gh, gw = H // p, W // p
    x = patches.reshape(*lead, gh, gw, p, p)
    x = np.moveaxis(x, -2, -3)
    return x.reshape(*lead, H, W)


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Collapse leading batch axes of ``g`` so it matches a parameter shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# --- op table: forward kernels and vector-Jacobian products ----------------

def _embed_forward(*xs, modality, patch_size=None):
    if modality == "image":
        pixels, w, b, cls, pos = xs
        tokens = T.linear(patchify(pixels, patch_size), w, b)
        lead = tokens.shape[:-2]
        cls_row = np.broadcast_to(cls, (*lead, 1, cls.shape[0]))
        return np.concatenate([cls_row, tokens], axis=-2) + pos
    ids, table, pos = xs
    idx = _text_indices(ids)
    return table[idx] + pos


def _text_indices(ids: np.ndarray) -> np.ndarray:
    idx = ids.astype(np.int64)
    cls = np.zeros((*idx.shape[:-1], 1), dtype=np.int64)
    return np.concatenate([cls, idx], axis=-1)


def _embed_vjp(g, xs, out, modality, patch_size=None):
    if modality == "image":
        pixels, w, b, cls, pos = xs
        g_tok = g[..., 1:, :]
        patches = patchify(pixels, patch_size)
        g_patches = np.matmul(g_tok, w.T)
        g_pix = unpatchify(g_patches, patch_size, pixels.shape[-2], pixels.shape[-1])
        g_w = np.matmul(patches.reshape(-1, patches.shape[-1]).T, g_tok.reshape(-1, g_tok.shape[-1]))
        g_b = g_tok.reshape(-1, g_tok.shape[-1]).sum(axis=0)
        g_cls = g[..., 0, :].reshape(-1, g.shape[-1]).sum(axis=0)
        return g_pix, g_w, g_b, g_cls, _sum_to(g, pos.shape)
    ids, table, pos = xs
    g_table = np.zeros_like(table)
    np.add.at(g_table, _text_indices(ids).reshape(-1), g.reshape(-1, g.shape[-1]))
    return np.zeros_like(ids), g_table, _sum_to(g, pos.shape)


def _matmul_forward(a, b, transpose_b=False, scale=1.0):
    bb = np.swapaxes(b, -1, -2) if transpose_b else b
    out = T.matmul(a, bb)
    return out * scale if scale != 1.0 else out


def _matmul_vjp(g, xs, out, transpose_b=False, scale=1.0):
    a, b = xs
    if scale != 1.0:
        g = g * scale
    if transpose_b:
        return np.matmul(g, b), np.matmul(np.swapaxes(g, -1, -2), a)
    return np.matmul(g, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), g)


def _linear_forward(x, w, b=None):
    # a zero bias is exact and keeps the single shape-checked code path
    return T.linear(x, w, b if b is not None else np.zeros(np.shape(w)[-1]))


def _linear_vjp(g, xs, out):
    x, w = xs[:2]
    g_x = np.matmul(g, w.T)
    g_w = np.matmul(x.reshape(-1, x.shape[-1]).T, g.reshape(-1, g.shape[-1]))
    if len(xs) == 2:
        return g_x, g_w
    return g_x, g_w, g.reshape(-1, g.shape[-1]).sum(axis=0)


def _layer_norm_vjp(g, xs, out, eps=1e-5):
    x, gamma, beta = xs
    mu = x.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(((x - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = (x - mu) / sigma
    gh = g * gamma
    g_x = (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)) / sigma
    flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
    return g_x, (flat(g) * flat(xhat)).sum(axis=0), flat(g).sum(axis=0)


def _softmax_vjp(g, xs, out):
    # (diag(p) - p p^T) g per last-axis slice
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _split_heads(x, heads):
    *lead, s, d = x.shape
    return np.swapaxes(x.reshape(*lead, s, heads, d // heads), -2, -3)


def _merge_heads(x):
    *lead, h, s, dh = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, s, h * dh)


def _select_cls_vjp(g, xs, out):
    (x,) = xs
    gx = np.zeros_like(x)
    gx[..., 0, :] = g
    return (gx,)


OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_forward, _matmul_vjp),
    "add": (lambda a, b: T.add(a, b), lambda g, xs, out: (g, g)),
    "softmax": (lambda x: T.softmax_lastdim(x), _softmax_vjp),
    "gelu": (lambda x: T.gelu(x), lambda g, xs, out: (g * T.gelu_grad(xs[0]),)),
    "layer_norm": (lambda x, gm, bt, eps=1e-5: T.layer_norm(x, gm, bt, eps), _layer_norm_vjp),
    "linear": (_linear_forward, _linear_vjp),
    "embed": (_embed_forward, _embed_vjp),
    "select_cls": (lambda x: x[..., 0, :].copy(), _select_cls_vjp),
    "split_heads": (_split_heads, lambda g, xs, out, heads: (_merge_heads(g),)),
    "merge_heads": (_merge_heads, lambda g, xs, out: (_split_heads(g, xs[0].shape[-3]),)),
}


def vjp(record: LayerRecord, g: np.ndarray) -> tuple[np.ndarray, ...]:
    """Vector-Jacobian product of one record w.r.t. each of its inputs."""
    return OPS[record.op_kind][1](g, record.saved_inputs, record.saved_output, **record.attrs)


class Tape:
    """Ordered record of a forward pass."""

    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self.leaf_names: dict[int, str] = {}
        self.records: list[LayerRecord] = []
        self.input_id: int | None = None
        self.output_id: int | None = None

    def leaf(self, name: str, value: np.ndarray) -> int:
        vid = len(self.values)
        self.values.append(value)
        self.leaf_names[vid] = name
        if name == "input":
            self.input_id = vid
        return vid

    def apply(self, op_kind: str, *inputs: int, block: int | None = None,
              attention_map: bool = False, **attrs) -> int:
        if op_kind not in OPS:
            raise TapeError(f"unknown op kind {op_kind!r}")
        xs = [self.values[i] for i in inputs]
        out = OPS[op_kind][0](*xs, **attrs)
        vid = len(self.values)
        self.values.append(out)
        self.records.append(LayerRecord(op_kind, tuple(inputs), vid, xs, out, attrs,
                                        block, attention_map))
        return vid

    def param_ids(self) -> dict[str, int]:
        return {name[len("param:"):]: vid for vid, name in self.leaf_names.items()
                if name.startswith("param:")}

    @property
    def num_blocks(self) -> int:
        return sum(r.is_attention_map for r in self.records)

    @property
    def output_logits(self) -> np.ndarray:
        return self.values[self.output_id]

    @property
    def input_ref(self) -> np.ndarray:
        return self.values[self.input_id]

    def attention_records(self) -> list[LayerRecord]:
        """Attention-map records in forward (input-to-output) order."""
        return [r for r in self.records if r.is_attention_map]

    def replay(self) -> np.ndarray:
        """Re-execute every record from the leaves and return the logits."""
        values: dict[int, np.ndarray] = {vid: self.values[vid] for vid in self.leaf_names}
        for rec in self.records:
            values[rec.output] = OPS[rec.op_kind][0](*(values[i] for i in rec.inputs), **rec.attrs)
        return values[self.output_id]


class Gradients:
    """Gradient of one scalar objective w.r.t. every value on a tape."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]) -> None:
        self.tape = tape
        self.by_id = grads

    def __getitem__(self, vid: int) -> np.ndarray:
        g = self.by_id.get(vid)
        return np.zeros_like(self.tape.values[vid]) if g is None else g

    def attention(self, block: int) -> np.ndarray:
        """Gradient w.r.t. the attention map of forward block ``block``."""
        return self[self.tape.attention_records()[block].output]

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {name: self[vid] for name, vid in self.tape.param_ids().items()}

    @property
    def input(self) -> np.ndarray:
        return self[self.tape.input_id]


def backward_from(tape: Tape, seed: np.ndarray) -> Gradients:
    """Reverse sweep starting from an arbitrary cotangent on the logits."""
    grads: dict[int, np.ndarray] = {tape.output_id: np.asarray(seed, dtype=np.float64)}
    for rec in reversed(tape.records):
        g = grads.get(rec.output)
        if g is None:
            continue
        for vid, gi in zip(rec.inputs, vjp(rec, g)):
            if vid in grads:
                grads[vid] = grads[vid] + gi
            else:
                grads[vid] = gi
    return Gradients(tape, grads)


def backward(tape: Tape, target_class: int) -> Gradients:
    """Gradients of ``y_t`` (the target-class logit) w.r.t. the whole tape."""
    logits = tape.output_logits
    n_classes = logits.shape[-1]
    if not 0 <= target_class < n_classes:
        raise IndexError(f"target class {target_class} out of range for {n_classes} classes")
    seed = np.zeros_like(logits)
    seed[..., target_class] = 1.0
    return backward_from(tape, seed)


def finite_diff_check(model, input, t: int, h: float = 1e-5, n_coords: int = 100,
                      seed: int = 0, allow_coarse: bool = False) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``model`` is anything exposing ``parameters`` (name -> array) and
    ``record(input) -> Tape``. Coordinates are drawn uniformly from the
    concatenation of the (float) input and every parameter.
    ``allow_coarse`` lifts the step-size bound, for truncation-error probes.
    """
    if not allow_coarse and not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step {h} outside [1e-7, 1e-3]")
    input = np.asarray(input, dtype=np.float64)
    tape = model.record(input)
    grads = backward(tape, t)

    slots: list[tuple[str, np.ndarray, np.ndarray]] = []
    if getattr(model, "differentiable_input", True):
        slots.append(("input", input, grads.input))
    pgrads = grads.params
    for name in sorted(model.parameters):
        slots.append((name, model.parameters[name], pgrads[name]))
    sizes = np.array([arr.size for _, arr, _ in slots])
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(n_coords, offsets[-1]), replace=False)
    worst = 0.0
    for flat in np.sort(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, arr, g = slots[k]
        idx = np.unravel_index(int(flat - offsets[k]), arr.shape)
        analytic = float(g[idx])
        orig = arr[idx]
        vals = []
        for step in (h, -h):
            arr[idx] = orig + step
            try:
                vals.append(float(model.record(input).output_logits[..., t].sum()))
            finally:
                arr[idx] = orig
        numeric = (vals[0] - vals[1]) / (2.0 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), 1e-8))
    return worst
