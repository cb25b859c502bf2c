"""Micro ViT/BERT-style classifier whose forward pass is fully tape-recorded."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .autodiff import Tape

FORMAT_VERSION = "1"


class ConfigError(ValueError):
    pass


class ModelFileError(ValueError):
    """Base class for weight-file problems."""


class ModelParseError(ModelFileError):
    pass


class MissingTensorError(ModelFileError):
    pass


class TensorShapeError(ModelFileError):
    pass


class VersionMismatchError(ModelFileError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    modality: str = "image"
    embed_dim: int = 16
    heads: int = 2
    head_dim: int = 8
    blocks: int = 2
    classes: int = 2
    mlp_dim: int = 32
    patch_size: int = 4
    image_size: tuple[int, int] = (16, 16)
    vocab_size: int = 0
    text_len: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.modality not in ("image", "text"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.heads * self.head_dim != self.embed_dim:
            raise ConfigError(
                f"heads*head_dim = {self.heads}*{self.head_dim} != embed_dim {self.embed_dim}")
        if self.classes < 1 or self.blocks < 0:
            raise ConfigError("need classes >= 1 and blocks >= 0")
        if self.modality == "image":
            H, W = self.image_size
            if H % self.patch_size or W % self.patch_size:
                raise ConfigError(f"image {H}x{W} not divisible by patch size {self.patch_size}")
        elif self.vocab_size < 2 or self.text_len < 1:
            raise ConfigError("text models need vocab_size >= 2 and text_len >= 1")

    @property
    def grid(self) -> tuple[int, int] | None:
        if self.modality != "image":
            return None
        H, W = self.image_size
        return H // self.patch_size, W // self.patch_size

    @property
    def seq_len(self) -> int:
        if self.modality == "image":
            gh, gw = self.grid
            return 1 + gh * gw
        return 1 + self.text_len

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelParseError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, s = cfg.embed_dim, cfg.seq_len
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.modality == "image":
        shapes["embed.w"] = (cfg.patch_size ** 2, d)
        shapes["embed.b"] = (d,)
        shapes["embed.cls"] = (d,)
    else:
        shapes["embed.table"] = (cfg.vocab_size, d)
    shapes["embed.pos"] = (s, d)
    for b in range(cfg.blocks):
        p = f"blocks.{b}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for name in ("q", "k", "v", "o"):
            shapes[p + f"w_{name}"] = (d, d)
            if name != "k":  # a key bias only shifts each softmax row; it is dead weight
                shapes[p + f"b_{name}"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.w1"] = (d, cfg.mlp_dim)
        shapes[p + "mlp.b1"] = (cfg.mlp_dim,)
        shapes[p + "mlp.w2"] = (cfg.mlp_dim, d)
        shapes[p + "mlp.b2"] = (d,)
    shapes["norm.g"] = (d,)
    shapes["norm.b"] = (d,)
    shapes["head.w"] = (d, cfg.classes)
    shapes["head.b"] = (cfg.classes,)
    return shapes


class Model:
    """Configuration plus a named parameter store."""

    def __init__(self, config: ModelConfig, parameters: dict[str, np.ndarray]) -> None:
        self.config = config
        self.parameters = parameters
        expected = parameter_shapes(config)
        for name, shape in expected.items():
            if name not in parameters:
                raise MissingTensorError(f"missing tensor {name!r}")
            if parameters[name].shape != shape:
                raise TensorShapeError(
                    f"tensor {name!r} has shape {parameters[name].shape}, expected {shape}")
        extra = set(parameters) - set(expected)
        if extra:
            raise ModelParseError(f"unexpected tensors: {sorted(extra)}")

    @property
    def differentiable_input(self) -> bool:
        return self.config.modality == "image"

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.parameters.items()})

    def record(self, raw) -> Tape:
        return forward_record(self, raw)


EMBED_INIT_STD = 0.02


def init_model(config: ModelConfig, seed: int = 0, zero_head: bool = False) -> Model:
    """Random initialisation: N(0, 1/fan_in) weights, unit LayerNorm gains, small biases.

    ``zero_head`` starts the classifier at zero so every class begins at
    probability 1/C (used for training; the random head is kept for tests
    that need nonzero gradients everywhere).
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name in ("embed.pos", "embed.cls"):
            params[name] = rng.normal(0.0, EMBED_INIT_STD, shape)
        elif name == "embed.table":
            params[name] = rng.normal(0.0, 0.5, shape)
        elif name.endswith(".g"):
            params[name] = np.ones(shape)
        elif len(shape) == 2:
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        else:
            params[name] = rng.normal(0.0, 0.02, shape)
    if zero_head:
        params["head.w"] = np.zeros_like(params["head.w"])
        params["head.b"] = np.zeros_like(params["head.b"])
    return Model(config, params)


def _check_raw(cfg: ModelConfig, raw: np.ndarray) -> None:
    if cfg.modality == "image":
        if raw.shape[-2:] != tuple(cfg.image_size):
            raise ConfigError(f"image shape {raw.shape[-2:]} does not match config {cfg.image_size}")
    else:
        if raw.shape[-1] != cfg.text_len:
            raise ConfigError(f"token sequence length {raw.shape[-1]} != config text_len {cfg.text_len}")
        ids = raw.astype(np.int64)
        if np.any(ids != raw) or ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ConfigError("token ids must be integers in [0, vocab_size)")


def _embed(tape: Tape, model: Model, x_id: int) -> int:
    cfg, P = model.config, _param_ids(tape)
    if cfg.modality == "image":
        return tape.apply("embed", x_id, P["embed.w"], P["embed.b"], P["embed.cls"], P["embed.pos"],
                          modality="image", patch_size=cfg.patch_size)
    return tape.apply("embed", x_id, P["embed.table"], P["embed.pos"], modality="text")


def _param_ids(tape: Tape) -> dict[str, int]:
    return tape.param_ids()


def _attention(tape: Tape, P: dict[str, int], cfg: ModelConfig, b: int, x_id: int) -> int:
    """Multi-head self-attention on an already-normalised stream; returns merged heads."""
    p = f"blocks.{b}."
    heads = {}
    for name in ("q", "k", "v"):
        bias = (P[p + f"b_{name}"],) if name != "k" else ()
        proj = tape.apply("linear", x_id, P[p + f"w_{name}"], *bias, block=b)
        heads[name] = tape.apply("split_heads", proj, block=b, heads=cfg.heads)
    scores = tape.apply("matmul", heads["q"], heads["k"], block=b,
                        transpose_b=True, scale=1.0 / math.sqrt(cfg.head_dim))
    attn = tape.apply("softmax", scores, block=b, attention_map=True)
    out = tape.apply("matmul", attn, heads["v"], block=b)
    return tape.apply("merge_heads", out, block=b)


def forward_record(model: Model, raw) -> Tape:
    """Run the classifier on ``raw`` (optionally batched) and record every op."""
    cfg = model.config
    raw = np.asarray(raw, dtype=np.float64)
    _check_raw(cfg, raw)
    tape = Tape()
    x = tape.leaf("input", raw)
    for name in sorted(model.parameters):
        tape.leaf("param:" + name, model.parameters[name])
    P = _param_ids(tape)

    h = _embed(tape, model, x)
    for b in range(cfg.blocks):
        p = f"blocks.{b}."
        n1 = tape.apply("layer_norm", h, P[p + "ln1.g"], P[p + "ln1.b"], block=b, eps=cfg.ln_eps)
        merged = _attention(tape, P, cfg, b, n1)
        proj = tape.apply("linear", merged, P[p + "w_o"], P[p + "b_o"], block=b)
        h = tape.apply("add", h, proj, block=b)
        n2 = tape.apply("layer_norm", h, P[p + "ln2.g"], P[p + "ln2.b"], block=b, eps=cfg.ln_eps)
        m = tape.apply("linear", n2, P[p + "mlp.w1"], P[p + "mlp.b1"], block=b)
        m = tape.apply("gelu", m, block=b)
        m = tape.apply("linear", m, P[p + "mlp.w2"], P[p + "mlp.b2"], block=b)
        h = tape.apply("add", h, m, block=b)
    h = tape.apply("layer_norm", h, P["norm.g"], P["norm.b"], eps=cfg.ln_eps)
    cls = tape.apply("select_cls", h)
    tape.output_id = tape.apply("linear", cls, P["head.w"], P["head.b"])
    return tape


def classify(model: Model, raw) -> tuple[np.ndarray, Tape]:
    tape = forward_record(model, raw)
    return tape.output_logits, tape


def predict(model: Model, raw) -> np.ndarray:
    return forward_record(model, raw).output_logits.argmax(axis=-1)


def embed_input(model: Model, raw) -> np.ndarray:
    """The s x d token matrix (CLS row first, positional embedding added)."""
    raw = np.asarray(raw, dtype=np.float64)
    _check_raw(model.config, raw)
    tape = Tape()
    x = tape.leaf("input", raw)
    for name in sorted(model.parameters):
        tape.leaf("param:" + name, model.parameters[name])
    return tape.values[_embed(tape, model, x)]


def attention_forward(model: Model, block: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Attention of ``block`` applied directly to a stream ``x`` (s x d).

    Returns the per-head output O (h x s x d_h) and attention map A (h x s x s).
    No LayerNorm is applied here; the block itself normalises before calling.
    """
    cfg, p = model.config, f"blocks.{block}."
    P = model.parameters
    split = lambda z: np.swapaxes(z.reshape(*z.shape[:-1], cfg.heads, cfg.head_dim), -2, -3)  # noqa: E731
    q = split(T.linear(x, P[p + "w_q"], P[p + "b_q"]))
    k = split(T.matmul(x, P[p + "w_k"]))
    v = split(T.linear(x, P[p + "w_v"], P[p + "b_v"]))
    A = T.softmax_lastdim(T.matmul(q, np.swapaxes(k, -1, -2)) / math.sqrt(cfg.head_dim))
    return T.matmul(A, v), A


# --- persistence -------------------------------------------------------------

def save_model(model: Model, path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "parameters": {
            name: {"shape": list(arr.shape), "data": arr.tolist()}
            for name, arr in sorted(model.parameters.items())
        },
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_model(path) -> Model:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ModelFileError(f"cannot read model {path}: {exc.strerror}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelParseError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ModelParseError(f"{path}: top level must be an object")
    unknown = set(doc) - {"format_version", "config", "parameters"}
    if unknown:
        raise ModelParseError(f"{path}: unknown fields {sorted(unknown)}")
    if doc.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format_version {doc.get('format_version')!r}, expected {FORMAT_VERSION!r}")
    if not isinstance(doc.get("config"), dict) or not isinstance(doc.get("parameters"), dict):
        raise ModelParseError(f"{path}: 'config' and 'parameters' must be objects")
    try:
        cfg = ModelConfig.from_dict(doc["config"])
    except (TypeError, ValueError) as exc:
        raise ModelParseError(f"{path}: bad config ({exc})") from exc
    params = {}
    for name, entry in doc["parameters"].items():
        if not isinstance(entry, dict) or set(entry) != {"shape", "data"}:
            raise ModelParseError(f"{path}: tensor {name!r} must have exactly 'shape' and 'data'")
        if not isinstance(entry["shape"], list):
            raise ModelParseError(f"{path}: tensor {name!r} shape must be a list")
        shape = tuple(entry["shape"])
        try:
            arr = np.array(entry["data"], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ModelParseError(f"{path}: tensor {name!r} data is not numeric") from exc
        if arr.shape != shape:
            raise TensorShapeError(f"{path}: tensor {name!r} data shape {arr.shape} != declared {shape}")
        params[name] = arr
    return Model(cfg, params)
