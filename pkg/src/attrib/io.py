"""Reading inputs (PGM images, whitespace-tokenised text) and writing heatmaps."""
from __future__ import annotations

import json
import os
import re

import numpy as np

UNK_ID = 1
CLS_ID = 0


class InputFileError(ValueError):
    """Unreadable or malformed input/vocabulary file."""


_TOKEN = re.compile(rb"(?:\s|#[^\n]*)*(\S+)")


def _pgm_header(data: bytes):
    """Magic, width, height, maxval and the raster offset of a PGM file."""
    pos, fields = 0, []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            return None
        fields.append(m.group(1))
        pos = m.end()
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(data) and fields[0] == b"P5" or pos < len(data) and not data[pos:pos + 1].isspace():
        return None
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        return None
    return fields[0], w, h, maxval, pos + 1


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """8-bit grayscale PGM (P2 or P5) as float64 in [0, 1]."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise InputFileError(f"cannot read image {path}: {exc.strerror}") from exc
    header = _pgm_header(data)
    if header is None or header[0] not in (b"P2", b"P5"):
        raise InputFileError(f"{path}: not a P2/P5 PGM file")
    magic, w, h, maxval, offset = header
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise InputFileError(f"{path}: unsupported PGM geometry {w}x{h}, maxval {maxval}")
    n = w * h
    if magic == b"P5":
        raw = data[offset:]
        if len(raw) < n:
            raise InputFileError(f"{path}: raster holds {len(raw)} of {n} bytes")
        pix = np.frombuffer(raw[:n], dtype=np.uint8).astype(np.float64)
    else:
        body = re.sub(rb"#[^\n]*", b" ", data[offset:]).split()
        try:
            vals = [int(v) for v in body]
        except ValueError as exc:
            raise InputFileError(f"{path}: non-integer sample in P2 raster") from exc
        if len(vals) != n:
            raise InputFileError(f"{path}: raster holds {len(vals)} of {n} samples")
        pix = np.asarray(vals, dtype=np.float64)
    if pix.min(initial=0) < 0 or pix.max(initial=0) > maxval:
        raise InputFileError(f"{path}: sample outside 0..{maxval}")
    return pix.reshape(h, w) / maxval


def to_uint8(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Min-max normalise to 0..255; a constant map becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    scaled = np.zeros_like(values) if span == 0 else (values - lo) / span
    return np.rint(scaled * 255).astype(np.uint8), lo, hi


def pgm_bytes(values: np.ndarray) -> tuple[bytes, float, float]:
    img, lo, hi = to_uint8(np.atleast_2d(values))
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes(), lo, hi


def write_pgm(path, values: np.ndarray) -> tuple[float, float]:
    data, lo, hi = pgm_bytes(values)
    with open(path, "wb") as fh:
        fh.write(data)
    return lo, hi


def read_vocab(path) -> dict[str, int]:
    try:
        with open(path, encoding="utf-8") as fh:
            vocab = json.load(fh)
    except OSError as exc:
        raise InputFileError(f"cannot read vocabulary {path}: {exc.strerror}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise InputFileError(f"{path}: invalid vocabulary JSON ({exc})") from exc
    if not isinstance(vocab, dict) or not all(
            isinstance(k, str) and isinstance(v, int) and not isinstance(v, bool) and v >= 0
            for k, v in vocab.items()):
        raise InputFileError(f"{path}: vocabulary must map token strings to non-negative ids")
    return vocab


def tokenize(text: str, vocab: dict[str, int]) -> np.ndarray:
    """Whitespace tokens to ids; unknown tokens map to ``UNK_ID``."""
    return np.asarray([vocab.get(tok, UNK_ID) for tok in text.split()], dtype=np.float64)


def read_text(path, vocab: dict[str, int], length: int | None = None) -> np.ndarray:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InputFileError(f"cannot read text {path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise InputFileError(f"{path}: not valid UTF-8") from exc
    ids = tokenize(text, vocab)
    if length is not None and ids.size != length:
        raise InputFileError(f"{path}: {ids.size} tokens, model expects {length}")
    return ids


def heatmap_record(method: str, target_class, token_scores, grid, raw_min: float,
                   raw_max: float) -> dict:
    return {"method": method, "target_class": target_class,
            "token_scores": [float(v) for v in np.asarray(token_scores).reshape(-1)],
            "grid": list(grid), "raw_min": raw_min, "raw_max": raw_max}


def dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
