import json

import numpy as np
import pytest

from attrib.io import (UNK_ID, InputFileError, dump_json, heatmap_record, pgm_bytes, read_pgm,
                       read_text, read_vocab, to_uint8, tokenize, write_pgm)


def test_p2_with_comments(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P2\n# made by hand\n3 2 # width height\n4\n0 1 2\n3 4 # tail\n0\n")
    np.testing.assert_allclose(read_pgm(path), [[0, 0.25, 0.5], [0.75, 1.0, 0.0]])


def test_p5_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (5, 7)).astype(float)
    img[0, 0], img[0, 1] = 0, 255
    path = tmp_path / "b.pgm"
    lo, hi = write_pgm(path, img)
    assert (lo, hi) == (0.0, 255.0)
    np.testing.assert_array_equal(read_pgm(path) * 255, img)
    # a raster whose first byte is itself whitespace
    path.write_bytes(b"P5\n2 1\n255\n\n\x07")
    np.testing.assert_array_equal(read_pgm(path), [[10 / 255, 7 / 255]])


def test_pgm_errors(tmp_path):
    cases = {
        "missing.pgm": None,
        "magic.pgm": b"P6\n1 1\n255\nabc",
        "short.pgm": b"P5\n4 4\n255\n\x00\x01",
        "maxval.pgm": b"P2\n1 1\n65535\n7\n",
        "sample.pgm": b"P2\n2 1\n4\n1 9\n",
        "count.pgm": b"P2\n2 2\n4\n1 2 3\n",
        "text.pgm": b"P2\n1 1\n4\nx\n",
        "empty.pgm": b"",
    }
    for name, data in cases.items():
        path = tmp_path / name
        if data is not None:
            path.write_bytes(data)
        with pytest.raises(InputFileError):
            read_pgm(path)


def test_to_uint8():
    img, lo, hi = to_uint8(np.array([[-1.0, 0.0, 1.0]]))
    assert img.tolist() == [[0, 128, 255]] and (lo, hi) == (-1.0, 1.0)
    img, lo, hi = to_uint8(np.full((2, 2), 3.0))
    assert img.tolist() == [[0, 0], [0, 0]] and lo == hi == 3.0
    data, _, _ = pgm_bytes(np.zeros((2, 3)))
    assert data == b"P5\n3 2\n255\n" + bytes(6)


def test_vocab_and_text(tmp_path):
    vocab_path = tmp_path / "vocab.json"
    vocab_path.write_text(json.dumps({"[CLS]": 0, "[UNK]": 1, "good": 5}))
    vocab = read_vocab(vocab_path)
    np.testing.assert_array_equal(tokenize("good  bad\ngood", vocab), [5, UNK_ID, 5])
    text = tmp_path / "t.txt"
    text.write_text("good bad")
    np.testing.assert_array_equal(read_text(text, vocab, 2), [5, 1])
    with pytest.raises(InputFileError):
        read_text(text, vocab, 3)
    with pytest.raises(InputFileError):
        read_text(tmp_path / "none.txt", vocab)
    text.write_bytes(b"\xff\xfe")
    with pytest.raises(InputFileError):
        read_text(text, vocab)
    for bad in ("[1, 2]", '{"a": -1}', '{"a": true}', "{"):
        vocab_path.write_text(bad)
        with pytest.raises(InputFileError):
            read_vocab(vocab_path)


def test_json_output_is_stable(tmp_path):
    rec = heatmap_record("ours", 1, np.array([0.1, 1 / 3]), (1, 2), 0.1, 1 / 3)
    dump_json(rec, tmp_path / "a.json")
    dump_json(rec, tmp_path / "b.json")
    a = (tmp_path / "a.json").read_bytes()
    assert a == (tmp_path / "b.json").read_bytes() and a.endswith(b"\n")
    assert json.loads(a)["token_scores"][1] == 1 / 3
