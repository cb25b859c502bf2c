import json

import numpy as np
import pytest

from attrib import tensor as T
from attrib.model import (ConfigError, MissingTensorError, Model, ModelConfig, ModelParseError,
                          TensorShapeError, VersionMismatchError, attention_forward, classify,
                          embed_input, forward_record, init_model, load_model, parameter_shapes,
                          save_model)

TEXT_CFG = ModelConfig(modality="text", vocab_size=10, text_len=6, patch_size=1, image_size=(1, 1))


def test_sequence_lengths():
    cfg = ModelConfig(image_size=(8, 8), patch_size=4)
    assert cfg.seq_len == 5
    assert embed_input(init_model(cfg, 0), np.zeros((8, 8))).shape == (5, 16)
    ids = np.array([1, 2, 3, 4, 5, 6], dtype=float)
    tokens = embed_input(init_model(TEXT_CFG, 0), ids)
    assert tokens.shape == (7, 16)


def test_text_embedding_puts_cls_first():
    model = init_model(TEXT_CFG, 1)
    ids = np.array([4, 2, 2, 9, 1, 0], dtype=float)
    tokens = embed_input(model, ids)
    table, pos = model.parameters["embed.table"], model.parameters["embed.pos"]
    np.testing.assert_array_equal(tokens[0], table[0] + pos[0])
    np.testing.assert_array_equal(tokens[4], table[9] + pos[4])


def test_zero_image_rows_equal_projection_bias():
    model = init_model(ModelConfig(), 2)
    model.parameters["embed.pos"][:] = 0.0
    tokens = embed_input(model, np.zeros((16, 16)))
    for row in tokens[1:]:
        np.testing.assert_array_equal(row, model.parameters["embed.b"])
    np.testing.assert_array_equal(tokens[0], model.parameters["embed.cls"])


def test_zero_query_key_gives_uniform_attention():
    model = init_model(ModelConfig(), 3)
    model.parameters["blocks.0.w_q"][:] = 0.0
    model.parameters["blocks.0.b_q"][:] = 0.0
    model.parameters["blocks.0.w_k"][:] = 0.0
    x = np.random.default_rng(0).normal(size=(17, 16))
    O, A = attention_forward(model, 0, x)
    np.testing.assert_allclose(A, 1.0 / 17, atol=1e-15)
    # identity value projection: every output row is the mean of the value rows
    model.parameters["blocks.0.w_v"][:] = np.eye(16)
    model.parameters["blocks.0.b_v"][:] = 0.0
    O, _ = attention_forward(model, 0, x)
    mean = x.mean(axis=0).reshape(2, 8)
    for h in range(2):
        np.testing.assert_allclose(O[h], np.tile(mean[h], (17, 1)), atol=1e-12)


def test_attention_rows_are_stochastic_and_match_tape():
    model = init_model(ModelConfig(), 4)
    x = np.random.default_rng(1).random((16, 16))
    tape = forward_record(model, x)
    for rec in tape.attention_records():
        np.testing.assert_allclose(rec.saved_output.sum(axis=-1), 1.0, atol=1e-12)
    stream = tape.values[tape.records[0].output]
    ln = T.layer_norm(stream, model.parameters["blocks.0.ln1.g"], model.parameters["blocks.0.ln1.b"])
    _, A = attention_forward(model, 0, ln)
    np.testing.assert_allclose(A, tape.attention_records()[0].saved_output, atol=1e-12)


def test_logits_finite_and_pure():
    model = init_model(ModelConfig(classes=3), 5)
    x = np.random.default_rng(2).random((16, 16))
    a, _ = classify(model, x)
    b, _ = classify(model, x.copy())
    assert a.shape == (3,) and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)


def test_batch_matches_single():
    model = init_model(ModelConfig(), 6)
    X = np.random.default_rng(3).random((4, 16, 16))
    batched = forward_record(model, X).output_logits
    for i in range(4):
        np.testing.assert_allclose(batched[i], forward_record(model, X[i]).output_logits,
                                   atol=1e-12)


def test_zero_block_model_by_hand():
    cfg = ModelConfig(blocks=0)
    model = init_model(cfg, 7)
    P = model.parameters
    x = np.random.default_rng(4).random((16, 16))
    cls = P["embed.cls"] + P["embed.pos"][0]
    normed = T.layer_norm(cls, P["norm.g"], P["norm.b"])
    np.testing.assert_allclose(classify(model, x)[0], normed @ P["head.w"] + P["head.b"],
                               atol=1e-12)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(heads=3, head_dim=8)
    with pytest.raises(ConfigError):
        ModelConfig(image_size=(10, 16))
    with pytest.raises(ConfigError):
        ModelConfig(modality="audio")
    with pytest.raises(ConfigError):
        ModelConfig(modality="text")
    cfg = ModelConfig()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ModelParseError):
        ModelConfig.from_dict({**cfg.to_dict(), "dropout": 0.1})


def test_model_rejects_bad_tensors():
    cfg = ModelConfig()
    params = init_model(cfg, 0).parameters
    missing = dict(params)
    del missing["head.w"]
    with pytest.raises(MissingTensorError, match="head.w"):
        Model(cfg, missing)
    bad = dict(params)
    bad["head.w"] = np.zeros((3, 3))
    with pytest.raises(TensorShapeError, match="head.w"):
        Model(cfg, bad)


def test_input_validation():
    model = init_model(ModelConfig(), 0)
    with pytest.raises(ConfigError):
        forward_record(model, np.zeros((8, 8)))
    text = init_model(TEXT_CFG, 0)
    with pytest.raises(ConfigError):
        forward_record(text, np.array([1, 2, 3, 4, 5, 10.0]))
    with pytest.raises(ConfigError):
        forward_record(text, np.array([1, 2, 3, 4, 5, 1.5]))


def test_save_load_bit_exact(tmp_path):
    for cfg in (ModelConfig(), TEXT_CFG):
        model = init_model(cfg, 8)
        path = tmp_path / f"{cfg.modality}.json"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.config == cfg
        for name, arr in model.parameters.items():
            assert arr.tobytes() == loaded.parameters[name].tobytes()
        raw = np.random.default_rng(0).random((16, 16)) if cfg.modality == "image" \
            else np.array([1, 2, 3, 4, 5, 6.0])
        assert classify(model, raw)[0].tobytes() == classify(loaded, raw)[0].tobytes()


def test_load_errors(tmp_path):
    path = tmp_path / "m.json"
    save_model(init_model(ModelConfig(), 0), path)
    text = path.read_text()

    (tmp_path / "trunc.json").write_text(text[: len(text) // 2])
    with pytest.raises(ModelParseError):
        load_model(tmp_path / "trunc.json")

    doc = json.loads(text)
    doc["format_version"] = "2"
    (tmp_path / "v2.json").write_text(json.dumps(doc))
    with pytest.raises(VersionMismatchError):
        load_model(tmp_path / "v2.json")

    doc = json.loads(text)
    doc["extra"] = 1
    (tmp_path / "extra.json").write_text(json.dumps(doc))
    with pytest.raises(ModelParseError, match="extra"):
        load_model(tmp_path / "extra.json")

    doc = json.loads(text)
    del doc["parameters"]["norm.g"]
    (tmp_path / "missing.json").write_text(json.dumps(doc))
    with pytest.raises(MissingTensorError, match="norm.g"):
        load_model(tmp_path / "missing.json")

    doc = json.loads(text)
    doc["parameters"]["norm.g"]["shape"] = [3]
    (tmp_path / "shape.json").write_text(json.dumps(doc))
    with pytest.raises(TensorShapeError, match="norm.g"):
        load_model(tmp_path / "shape.json")

    (tmp_path / "binary.json").write_bytes(b"\xff\xfe\x00garbage")
    with pytest.raises(ModelParseError):
        load_model(tmp_path / "binary.json")


def test_hand_written_minimal_model(tmp_path):
    # B = 0, a 2x2 image in one 2x2 patch, d = 2, two classes
    doc = {
        "format_version": "1",
        "config": {"modality": "image", "embed_dim": 2, "heads": 1, "head_dim": 2,
                   "blocks": 0, "classes": 2, "mlp_dim": 1, "patch_size": 2,
                   "image_size": [2, 2]},
        "parameters": {
            "embed.w": {"shape": [4, 2], "data": [[1, 0], [0, 1], [1, 0], [0, 1]]},
            "embed.b": {"shape": [2], "data": [0, 0]},
            "embed.cls": {"shape": [2], "data": [3, 1]},
            "embed.pos": {"shape": [2, 2], "data": [[0, 0], [0, 0]]},
            "norm.g": {"shape": [2], "data": [1, 1]},
            "norm.b": {"shape": [2], "data": [0, 0]},
            "head.w": {"shape": [2, 2], "data": [[1, -1], [-1, 1]]},
            "head.b": {"shape": [2], "data": [0.5, 0]},
        },
    }
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(doc))
    model = load_model(path)
    logits, _ = classify(model, np.array([[0.2, 0.4], [0.6, 0.8]]))
    # CLS row [3, 1] normalises to [1, -1] (up to eps); head gives [2.5, -2]
    n = 1.0 / np.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(logits, [2 * n + 0.5, -2 * n], atol=1e-12)


def test_parameter_shapes_have_no_key_bias():
    shapes = parameter_shapes(ModelConfig())
    assert "blocks.0.b_q" in shapes and "blocks.0.b_k" not in shapes
