import numpy as np
import pytest
from scipy import ndimage

from attrib.autodiff import backward
from attrib.explainers import (CLASS_AGNOSTIC, METHODS, chain, cls_row_to_map, explain,
                               explain_full_lrp, ours_matrix, rollout_matrix, weighted_attention)
from attrib.model import ModelConfig, forward_record, init_model
from attrib.relevance import CLASSIC_LRP, POSITIVE_SUBSET, propagate_network
from oracles import dense_product, block_matrix


def micro(seed, **kw):
    cfg = ModelConfig(**kw)
    rng = np.random.default_rng(seed)
    return init_model(cfg, seed), rng.random(cfg.image_size)


def test_all_methods_run_and_have_pixel_maps():
    model, x = micro(0)
    for m in METHODS:
        rmap = explain(model, x, m, 1)
        assert rmap.token_scores.shape == (16,)
        assert rmap.pixel_map.shape == (16, 16) and rmap.grid == (4, 4)
        assert np.all(np.isfinite(rmap.pixel_map))
    with pytest.raises(ValueError):
        explain(model, x, "attention_flow")
    with pytest.raises(IndexError):
        explain(model, x, "ours", 2)


def test_ours_two_blocks_matches_dense_product():
    for seed in range(3):
        model, x = micro(seed)
        tape = forward_record(model, x)
        t = seed % 2
        grads, rel = backward(tape, t), propagate_network(tape, t)
        mats = [block_matrix(grads.attention(b), rel.attention[b]) for b in range(2)]
        np.testing.assert_allclose(ours_matrix(tape, t), dense_product(mats), atol=1e-12)
        np.testing.assert_allclose(explain(model, x, "ours", t).token_scores,
                                   dense_product(mats)[0, 1:], atol=1e-12)


def test_ours_single_block_is_one_factor():
    model, x = micro(1, blocks=1)
    tape = forward_record(model, x)
    grads, rel = backward(tape, 0), propagate_network(tape, 0)
    cam = np.maximum(grads.attention(0) * rel.attention[0], 0).mean(axis=0)
    C = ours_matrix(tape, 0)
    np.testing.assert_allclose(C[0], cam[0] + np.eye(17)[0], atol=1e-15)


def test_ours_with_nonpositive_products_is_identity():
    model, x = micro(2)
    model.parameters["head.w"][:] = 0.0  # every gradient vanishes
    tape = forward_record(model, x)
    np.testing.assert_array_equal(ours_matrix(tape, 0), np.eye(17))
    scores = explain(model, x, "ours", 0).token_scores
    assert np.all(scores == scores[0])
    np.testing.assert_array_equal(weighted_attention(-np.ones((2, 3, 3)), np.ones((2, 3, 3))),
                                  np.eye(3))


def test_block_matrices_are_nonnegative_with_unit_diagonal():
    model, x = micro(3)
    tape = forward_record(model, x)
    grads, rel = backward(tape, 1), propagate_network(tape, 1)
    for b in range(2):
        A = weighted_attention(grads.attention(b), rel.attention[b])
        assert np.all(A >= 0) and np.all(np.diag(A) >= 1)


def test_variants():
    model, x = micro(4)
    tape = forward_record(model, x)
    grads, rel = backward(tape, 0), propagate_network(tape, 0)
    no_grad = chain([weighted_attention(np.ones_like(rel.attention[b]), rel.attention[b])
                     for b in range(2)])
    np.testing.assert_array_equal(ours_matrix(tape, 0, "ours_no_grad"), no_grad)
    np.testing.assert_array_equal(ours_matrix(tape, 0, "ours_block_last"),
                                  weighted_attention(grads.attention(1), rel.attention[1]))
    np.testing.assert_array_equal(ours_matrix(tape, 0, "ours_block_first"),
                                  weighted_attention(grads.attention(0), rel.attention[0]))
    with pytest.raises(ValueError):
        ours_matrix(tape, 0, "ours_middle")


def test_clamp_matters():
    found = False
    for seed in range(100):
        model, x = micro(seed)
        if np.any(ours_matrix(forward_record(model, x), seed % 2, clamp=False) < 0):
            found = True
            break
    assert found


def test_rollout_hand_example():
    # one 4x4 patch: CLS plus one token, uniform attention from zero queries/keys
    model, x = micro(5, blocks=1, heads=1, head_dim=16, image_size=(4, 4))
    model.parameters["blocks.0.w_q"][:] = 0.0
    model.parameters["blocks.0.b_q"][:] = 0.0
    model.parameters["blocks.0.w_k"][:] = 0.0
    np.testing.assert_allclose(rollout_matrix(forward_record(model, x)),
                               [[1.5, 0.5], [0.5, 1.5]], atol=1e-15)


def test_rollout_two_blocks_and_class_agnostic():
    model, x = micro(6)
    tape = forward_record(model, x)
    mats = [np.eye(17) + r.saved_output.mean(axis=0) for r in tape.attention_records()]
    np.testing.assert_allclose(rollout_matrix(tape), dense_product(mats), atol=1e-12)
    for m in CLASS_AGNOSTIC:
        a, b = explain(model, x, m, 0), explain(model, x, m, 1)
        assert a.token_scores.tobytes() == b.token_scores.tobytes()
        assert a.pixel_map.tobytes() == b.pixel_map.tobytes()


def test_raw_attention():
    model, x = micro(7)
    tape = forward_record(model, x)
    scores = explain(model, x, "raw_attention").token_scores
    np.testing.assert_array_equal(scores, tape.attention_records()[-1].saved_output.mean(axis=0)[0, 1:])
    assert np.all(scores >= 0) and np.all(scores <= 1)
    model.parameters["blocks.1.w_q"][:] = 0.0
    model.parameters["blocks.1.b_q"][:] = 0.0
    model.parameters["blocks.1.w_k"][:] = 0.0
    np.testing.assert_allclose(explain(model, x, "raw_attention").token_scores, 1 / 17, atol=1e-15)


def test_gradcam():
    model, x = micro(8, heads=1, head_dim=16)
    tape = forward_record(model, x)
    g = backward(tape, 1).attention(1)[0, 0, 1:]
    A = tape.attention_records()[-1].saved_output[0, 0, 1:]
    np.testing.assert_allclose(explain(model, x, "gradcam_attn", 1).token_scores,
                               np.maximum(g.mean() * A, 0), atol=1e-15)
    model.parameters["head.w"][:] = 0.0
    np.testing.assert_array_equal(explain(model, x, "gradcam_attn", 1).token_scores, 0.0)


def test_partial_lrp_single_block():
    model, x = micro(9, blocks=1)
    tape = forward_record(model, x)
    R = propagate_network(tape, 1, CLASSIC_LRP).attention[0].mean(axis=0)
    np.testing.assert_array_equal(explain(model, x, "partial_lrp", 1).token_scores, R[0, 1:])


def test_full_lrp():
    model, x = micro(10)
    tape = forward_record(model, x)
    rel = propagate_network(tape, 0, CLASSIC_LRP)
    np.testing.assert_array_equal(explain(model, x, "full_lrp", 0).token_scores,
                                  rel.input_relevance.sum(axis=-1)[1:])
    conserving = propagate_network(tape, 0, POSITIVE_SUBSET).input_relevance
    assert abs(conserving.sum() - 1.0) <= 1e-6
    rmap = explain_full_lrp(model, x, 0, rules=POSITIVE_SUBSET)
    assert abs(rmap.token_scores.sum() + conserving[0].sum() - 1.0) <= 1e-6


def test_full_lrp_symmetric_tokens_share_equally():
    model, _ = micro(11)
    model.parameters["embed.pos"][:] = 0.0
    scores = explain(model, np.zeros((16, 16)), "full_lrp", 0).token_scores
    np.testing.assert_allclose(scores, scores[0], rtol=1e-9, atol=1e-15)


def test_cls_row_to_map():
    np.testing.assert_allclose(cls_row_to_map(np.full(4, 0.3), (2, 2), (8, 8)), 0.3)
    np.testing.assert_array_equal(cls_row_to_map([0, 1, 1, 0], (2, 2), (2, 2)), [[0, 1], [1, 0]])
    rng = np.random.default_rng(0)
    g = rng.random((2, 2))
    out = cls_row_to_map(g.reshape(-1), (2, 2), (4, 4))
    # corner-aligned bilinear interpolation written out pointwise
    ref = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            y, x = i / 3, j / 3
            ref[i, j] = (g[0, 0] * (1 - y) * (1 - x) + g[0, 1] * (1 - y) * x
                         + g[1, 0] * y * (1 - x) + g[1, 1] * y * x)
    np.testing.assert_allclose(out, ref, atol=1e-9)
    g = rng.random((4, 4))
    np.testing.assert_allclose(cls_row_to_map(g.reshape(-1), (4, 4), (16, 16)),
                               ndimage.zoom(g, 4, order=1, grid_mode=False), atol=1e-9)
    with pytest.raises(ValueError):
        cls_row_to_map(np.ones(5), (2, 2), (4, 4))


def test_text_maps_have_no_pixels():
    cfg = ModelConfig(modality="text", vocab_size=10, text_len=6, patch_size=1, image_size=(1, 1))
    model = init_model(cfg, 0)
    rmap = explain(model, np.array([2, 3, 4, 5, 6, 7.0]), "ours", 0)
    assert rmap.token_scores.shape == (6,) and rmap.pixel_map is None


def test_class_specific_on_trained_model(trained_toy):
    model, _ = trained_toy
    from attrib.evaluation.datasets import gen_synthetic_dataset
    it = gen_synthetic_dataset("image", 1, 99, two_object=True).items[0]
    for m in ("ours", "gradcam_attn"):
        a, b = explain(model, it.input, m, 0), explain(model, it.input, m, 1)
        assert not np.array_equal(a.token_scores, b.token_scores)
