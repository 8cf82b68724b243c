"""Embedder, fusion, and classifier-head contracts."""

import numpy as np
import pytest

from drgrade import autodiff as ad
from drgrade import classifier as cl
from drgrade import embedder as em
from drgrade import fusion as fu
from drgrade.imaging import Image


# --- embedder ---

def test_residual_identity_when_second_conv_zero():
    params = em.init_embedder(seed=0)
    params["emb.r1c2_w"] = np.zeros_like(params["emb.r1c2_w"])
    params["emb.r1c2_b"] = np.zeros_like(params["emb.r1c2_b"])
    x = np.random.default_rng(1).normal(size=(10, 10, 8))
    y = em.residual_block(params, x, blk=1)
    np.testing.assert_array_equal(y, x)


def test_residual_zero_input_zero_biases():
    params = em.init_embedder(seed=2)
    for k in ("emb.r2c1_b", "emb.r2c2_b"):
        params[k] = np.zeros_like(params[k])
    y = em.residual_block(params, np.zeros((6, 6, 8)), blk=2)
    np.testing.assert_array_equal(y, np.zeros((6, 6, 8)))


def test_embed_shape_and_determinism():
    params = em.init_embedder(seed=5)
    img = Image(np.random.default_rng(3).random((96, 96, 1)))
    e1 = em.embed(params, img)
    e2 = em.embed(params, img)
    assert e1.vector.shape == (64,)
    assert e1.maps.shape == (24, 24, 8)  # input resolution / 4
    np.testing.assert_array_equal(e1.vector, e2.vector)


def test_embed_rejects_wrong_resolution():
    with pytest.raises(ValueError):
        em.embed(em.init_embedder(), Image(np.zeros((64, 64, 1))))


def test_embed_sensitive_to_single_pixel():
    params = em.init_embedder(seed=7)
    rng = np.random.default_rng(8)
    a = rng.random((96, 96, 1))
    b = a.copy()
    b[48, 48, 0] = 1.0 - b[48, 48, 0]
    va = em.embed(params, Image(a)).vector
    vb = em.embed(params, Image(b)).vector
    assert not np.array_equal(va, vb)


def test_embed_gradient_matches_fd_small_crop():
    params = em.init_embedder(seed=9)

    def build(p, i):
        _, vec = em.embed_nodes(p, i["x"])
        return {"loss": ad.mean(ad.square(vec))}

    g = ad.ComputeGraph(build, params)
    x = np.random.default_rng(10).uniform(0.1, 0.9, size=(1, 16, 16, 1))
    assert ad.finite_difference_check(g, {"x": x}, epsilon=1e-6) <= 1e-4


# --- fusion ---

def test_zero_query_gives_uniform_attention():
    params = fu.init_fusion(seed=0)
    params["fus.w_q"] = np.zeros_like(params["fus.w_q"])
    rng = np.random.default_rng(1)
    _, attn = fu.fuse(params, rng.normal(size=64), rng.normal(size=20))
    np.testing.assert_allclose(attn, 0.5, atol=1e-12)


def test_identical_tokens_symmetric():
    params = fu.init_fusion(seed=2)
    rng = np.random.default_rng(3)
    f_deep = rng.normal(size=64)
    f_hand = np.zeros(20)
    f_hand[0] = 1.0
    # make the handcrafted token equal the deep token
    params["fus.p_hand"] = np.zeros_like(params["fus.p_hand"])
    params["fus.p_hand"][0, :] = f_deep @ params["fus.p_deep"]
    _, attn = fu.fuse(params, f_deep, f_hand)
    np.testing.assert_allclose(attn, 0.5, atol=1e-9)


def test_attention_rows_normalized():
    params = fu.init_fusion(seed=4)
    rng = np.random.default_rng(5)
    _, attn = fu.fuse(params, rng.normal(size=64), rng.normal(size=20))
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-9)
    assert (attn > 0).all() and (attn < 1).all()


def test_query_key_scale_cancellation():
    params = fu.init_fusion(seed=6)
    rng = np.random.default_rng(7)
    fd, fh = rng.normal(size=64), rng.normal(size=20)
    base, _ = fu.fuse(params, fd, fh)
    scaled = dict(params)
    scaled["fus.w_q"] = params["fus.w_q"] * 3.0
    scaled["fus.w_k"] = params["fus.w_k"] / 3.0
    out, _ = fu.fuse(scaled, fd, fh)
    np.testing.assert_allclose(out, base, atol=1e-12)


def test_fused_width_and_gradient():
    params = fu.init_fusion(seed=8)

    def build(p, i):
        fused, _ = fu.fuse_nodes(p, i["fd"], i["fh"], 2)
        return {"loss": ad.mean(ad.square(fused)), "fused": fused}

    g = ad.ComputeGraph(build, params)
    rng = np.random.default_rng(9)
    inputs = {"fd": rng.normal(size=(2, 64)), "fh": rng.normal(size=(2, 20))}
    assert ad.evaluate(g, inputs)["fused"].shape == (2, 64)
    assert ad.finite_difference_check(g, inputs) <= 1e-4


# --- classifier heads ---

def test_zero_weights_give_neutral_outputs():
    params = {k: np.zeros_like(v) for k, v in cl.init_classifier().items()}
    f = np.random.default_rng(0).normal(size=64)
    assert cl.predict_binary(params, f) == 0.5
    np.testing.assert_allclose(cl.predict_multiclass(params, f), 0.2)


def test_sigmoid_saturation_via_bias():
    params = {k: np.zeros_like(v) for k, v in cl.init_classifier().items()}
    params["cls.bin_b"] = np.array([20.0])
    assert cl.predict_binary(params, np.zeros(64)) >= 1 - 1e-8


def test_bce_at_perfect_prediction():
    assert cl.bce(1.0, 1.0 - 1e-12) <= 1e-9
    assert cl.cce(np.eye(5)[2], np.eye(5)[2] * (1 - 1e-12) + 1e-13) <= 1e-9


def test_softmax_shift_invariance_of_head():
    params = cl.init_classifier(seed=3)
    f = np.random.default_rng(4).normal(size=64)
    base = cl.predict_multiclass(params, f)
    shifted = dict(params)
    shifted["cls.multi_b"] = params["cls.multi_b"] + 7.5
    np.testing.assert_allclose(cl.predict_multiclass(shifted, f), base,
                               atol=1e-9)


def test_mc_zero_dropout_zero_variance():
    params = cl.init_classifier(seed=5)
    f = np.random.default_rng(6).normal(size=64)
    stats = cl.mc_predict(params, f, T=7, seed=1, p=0.0)
    assert stats.binary_variance == 0.0
    np.testing.assert_array_equal(stats.class_variances, np.zeros(5))


def test_mc_single_sample_zero_variance():
    params = cl.init_classifier(seed=7)
    f = np.random.default_rng(8).normal(size=64)
    stats = cl.mc_predict(params, f, T=1, seed=2, p=0.4)
    assert stats.binary_variance == 0.0
    np.testing.assert_array_equal(stats.class_variances, np.zeros(5))


def test_mc_matches_two_pass_oracle_exactly():
    # independent recomputation of the documented shifted two-pass stats
    params = cl.init_classifier(seed=9)
    f = np.random.default_rng(10).normal(size=64)
    stats = cl.mc_predict(params, f, T=25, seed=3, p=0.3)
    d = stats.class_samples - stats.class_samples[0]
    md = np.sum(d, axis=0) / stats.T
    m = stats.class_samples[0] + md
    v = np.sum((d - md) ** 2, axis=0) / stats.T
    np.testing.assert_array_equal(stats.class_means, m)
    np.testing.assert_array_equal(stats.class_variances, v)
    db = stats.binary_samples - stats.binary_samples[0]
    mdb = np.sum(db) / stats.T
    assert stats.binary_mean == stats.binary_samples[0] + mdb
    assert stats.binary_variance == np.sum((db - mdb) ** 2) / stats.T
    # and the plain formulas agree to float tolerance
    np.testing.assert_allclose(m, stats.class_samples.mean(axis=0), rtol=1e-12)


def test_mc_spread_grows_with_dropout_rate():
    params = cl.init_classifier(seed=42)
    f = np.random.default_rng(42).normal(size=64) * 2
    hi = cl.mc_predict(params, f, T=100, seed=42, p=0.5)
    lo = cl.mc_predict(params, f, T=100, seed=42, p=0.1)
    assert hi.class_variances.mean() > lo.class_variances.mean()


def test_mc_deterministic_for_seed():
    params = cl.init_classifier(seed=11)
    f = np.random.default_rng(12).normal(size=64)
    a = cl.mc_predict(params, f, T=9, seed=5, p=0.2)
    b = cl.mc_predict(params, f, T=9, seed=5, p=0.2)
    np.testing.assert_array_equal(a.class_samples, b.class_samples)


def _stats_from_means(mu_bin, mu_cls):
    return cl.McStats(binary_samples=np.full(4, mu_bin),
                      class_samples=np.tile(mu_cls, (4, 1)), T=4, seed=0)


def test_staging_gate_low_binary():
    pred = cl.final_prediction(_stats_from_means(0.1, np.array([0.05, 0.1, 0.6, 0.15, 0.1])))
    assert pred.severity == 0


def test_staging_argmax_over_severity_classes():
    pred = cl.final_prediction(_stats_from_means(0.9, np.array([0.05, 0.1, 0.6, 0.15, 0.1])))
    assert pred.severity == 2


def test_staging_ignores_class0_score_when_gated_on():
    # class 0 may dominate the softmax yet the gate says DR present
    pred = cl.final_prediction(_stats_from_means(0.8, np.array([0.6, 0.1, 0.1, 0.15, 0.05])))
    assert pred.severity == 3


def test_staging_tie_breaks_low():
    pred = cl.final_prediction(_stats_from_means(0.9, np.array([0.0, 0.3, 0.3, 0.3, 0.1])))
    assert pred.severity == 1


def test_staging_scale_invariance():
    mu = np.array([0.05, 0.1, 0.45, 0.3, 0.1])
    a = cl.final_prediction(_stats_from_means(0.9, mu)).severity
    b = cl.final_prediction(_stats_from_means(0.9, mu * 7.0)).severity
    assert a == b


def test_confidence_scores_sum_to_one():
    params = cl.init_classifier(seed=13)
    f = np.random.default_rng(14).normal(size=64)
    pred = cl.final_prediction(cl.mc_predict(params, f, T=15, seed=4, p=0.25))
    assert abs(sum(pred.confidence_scores) - 1.0) <= 1e-6
    assert (pred.uncertainty >= 0).all()


def test_joint_loss_gradient_matches_fd():
    params = cl.init_classifier(seed=15)

    def build(p, i):
        p_bin, probs, _ = cl.head_nodes(p, i["fused"], i["mask"])
        total, _, _ = cl.loss_nodes(p_bin, probs, i["y_bin"], i["y_onehot"])
        return {"loss": total}

    g = ad.ComputeGraph(build, params)
    rng = np.random.default_rng(16)
    n = 4
    mask = cl.sample_mask(np.random.default_rng(17), 0.2, n)
    inputs = {"fused": rng.normal(size=(n, 64)), "mask": mask,
              "y_bin": rng.integers(0, 2, size=(n, 1)).astype(float),
              "y_onehot": np.eye(5)[rng.integers(0, 5, size=n)]}
    assert ad.finite_difference_check(g, inputs) <= 1e-4
