import numpy as np
import pytest

from drgrade import autodiff as ad
from drgrade import enhance as en
from drgrade import synth
from drgrade.imaging import Image


def rand_triplet(rng, size=12):
    low = rng.uniform(0.1, 0.9, size=(size, size, 1))
    clean = rng.uniform(0.1, 0.9, size=(size, size, 1))
    att = rng.uniform(0.0, 1.2, size=(size, size, 1))
    return low, clean, att


def test_fresh_params_are_identity():
    params = en.init_enhancer(seed=3)
    low = Image(np.random.default_rng(0).uniform(0.01, 0.99, (16, 16, 1)))
    out = en.enhance(params, low)
    np.testing.assert_array_equal(out.samples, low.samples)


def test_output_always_clamped():
    params = en.init_enhancer(seed=1)
    params["enh.w2"] = np.random.default_rng(2).normal(0, 5, params["enh.w2"].shape)
    out = en.enhance(params, Image(np.random.default_rng(3).random((20, 20, 1))))
    assert out.samples.min() >= en.OUT_EPS
    assert out.samples.max() <= 1.0


def test_loss_recon_values():
    a = Image(np.zeros((4, 4, 1)))
    b = Image(np.ones((4, 4, 1)))
    assert en.loss_recon(a, a) == 0.0
    assert en.loss_recon(a, b) == 1.0
    half = np.zeros((2, 2, 1))
    half[0, :, 0] = 0.5
    assert en.loss_recon(Image(half), Image(np.zeros((2, 2, 1)))) == 0.125


def test_loss_recon_rejects_mismatch():
    with pytest.raises(ValueError):
        en.loss_recon(Image(np.zeros((2, 2, 1))), Image(np.zeros((3, 2, 1))))


def test_loss_physics_perfect_inversion():
    rng = np.random.default_rng(5)
    low, _, att = rand_triplet(rng)
    enhanced = Image(np.clip(low * np.exp(att), 0, 1e9))
    assert en.loss_physics(enhanced, Image(low), att[..., 0], 1.0) <= 1e-9


def test_loss_physics_trivial_cases():
    low = np.full((4, 4, 1), 0.5)
    img = Image(low)
    assert en.loss_physics(img, img, np.zeros((4, 4)), 1.0) == 0.0
    assert en.loss_physics(img, img, np.ones((4, 4)), 1.0) == pytest.approx(1.0)


def test_training_graph_matches_finite_differences():
    rng = np.random.default_rng(11)
    params = en.init_enhancer(seed=11)
    # non-zero last layer so its gradient path is exercised
    params["enh.w2"] = rng.normal(0, 0.05, params["enh.w2"].shape)
    graph = en.build_training_graph(params, lam=0.5)
    low, clean, att = rand_triplet(rng, size=8)
    inputs = {"low": low[None], "clean": clean[None], "att": att[None]}
    # 1e-6 step: small enough that relu/clamp kinks stay outside the stencil
    assert ad.finite_difference_check(graph, inputs, epsilon=1e-6) <= 1e-4


def test_lambda_zero_total_equals_recon():
    rng = np.random.default_rng(7)
    pairs = [rand_triplet(rng) for _ in range(6)]
    cfg = en.EnhanceConfig(lam=0.0, epochs=2, batch_size=3, seed=7)
    _, hist = en.train_enhancer_arrays(pairs, cfg)
    assert hist["train_total"] == hist["train_recon"]


def test_lambda_zero_ignores_attenuation_contents():
    rng = np.random.default_rng(9)
    pairs_a = [rand_triplet(rng) for _ in range(5)]
    pairs_b = [(l, c, np.full_like(a, 2.5)) for l, c, a in pairs_a]
    cfg = en.EnhanceConfig(lam=0.0, epochs=2, batch_size=2, seed=9)
    pa, _ = en.train_enhancer_arrays(pairs_a, cfg)
    pb, _ = en.train_enhancer_arrays(pairs_b, cfg)
    for k in pa:
        assert np.array_equal(pa[k], pb[k]), k


def test_training_decreases_loss():
    pairs = []
    for seed in range(8):
        sc = synth.generate_scene(seed, 0, size=64)
        s = synth.render(sc)
        pairs.append((s.degraded.samples, s.clean.samples,
                      s.attenuation[..., None]))
    cfg = en.EnhanceConfig(epochs=5, seed=42)
    params, hist = en.train_enhancer_arrays(pairs, cfg)
    assert hist["train_total"][-1] < hist["train_total"][0]
    assert float(params["enh.mu_scale"]) >= 0.0


def test_train_requires_pairs():
    with pytest.raises(ValueError):
        en.train_enhancer_arrays([], en.EnhanceConfig())


def test_manifest_training_runs(tmp_path):
    man = synth.generate_dataset(12, 3, [1, 0, 0, 0, 0], tmp_path / "d", size=64)
    params, hist = en.train_enhancer(man, en.EnhanceConfig(epochs=2, seed=3))
    assert len(hist["train_total"]) == 2
    assert len(hist["val_physics"]) == 2
    assert all(np.isfinite(v).all() for v in params.values())
