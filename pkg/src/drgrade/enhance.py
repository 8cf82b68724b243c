"""Residual enhancement network trained against reconstruction + a
Beer-Lambert consistency penalty.

The attenuation ground truth stores the product mu*d per pixel; the model
carries a single learnable scalar mu_scale (init 1, clamped >= 0) that
multiplies the stored map inside the penalty, absorbing any global scale
mismatch while keeping the absorption coefficient constant per image.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .imaging import Image, dequantize, load_pnm, resize_bilinear
from .synth import attenuation_from_raw, read_manifest

OUT_EPS = 1e-4


@dataclass
class EnhanceConfig:
    lam: float = 0.5
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    max_pairs: int = 0  # 0 = use every train pair
    resolution: int = 0  # 0 = native image size


def init_enhancer(channels: int = 1, seed: int = 0) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))

    def he(shape):
        fan_in = shape[0] * shape[1] * shape[2]
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    return {
        "enh.w0": he((3, 3, channels, 16)),
        "enh.b0": np.zeros(16),
        "enh.w1": he((3, 3, 16, 16)),
        "enh.b1": np.zeros(16),
        # zero last layer: the net starts as the identity map
        "enh.w2": np.zeros((3, 3, 16, channels)),
        "enh.b2": np.zeros(channels),
        "enh.mu_scale": np.array(1.0),
    }


def enhance_node(p, x):
    """Graph fragment: x (N,H,W,C) -> clamped enhanced output."""
    h = ad.relu(ad.conv2d(x, p["enh.w0"], p["enh.b0"]))
    h = ad.relu(ad.conv2d(h, p["enh.w1"], p["enh.b1"]))
    r = ad.conv2d(h, p["enh.w2"], p["enh.b2"])
    return ad.clamp(ad.add(x, r), OUT_EPS, 1.0)


def build_training_graph(params: dict, lam: float) -> ad.ComputeGraph:
    def build(p, i):
        enh = enhance_node(p, i["low"])
        diff = ad.sub(enh, i["clean"])
        recon = ad.mean(ad.square(diff))
        logratio = ad.sub(ad.log(enh), ad.log(i["low"]))
        resid = ad.sub(logratio, ad.mul(p["enh.mu_scale"], i["att"]))
        physics = ad.mean(ad.square(resid))
        total = ad.add(recon, ad.mul(ad.Tensor(np.array(lam)), physics))
        return {"loss": total, "recon": recon, "physics": physics,
                "enhanced": enh}
    return ad.ComputeGraph(build, params)


def enhance(params: dict, low: Image) -> Image:
    g = ad.ComputeGraph(lambda p, i: {"out": enhance_node(p, i["x"])}, params)
    out = ad.evaluate(g, {"x": low.samples[None]})["out"]
    return Image(out[0])


def loss_recon(enhanced: Image, high: Image) -> float:
    if enhanced.samples.shape != high.samples.shape:
        raise ValueError("dimension mismatch")
    return float(np.mean((enhanced.samples - high.samples) ** 2))


def loss_physics(enhanced: Image, low: Image, attenuation: np.ndarray,
                 mu_scale: float) -> float:
    if enhanced.samples.shape != low.samples.shape:
        raise ValueError("dimension mismatch")
    e = np.maximum(enhanced.samples[..., 0], 1e-12)
    l = np.maximum(low.samples[..., 0], 1e-12)
    resid = np.log(e / l) - mu_scale * attenuation
    return float(np.mean(resid ** 2))


def _read(path):
    with open(path, "rb") as fh:
        return load_pnm(fh.read())


def load_pairs(manifest_path, split="train", resolution=0):
    """(low, clean, att) arrays for one split, in manifest order.

    With resolution > 0 every array is resized to that square size so the
    working resolution can differ from the stored dataset size.
    """
    base = os.path.dirname(manifest_path)
    rows = [r for r in read_manifest(manifest_path) if r["split"] == split]

    def fit(img: Image) -> Image:
        if resolution and img.samples.shape[:2] != (resolution, resolution):
            return resize_bilinear(img, resolution, resolution)
        return img

    out = []
    for r in rows:
        clean = fit(dequantize(_read(os.path.join(base, r["path_clean"]))))
        low = fit(dequantize(_read(os.path.join(base, r["path_degraded"]))))
        att = attenuation_from_raw(_read(os.path.join(base, r["path_attenuation"])))
        att = fit(Image(att[..., None])).samples
        out.append((low.samples, clean.samples, att))
    return out


def train_enhancer(manifest_path, config: EnhanceConfig = None):
    """Stage-1 training. Returns (params, history dict)."""
    cfg = config or EnhanceConfig()
    pairs = load_pairs(manifest_path, "train", cfg.resolution)
    if not pairs:
        raise ValueError("empty train split")
    if cfg.max_pairs and len(pairs) > cfg.max_pairs:
        pairs = pairs[:cfg.max_pairs]
    val = load_pairs(manifest_path, "val", cfg.resolution)
    return train_enhancer_arrays(pairs, cfg, val)


def train_enhancer_arrays(pairs, cfg: EnhanceConfig, val=None):
    if not pairs:
        raise ValueError("empty train split")
    channels = pairs[0][0].shape[-1]
    params = init_enhancer(channels, cfg.seed)
    graph = build_training_graph(params, cfg.lam)
    low_all = np.stack([p[0] for p in pairs])
    clean_all = np.stack([p[1] for p in pairs])
    att_all = np.stack([p[2] for p in pairs])
    n = len(pairs)
    history = {"train_total": [], "train_recon": [], "train_physics": [],
               "val_physics": []}
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, epoch])).permutation(n)
        tot = rec = phy = 0.0
        seen = 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            inputs = {"low": low_all[idx], "clean": clean_all[idx],
                      "att": att_all[idx]}
            vals = ad.evaluate(graph, inputs)
            grads, _ = ad.gradients(graph, inputs)
            for name, g in grads.items():
                params[name] -= cfg.learning_rate * g
            params["enh.mu_scale"] = np.maximum(params["enh.mu_scale"], 0.0)
            tot += float(vals["loss"]) * len(idx)
            rec += float(vals["recon"]) * len(idx)
            phy += float(vals["physics"]) * len(idx)
            seen += len(idx)
        history["train_total"].append(tot / seen)
        history["train_recon"].append(rec / seen)
        history["train_physics"].append(phy / seen)
        if val:
            history["val_physics"].append(_mean_physics(params, val))
    return params, history


def _mean_physics(params, pairs):
    mu = float(params["enh.mu_scale"])
    acc = 0.0
    for low, _, att in pairs:
        out = enhance(params, Image(low))
        acc += loss_physics(out, Image(low), att[..., 0], mu)
    return acc / len(pairs)
