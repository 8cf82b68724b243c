"""Class-activation maps and dropout-variance heatmaps.

grad_cam: gradient of the chosen pre-softmax severity logit w.r.t. the
embedder's final feature maps, spatially averaged into per-map weights,
combined, rectified, upsampled and min-max normalized.

uncertainty_heatmap: the same rectified un-normalized map of the staged
class, recomputed under T dropout samples; per-pixel population variance of
those maps, min-max normalized.
"""

import numpy as np

from . import autodiff as ad
from . import classifier as cl
from . import embedder as em
from . import fusion as fu
from .classifier import two_pass_stats
from .imaging import Image, resize_bilinear, save_pnm


def _full_graph(params):
    def build(p, i):
        maps, vec = em.embed_nodes(p, i["x"])
        fused, attn = fu.fuse_nodes(p, vec, i["hand"], 1)
        p_bin, probs, logits = cl.head_nodes(p, fused, i["mask"])
        y_c = ad.sumt(ad.mul(logits, i["onehot"]))
        return {"maps": maps, "p_bin": p_bin, "probs": probs,
                "logits": logits, "y_c": y_c, "attn": attn, "fused": fused}
    return ad.ComputeGraph(build, params)


def _raw_cam(graph, x, hand, mask, class_index):
    onehot = np.zeros((1, cl.N_CLASSES))
    onehot[0, class_index] = 1.0
    inputs = {"x": x, "hand": hand, "mask": mask, "onehot": onehot}
    vals = ad.evaluate(graph, inputs)
    _, acts = ad.gradients(graph, inputs, loss="y_c", activations=("maps",))
    da = acts["maps"][0]  # (h, w, K)
    alpha = da.mean(axis=(0, 1))  # (K,)
    raw = np.maximum((vals["maps"][0] * alpha).sum(axis=-1), 0.0)
    return raw, vals


def _minmax(m):
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def _upsample(m, h, w):
    return resize_bilinear(Image(m[..., None]), h, w).samples[..., 0]


def grad_cam(params: dict, image: Image, class_index: int,
             hand: np.ndarray = None) -> np.ndarray:
    """Normalized (H, W) activation map for one severity class.

    `image` is whatever feeds the embedder (the enhanced image in the full
    pipeline). Dropout is disabled.
    """
    if class_index not in range(cl.N_CLASSES):
        raise ValueError(f"class index {class_index} not in 0..4")
    from .features import handcrafted_vector
    if hand is None:
        hand = handcrafted_vector(image)
    x = image.samples[None]
    graph = _full_graph(params)
    raw, _ = _raw_cam(graph, x, hand[None], cl.no_dropout_mask(), class_index)
    return _minmax(_upsample(raw, image.height, image.width))


def uncertainty_heatmap(params: dict, image: Image, T: int, seed: int,
                        p: float = cl.DEFAULT_DROPOUT,
                        tau: float = cl.DEFAULT_TAU,
                        hand: np.ndarray = None, return_passes: bool = False):
    """Per-pixel variance of the staged class's rectified map over T
    dropout samples, min-max normalized to [0, 1]."""
    if T < 2:
        raise ValueError("T must be >= 2")
    from .features import handcrafted_vector
    if hand is None:
        hand = handcrafted_vector(image)
    x = image.samples[None]
    graph = _full_graph(params)

    # stage the prediction with the same mask stream used for the maps
    bin_s = np.empty(T)
    cls_s = np.empty((T, cl.N_CLASSES))
    masks = []
    for t in range(T):
        rng = np.random.default_rng(np.random.SeedSequence([seed, t]))
        masks.append(cl.sample_mask(rng, p))
        out = ad.evaluate(graph, {"x": x, "hand": hand[None],
                                  "mask": masks[-1],
                                  "onehot": np.zeros((1, cl.N_CLASSES))})
        bin_s[t] = out["p_bin"][0, 0]
        cls_s[t] = out["probs"][0]
    stats = cl.McStats(binary_samples=bin_s, class_samples=cls_s, T=T, seed=seed)
    staged = cl.final_prediction(stats, tau).severity

    passes = np.empty((T, image.height, image.width))
    for t in range(T):
        raw, _ = _raw_cam(graph, x, hand[None], masks[t], staged)
        passes[t] = _upsample(raw, image.height, image.width)
    _, var = two_pass_stats(passes)
    heat = _minmax(var)
    if return_passes:
        return heat, passes
    return heat


def render_overlay(base: Image, m: np.ndarray, stem: str, kind: str):
    """Write <stem>.<kind>.pgm (the map) and <stem>.<kind>_overlay.ppm
    (red-channel emphasis on the base image). Returns the two paths."""
    if m.shape != (base.height, base.width):
        raise ValueError("map/base dimension mismatch")
    map_path = f"{stem}.{kind}.pgm"
    overlay_path = f"{stem}.{kind}_overlay.ppm"
    save_pnm(Image(m[..., None]), map_path)
    rgb = em.to_three_channels(base).copy()
    rgb[..., 0] = np.clip(rgb[..., 0] + 0.6 * m, 0.0, 1.0)
    save_pnm(Image(rgb), overlay_path)
    return map_path, overlay_path
