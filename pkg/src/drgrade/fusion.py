"""Attention fusion of the deep and handcrafted feature vectors.

The two projected vectors form a 2-token sequence; 4-head scaled dot-product
attention reweights them and the token outputs are averaged into a single
64-d fused vector.

The handcrafted vector is standardized on entry: (hand - hand_mu) * hand_scale
with statistics fit on the training set and frozen afterwards (hand_scale is
the reciprocal of the per-feature std). Raw feature columns differ in spread
by more than an order of magnitude, which stalls SGD under a shared learning
rate. The blocks start as the identity transform.
"""

import numpy as np

from . import autodiff as ad
from .embedder import D_DEEP
from .features import HANDCRAFTED_DIM

D_MODEL = 64
N_HEADS = 4
D_K = D_MODEL // N_HEADS


def init_fusion(seed: int = 0) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 303]))

    def xavier(shape):
        return rng.normal(0.0, np.sqrt(1.0 / shape[0]), size=shape)

    return {
        "fus.hand_mu": np.zeros(HANDCRAFTED_DIM),
        "fus.hand_scale": np.ones(HANDCRAFTED_DIM),
        "fus.p_deep": xavier((D_DEEP, D_MODEL)),
        "fus.p_hand": xavier((HANDCRAFTED_DIM, D_MODEL)),
        "fus.w_q": xavier((D_MODEL, D_MODEL)),
        "fus.w_k": xavier((D_MODEL, D_MODEL)),
        "fus.w_v": xavier((D_MODEL, D_MODEL)),
        "fus.w_o": xavier((D_MODEL, D_MODEL)),
    }


def fit_hand_stats(hand: np.ndarray) -> dict:
    """Standardization blocks from a (N, 20) training matrix.

    Near-constant columns keep unit scale so they cannot blow up."""
    mu = hand.mean(axis=0)
    sd = hand.std(axis=0)
    return {"fus.hand_mu": mu,
            "fus.hand_scale": 1.0 / np.where(sd < 1e-6, 1.0, sd)}


def _split_heads(t, n):
    # (N, 2, d_model) -> (N, heads, 2, d_k)
    t = ad.reshape(t, (n, 2, N_HEADS, D_K))
    return ad.transpose(t, (0, 2, 1, 3))


def fuse_nodes(p, f_deep, f_hand, n):
    """Graph fragment. f_deep (N,64), f_hand (N,20) -> (fused, attention).

    f_hand arrives raw; the frozen hand_mu/hand_scale blocks standardize it
    here so every caller (training, prediction, explanation graphs) agrees.
    """
    f_hand = ad.mul(ad.sub(f_hand, p["fus.hand_mu"]), p["fus.hand_scale"])
    t1 = ad.reshape(ad.matmul(f_deep, p["fus.p_deep"]), (n, 1, D_MODEL))
    t2 = ad.reshape(ad.matmul(f_hand, p["fus.p_hand"]), (n, 1, D_MODEL))
    tokens = ad.concat([t1, t2], axis=1)  # (N, 2, d_model)
    q = _split_heads(ad.matmul(tokens, p["fus.w_q"]), n)
    k = _split_heads(ad.matmul(tokens, p["fus.w_k"]), n)
    v = _split_heads(ad.matmul(tokens, p["fus.w_v"]), n)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                    ad.Tensor(np.array(1.0 / np.sqrt(D_K))))
    attn = ad.softmax(scores, axis=-1)  # (N, heads, 2, 2)
    ctx = ad.matmul(attn, v)  # (N, heads, 2, d_k)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, 2, D_MODEL))
    out = ad.matmul(ctx, p["fus.w_o"])
    fused = ad.mean(out, axis=1)  # (N, d_model)
    return fused, attn


def fuse(params: dict, f_deep: np.ndarray, f_hand: np.ndarray):
    """Single-sample fusion. Returns (fused (64,), attention (4,2,2))."""
    g = ad.ComputeGraph(
        lambda p, i: dict(zip(("fused", "attn"),
                              fuse_nodes(p, i["fd"], i["fh"], 1))), params)
    out = ad.evaluate(g, {"fd": f_deep[None], "fh": f_hand[None]})
    return out["fused"][0], out["attn"][0]
