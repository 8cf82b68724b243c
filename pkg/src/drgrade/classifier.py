"""Two-head classifier over the fused vector, with MC-dropout statistics.

A shared 64->32 hidden layer (ReLU, inverted dropout on its output) feeds a
sigmoid presence head and a 5-way softmax severity head. Staging: presence
probability below tau means grade 0, otherwise the severity head decides
among grades 1-4 (ties toward the lower grade).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

HIDDEN = 32
N_CLASSES = 5
DEFAULT_TAU = 0.5
DEFAULT_DROPOUT = 0.2
LOG_EPS = 1e-12


def two_pass_stats(samples: np.ndarray):
    """Population mean/variance (divide by T) via shifted two-pass.

    Shifting by the first sample keeps identical samples at exactly zero
    variance, which the p=0 and T=1 contracts require bit-for-bit.
    """
    d = samples - samples[0]
    md = d.mean(axis=0)
    return samples[0] + md, ((d - md) ** 2).mean(axis=0)


@dataclass
class McStats:
    binary_samples: np.ndarray  # (T,)
    class_samples: np.ndarray  # (T, 5)
    T: int
    seed: int

    @property
    def binary_mean(self):
        return float(two_pass_stats(self.binary_samples)[0])

    @property
    def binary_variance(self):
        return float(two_pass_stats(self.binary_samples)[1])

    @property
    def class_means(self):
        return two_pass_stats(self.class_samples)[0]

    @property
    def class_variances(self):
        return two_pass_stats(self.class_samples)[1]


@dataclass
class Prediction:
    severity: int
    confidence_scores: np.ndarray  # (5,) class means
    uncertainty: np.ndarray  # (5,) class variances
    binary_mean: float
    binary_variance: float
    T: int
    seed: int

    def to_dict(self):
        return {"severity": self.severity,
                "confidence_scores": [float(v) for v in self.confidence_scores],
                "uncertainty": [float(v) for v in self.uncertainty],
                "binary_mean": self.binary_mean,
                "binary_variance": self.binary_variance,
                "T": self.T, "seed": self.seed}


def init_classifier(seed: int = 0) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 404]))
    return {
        "cls.hidden_w": rng.normal(0.0, np.sqrt(2.0 / 64), size=(64, HIDDEN)),
        "cls.hidden_b": np.zeros(HIDDEN),
        "cls.bin_w": rng.normal(0.0, np.sqrt(1.0 / HIDDEN), size=(HIDDEN, 1)),
        "cls.bin_b": np.zeros(1),
        "cls.multi_w": rng.normal(0.0, np.sqrt(1.0 / HIDDEN), size=(HIDDEN, N_CLASSES)),
        "cls.multi_b": np.zeros(N_CLASSES),
    }


def head_nodes(p, fused, mask):
    """Graph fragment: fused (N,64), mask (N,32) -> (p_bin, probs, logits)."""
    h = ad.relu(ad.add(ad.matmul(fused, p["cls.hidden_w"]), p["cls.hidden_b"]))
    h = ad.mul(h, mask)
    logit_b = ad.add(ad.matmul(h, p["cls.bin_w"]), p["cls.bin_b"])
    p_bin = ad.sigmoid(logit_b)
    logits = ad.add(ad.matmul(h, p["cls.multi_w"]), p["cls.multi_b"])
    probs = ad.softmax(logits, axis=-1)
    return p_bin, probs, logits


def loss_nodes(p_bin, probs, y_bin, y_onehot):
    """BCE + CCE at equal weight; logs guarded."""
    bce_terms = ad.add(ad.mul(y_bin, ad.log(p_bin)),
                       ad.mul(ad.sub(ad.Tensor(np.array(1.0)), y_bin),
                              ad.log(ad.sub(ad.Tensor(np.array(1.0)), p_bin))))
    bce = ad.neg(ad.mean(bce_terms))
    cce = ad.neg(ad.mean(ad.sumt(ad.mul(y_onehot, ad.log(probs)), axis=-1)))
    return ad.add(bce, cce), bce, cce


def _head_graph(params):
    def build(p, i):
        p_bin, probs, _ = head_nodes(p, i["fused"], i["mask"])
        return {"p_bin": p_bin, "probs": probs}
    return ad.ComputeGraph(build, params)


def no_dropout_mask(n: int = 1) -> np.ndarray:
    return np.ones((n, HIDDEN))


def sample_mask(rng, p: float, n: int = 1) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability p, else 1/(1-p)."""
    if p <= 0.0:
        return np.ones((n, HIDDEN))
    keep = rng.random((n, HIDDEN)) >= p
    return keep / (1.0 - p)


def predict_binary(params, f_fused, dropout_mask=None) -> float:
    mask = no_dropout_mask() if dropout_mask is None else dropout_mask[None]
    out = ad.evaluate(_head_graph(params),
                      {"fused": f_fused[None], "mask": mask})
    return float(out["p_bin"][0, 0])


def predict_multiclass(params, f_fused, dropout_mask=None) -> np.ndarray:
    mask = no_dropout_mask() if dropout_mask is None else dropout_mask[None]
    out = ad.evaluate(_head_graph(params),
                      {"fused": f_fused[None], "mask": mask})
    return out["probs"][0]


def bce(y: float, p: float) -> float:
    p = min(max(p, LOG_EPS), 1.0 - LOG_EPS)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)))


def cce(onehot: np.ndarray, probs: np.ndarray) -> float:
    return float(-np.sum(onehot * np.log(np.maximum(probs, LOG_EPS))))


def mc_predict(params, f_fused, T: int, seed: int,
               p: float = DEFAULT_DROPOUT) -> McStats:
    if T < 1:
        raise ValueError("T must be >= 1")
    graph = _head_graph(params)
    bin_s = np.empty(T)
    cls_s = np.empty((T, N_CLASSES))
    for t in range(T):
        rng = np.random.default_rng(np.random.SeedSequence([seed, t]))
        mask = sample_mask(rng, p)
        out = ad.evaluate(graph, {"fused": f_fused[None], "mask": mask})
        bin_s[t] = out["p_bin"][0, 0]
        cls_s[t] = out["probs"][0]
    return McStats(binary_samples=bin_s, class_samples=cls_s, T=T, seed=seed)


def final_prediction(stats: McStats, tau: float = DEFAULT_TAU) -> Prediction:
    mu = stats.class_means
    if stats.binary_mean < tau:
        severity = 0
    else:
        severity = 1 + int(np.argmax(mu[1:]))  # first max wins ties
    return Prediction(severity=severity, confidence_scores=mu,
                      uncertainty=stats.class_variances,
                      binary_mean=stats.binary_mean,
                      binary_variance=stats.binary_variance,
                      T=stats.T, seed=stats.seed)
