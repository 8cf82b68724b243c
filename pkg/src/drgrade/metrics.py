"""Evaluation metrics over 5-grade predictions.

Scalar metrics are macro averages of one-vs-rest counts with zero-denominator
classes contributing 0. MCC uses the multiclass correlation form; AUC is the
rank statistic with midranks for ties; AP averages precision at each
positive's rank (descending score, ties kept in sample order).
"""

import time

import numpy as np

N_GRADES = 5


def confusion(true_grades, predicted_grades) -> np.ndarray:
    t = np.asarray(true_grades, dtype=np.int64)
    p = np.asarray(predicted_grades, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError("length mismatch")
    if t.size and (t.min() < 0 or t.max() >= N_GRADES
                   or p.min() < 0 or p.max() >= N_GRADES):
        raise ValueError("grades must be in 0..4")
    cm = np.zeros((N_GRADES, N_GRADES), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def _safe_div(num, den):
    return num / den if den > 0 else 0.0


def scalar_metrics(cm: np.ndarray) -> dict:
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    acc = float(np.trace(cm)) / total
    sens = spec = prec = f1 = 0.0
    for c in range(N_GRADES):
        tp = float(cm[c, c])
        fn = float(cm[c].sum() - tp)
        fp = float(cm[:, c].sum() - tp)
        tn = float(total - tp - fn - fp)
        se = _safe_div(tp, tp + fn)
        pr = _safe_div(tp, tp + fp)
        sens += se
        spec += _safe_div(tn, tn + fp)
        prec += pr
        f1 += _safe_div(2 * pr * se, pr + se)
    k = N_GRADES
    # multiclass correlation coefficient over the full matrix
    t_k = cm.sum(axis=1).astype(np.float64)
    p_k = cm.sum(axis=0).astype(np.float64)
    c = float(np.trace(cm))
    s = float(total)
    cov = c * s - float(p_k @ t_k)
    den = np.sqrt((s * s - float(p_k @ p_k)) * (s * s - float(t_k @ t_k)))
    mcc = 0.0 if den == 0 else float(cov / den)
    return {"accuracy": acc, "sensitivity": sens / k, "specificity": spec / k,
            "precision": prec / k, "f1": f1 / k, "mcc": mcc}


def _midranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # 1-based midrank
        i = j + 1
    return ranks


def _binary_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    ranks = _midranks(scores)
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_ovr(true_grades, score_matrix) -> float:
    t = np.asarray(true_grades, dtype=np.int64)
    s = np.asarray(score_matrix, dtype=np.float64)
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    vals = []
    for c in range(N_GRADES):
        labels = t == c
        if labels.all() or not labels.any():
            continue  # degenerate class: no ranking defined
        vals.append(_binary_auc(labels, s[:, c]))
    if not vals:
        raise ValueError("no class with both positives and negatives")
    return float(np.mean(vals))


def _average_precision(labels: np.ndarray, scores: np.ndarray) -> float:
    order = np.argsort(-scores, kind="stable")
    hits = 0
    precisions = []
    for rank, idx in enumerate(order, start=1):
        if labels[idx]:
            hits += 1
            precisions.append(hits / rank)
    return float(np.mean(precisions))


def mean_average_precision(true_grades, score_matrix) -> float:
    t = np.asarray(true_grades, dtype=np.int64)
    s = np.asarray(score_matrix, dtype=np.float64)
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    vals = []
    for c in range(N_GRADES):
        labels = t == c
        if labels.all() or not labels.any():
            continue
        vals.append(_average_precision(labels, s[:, c]))
    if not vals:
        raise ValueError("no class with both positives and negatives")
    return float(np.mean(vals))


def time_inference(predict_fn, images, repeats: int = 1) -> float:
    """Mean wall-clock milliseconds of predict_fn per image."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    times = []
    for _ in range(repeats):
        for img in images:
            t0 = time.perf_counter()
            predict_fn(img)
            times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.mean(times))
