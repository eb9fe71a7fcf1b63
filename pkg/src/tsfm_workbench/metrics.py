"""Classification scores: balanced accuracy, Cohen's kappa, weighted F1,
AUROC, and area under the precision-recall curve.

Conventions are pinned so every score is oracle-checkable: AUROC counts tied
score pairs as half wins (Mann-Whitney form); AUC-PR is the step-wise average
precision sum with no interpolation; empty denominators in recall/precision
contribute zero.  All outputs lie in [0, 1] except kappa, which lies in
[-1, 1].
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def _check_labels(y_true, y_pred=None):
    y_true = np.asarray(y_true, dtype=np.int64)
    if y_true.size == 0:
        raise DataError("need at least one sample")
    if y_pred is None:
        return y_true
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_pred.shape != y_true.shape:
        raise DataError(f"label arrays differ in shape: {y_true.shape} vs {y_pred.shape}")
    return y_true, y_pred


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean per-class recall over the classes present in ``y_true``."""
    y_true, y_pred = _check_labels(y_true, y_pred)
    recalls = []
    for cls in np.unique(y_true):
        in_class = y_true == cls
        recalls.append(np.mean(y_pred[in_class] == cls))
    return float(np.mean(recalls))


def cohens_kappa(y_true, y_pred) -> float:
    """Chance-corrected agreement; 0 when expected agreement is total."""
    y_true, y_pred = _check_labels(y_true, y_pred)
    p_obs = np.mean(y_true == y_pred)
    classes = np.union1d(y_true, y_pred)
    p_exp = sum(np.mean(y_true == c) * np.mean(y_pred == c) for c in classes)
    if p_exp == 1.0:
        return 0.0
    return float((p_obs - p_exp) / (1.0 - p_exp))


def weighted_f1(y_true, y_pred) -> float:
    """Support-weighted mean of per-class F1; empty classes score 0."""
    y_true, y_pred = _check_labels(y_true, y_pred)
    n = y_true.size
    total = 0.0
    for cls in np.unique(y_true):
        tp = np.sum((y_pred == cls) & (y_true == cls))
        n_pred = np.sum(y_pred == cls)
        n_true = np.sum(y_true == cls)
        precision = tp / n_pred if n_pred > 0 else 0.0
        recall = tp / n_true if n_true > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        total += (n_true / n) * f1
    return float(total)


def auroc(y_true, scores) -> float:
    """Probability a random positive outranks a random negative; ties count 0.5."""
    y_true = np.asarray(y_true, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    if set(np.unique(y_true)) - {0, 1}:
        raise DataError(f"auroc expects binary labels, got classes {np.unique(y_true)}")
    pos = scores[y_true == 1]
    neg = scores[y_true == 0]
    if pos.size == 0 or neg.size == 0:
        raise DataError("auroc needs at least one positive and one negative sample")
    # Rank-sum form: O(n log n) instead of explicit pair counting.
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = ranks[y_true == 1].sum()
    u = rank_sum - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def auc_pr(y_true, scores) -> float:
    """Average precision: sum of (recall step) * precision over descending thresholds."""
    y_true = np.asarray(y_true, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    if set(np.unique(y_true)) - {0, 1}:
        raise DataError(f"auc_pr expects binary labels, got classes {np.unique(y_true)}")
    n_pos = int(np.sum(y_true == 1))
    if n_pos == 0:
        raise DataError("auc_pr needs at least one positive sample")
    order = np.argsort(-scores, kind="stable")
    y_sorted = y_true[order]
    s_sorted = scores[order]
    area = 0.0
    prev_recall = 0.0
    tp = 0
    seen = 0
    i = 0
    while i < y_sorted.size:
        j = i
        while j + 1 < y_sorted.size and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        tp += int(np.sum(y_sorted[i:j + 1]))
        seen = j + 1
        recall = tp / n_pos
        precision = tp / seen
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(area)


def multiclass_ovr(metric, y_true, scores) -> float:
    """Unweighted one-vs-rest mean of a binary ranking metric.

    ``scores`` is (n, K); classes absent from ``y_true`` are excluded.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != y_true.size:
        raise DataError(f"expected (n, K) scores for {y_true.size} samples, got {scores.shape}")
    values = []
    for cls in np.unique(y_true):
        values.append(metric((y_true == cls).astype(np.int64), scores[:, cls]))
    return float(np.mean(values))


def compute_metrics(names, y_true, y_pred, scores) -> dict[str, float]:
    """Evaluate a list of named metrics against predictions and (n, K) scores."""
    out = {}
    scores = np.asarray(scores, dtype=np.float64)
    n_classes = scores.shape[1]
    for name in names:
        if name == "balanced_accuracy":
            out[name] = balanced_accuracy(y_true, y_pred)
        elif name == "cohens_kappa":
            out[name] = cohens_kappa(y_true, y_pred)
        elif name == "weighted_f1":
            out[name] = weighted_f1(y_true, y_pred)
        elif name == "auroc":
            if n_classes != 2:
                raise DataError("auroc is binary; use auroc_ovr for multiclass tasks")
            out[name] = auroc(y_true, scores[:, 1])
        elif name == "auc_pr":
            if n_classes != 2:
                raise DataError("auc_pr is binary; use auc_pr_ovr for multiclass tasks")
            out[name] = auc_pr(y_true, scores[:, 1])
        elif name == "auroc_ovr":
            out[name] = multiclass_ovr(auroc, y_true, scores)
        elif name == "auc_pr_ovr":
            out[name] = multiclass_ovr(auc_pr, y_true, scores)
        else:
            raise DataError(f"unknown metric {name!r}")
    return out


def default_metric_names(n_classes: int) -> tuple[str, ...]:
    if n_classes == 2:
        return ("balanced_accuracy", "cohens_kappa", "weighted_f1", "auroc", "auc_pr")
    return ("balanced_accuracy", "cohens_kappa", "weighted_f1")
