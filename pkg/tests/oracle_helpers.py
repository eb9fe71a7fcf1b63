"""Naive loop-based metric oracles, kept independent of the library's
vectorized implementations.  Shared by the metric unit tests and the
acceptance gate."""


def oracle_balanced_accuracy(y, yhat):
    recalls = []
    for c in sorted(set(y)):
        hits = sum(1 for t, p in zip(y, yhat) if t == c and p == c)
        recalls.append(hits / sum(1 for t in y if t == c))
    return sum(recalls) / len(recalls)


def oracle_kappa(y, yhat):
    n = len(y)
    classes = sorted(set(y) | set(yhat))
    p_obs = sum(1 for t, p in zip(y, yhat) if t == p) / n
    p_exp = 0.0
    for c in classes:
        p_exp += (sum(1 for t in y if t == c) / n) * (sum(1 for p in yhat if p == c) / n)
    if p_exp == 1.0:
        return 0.0
    return (p_obs - p_exp) / (1.0 - p_exp)


def oracle_weighted_f1(y, yhat):
    n = len(y)
    total = 0.0
    for c in sorted(set(y)):
        tp = sum(1 for t, p in zip(y, yhat) if t == c and p == c)
        n_pred = sum(1 for p in yhat if p == c)
        n_true = sum(1 for t in y if t == c)
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_true if n_true else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        total += (n_true / n) * f1
    return total


def oracle_auroc(y, s):
    wins = ties = 0
    n_pairs = 0
    for sp, yp in zip(s, y):
        if yp != 1:
            continue
        for sn, yn in zip(s, y):
            if yn != 0:
                continue
            n_pairs += 1
            if sp > sn:
                wins += 1
            elif sp == sn:
                ties += 1
    return (wins + 0.5 * ties) / n_pairs


def oracle_auc_pr(y, s):
    n_pos = sum(y)
    area = 0.0
    prev_recall = 0.0
    for threshold in sorted(set(s), reverse=True):
        tp = sum(1 for si, yi in zip(s, y) if si >= threshold and yi == 1)
        predicted = sum(1 for si in s if si >= threshold)
        recall = tp / n_pos
        precision = tp / predicted
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area
