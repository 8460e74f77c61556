"""Independent reference implementations used by the tests."""

import numpy as np

FD_STEP = 1e-5


def numerical_grad(f, x, h=FD_STEP):
    """Central finite differences of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def _thresholds(scores):
    return list(np.unique(scores)) + [np.inf]


def fpr95_brute(id_s, ood_s):
    best = np.inf
    for t in _thresholds(np.r_[id_s, ood_s]):
        tpr = np.sum(id_s >= t) / len(id_s)
        if tpr >= 0.95:
            best = min(best, 100.0 * np.sum(ood_s >= t) / len(ood_s))
    return best


def detection_error_brute(id_s, ood_s):
    errs = [
        100.0 * (0.5 * (1 - np.sum(id_s >= t) / len(id_s)) + 0.5 * np.sum(ood_s >= t) / len(ood_s))
        for t in _thresholds(np.r_[id_s, ood_s])
    ]
    return min(errs)


def auroc_pairwise(id_s, ood_s):
    a = np.asarray(id_s, float)[:, None]
    b = np.asarray(ood_s, float)[None, :]
    # every (id, ood) pair enumerated explicitly
    wins = np.sum(a > b) + 0.5 * np.sum(a == b)
    return 100.0 * wins / (a.size * b.size)


def aupr_brute(pos, neg):
    """Average precision over distinct thresholds, highest first."""
    ap, prev_recall = 0.0, 0.0
    for t in sorted(np.unique(np.r_[pos, neg]), reverse=True):
        tp = np.sum(pos >= t)
        fp = np.sum(neg >= t)
        recall = tp / len(pos)
        if tp + fp:
            ap += (recall - prev_recall) * tp / (tp + fp)
        prev_recall = recall
    return 100.0 * ap


def softmax_direct(z, t=1.0):
    e = np.exp(np.asarray(z, float) / t)
    return e / e.sum(axis=-1, keepdims=True)


def entropy_direct(p):
    p = np.asarray(p, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def random_scores(rng, n, ties=True):
    """Scores with frequent ties when ``ties`` is set."""
    if ties:
        return rng.integers(0, max(n // 3, 2), size=n).astype(float) / 7
    return rng.normal(size=n)
