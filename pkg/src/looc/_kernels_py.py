"""Pure-Python (numpy) implementations of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_kernels`` extension. ``looc.kernels`` picks one at import time.
"""

import numpy as np


def softmax_rows(z, temperature):
    s = np.asarray(z, dtype=np.float64) / temperature
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(p, grad_p, temperature):
    inner = (grad_p * p).sum(axis=1, keepdims=True)
    return p * (grad_p - inner) / temperature


def entropy_rows(p, floor):
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p >= floor, p, 1.0)
    return -(np.where(p >= floor, p * np.log(safe), 0.0)).sum(axis=1)


def entropy_rows_backward(p, grad_h, floor):
    safe = np.where(p >= floor, p, 1.0)
    local = np.where(p >= floor, -(np.log(safe) + 1.0), 0.0)
    return local * grad_h[:, None]


def threshold_counts(sorted_scores, sorted_pos):
    """Cumulative (TP, FP) at each distinct threshold of a descending sweep.

    ``sorted_scores`` must be sorted in descending order and ``sorted_pos``
    aligned with it. Index 0 of the result is the +inf sentinel (0, 0); the
    last entry counts every sample as accepted.
    """
    n = sorted_scores.shape[0]
    pos = sorted_pos.astype(np.int64)
    tp = np.cumsum(pos)
    fp = np.cumsum(1 - pos)
    if n == 0:
        return np.zeros(1, np.int64), np.zeros(1, np.int64)
    # last index of each run of equal scores
    last = np.flatnonzero(np.r_[sorted_scores[1:] != sorted_scores[:-1], True])
    return np.r_[0, tp[last]], np.r_[0, fp[last]]
