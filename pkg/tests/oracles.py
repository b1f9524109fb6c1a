"""Independent reference implementations used as test oracles.

Plain Python/numpy loops with no calls into the package under test.
"""

import math

import numpy as np


def brute_nn_sq(a, b):
    out = []
    b = np.asarray(b, dtype=float).tolist()
    for p in np.asarray(a, dtype=float).tolist():
        best = math.inf
        for q in b:
            d = (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2
            best = min(best, d)
        out.append(best)
    return np.array(out)


def brute_chamfer(pred, gt):
    return brute_nn_sq(pred, gt).mean() + brute_nn_sq(gt, pred).mean()


def brute_fscore(pred, gt, tau):
    p = float(np.mean(np.sqrt(brute_nn_sq(pred, gt)) <= tau))
    r = float(np.mean(np.sqrt(brute_nn_sq(gt, pred)) <= tau))
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def dense_cross_attention(q, kv, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Multi-head attention for one sample; q (Tq, C), kv (Tk, C), torch Linear weight layout."""
    Q = q @ wq.T + bq
    K = kv @ wk.T + bk
    V = kv @ wv.T + bv
    c = q.shape[1]
    d = c // heads
    out = np.zeros_like(Q)
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(Q.shape[0]):
            scores = np.array([Q[i, sl] @ K[j, sl] / math.sqrt(d) for j in range(K.shape[0])])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            out[i, sl] = sum(w[j] * V[j, sl] for j in range(K.shape[0]))
    return out @ wo.T + bo


def central_difference(f, x, h):
    return (f(x + h) - f(x - h)) / (2 * h)


def brute_metrics(pred, gt, taus):
    """Chamfer and F-Scores at each tau from a single pair of brute-force scans."""
    fwd, bwd = brute_nn_sq(pred, gt), brute_nn_sq(gt, pred)
    scores = []
    for tau in taus:
        p = float(np.mean(np.sqrt(fwd) <= tau))
        r = float(np.mean(np.sqrt(bwd) <= tau))
        scores.append(0.0 if p + r == 0 else 2 * p * r / (p + r))
    return fwd.mean() + bwd.mean(), scores
