"""Shared test data builders and brute-force oracles.

The oracles use plain Python loops over floats and never touch the tensor
engine, so they stay independent of the code they check.
"""

import math

import numpy as np

from racmc.encoders import RecordArrays
from racmc.model import ModelConfig


def random_records(rng, cfg: ModelConfig, batch: int, labels=None) -> RecordArrays:
    if labels is None:
        labels = np.array([1, 0] * (batch // 2) + [1] * (batch % 2))
    return RecordArrays(
        rng.standard_normal((batch, cfg.n1)),
        rng.standard_normal((batch, cfg.n_raw)),
        rng.standard_normal((batch, cfg.n2)),
        rng.standard_normal((batch, cfg.n_raw)),
        np.asarray(labels),
        [f"r{i}" for i in range(batch)],
    )


def matmul_loops(a, b):
    p, q = len(a), len(a[0])
    r = len(b[0])
    return [[sum(a[i][k] * b[k][j] for k in range(q)) for j in range(r)] for i in range(p)]


def dot(u, v):
    return sum(x * y for x, y in zip(u, v))


def cosine_loops(u, v, eps=1e-12):
    return dot(u, v) / (math.sqrt(dot(u, u)) * math.sqrt(dot(v, v)) + eps)


def gram_frobenius_loops(a, b):
    """sqrt(sum_ij (a b^T)_ij^2) with explicit loops."""
    total = 0.0
    for i in range(len(a)):
        for j in range(len(b)):
            total += dot(a[i], b[j]) ** 2
    return math.sqrt(total)


def mmd_loops(x, y, sigma):
    def k(a, b):
        return math.exp(-sum((ai - bi) ** 2 for ai, bi in zip(a, b)) / (2 * sigma ** 2))

    n, m = len(x), len(y)
    kxx = sum(k(a, b) for a in x for b in x) / n ** 2
    kxy = sum(k(a, b) for a in x for b in y) * 2 / (n * m)
    kyy = sum(k(a, b) for a in y for b in y) / m ** 2
    return kxx - kxy + kyy


def l_t_loops(t_pos, i_pos):
    bp = len(t_pos)
    if bp == 0:
        return 0.0
    matched = sum(cosine_loops(t_pos[i], i_pos[i]) for i in range(bp)) / bp
    mismatched = 0.0
    if bp > 1:
        mismatched = sum(cosine_loops(t_pos[i], i_pos[j])
                         for i in range(bp) for j in range(bp) if j != i) / (bp * (bp - 1))
    return -matched + mismatched


def l_f_loops(t_neg, i_neg):
    bn = len(t_neg)
    if bn == 0:
        return 0.0
    return sum(cosine_loops(t_neg[i], i_neg[j]) for i in range(bn) for j in range(bn)) / bn ** 2


def softmax_list(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def kl_loops(p_logits, q_logits):
    total = 0.0
    for pr, qr in zip(p_logits, q_logits):
        p, q = softmax_list(pr), softmax_list(qr)
        total += sum(pi * (math.log(max(pi, 1e-12)) - math.log(max(qi, 1e-12))) for pi, qi in zip(p, q))
    return total / len(p_logits)
