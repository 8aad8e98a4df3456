"""Multi-granularity constraints.

``news_overall_loss`` pushes the real and fake groups of M' apart with a
Gaussian-kernel MMD; ``news_internal_loss`` pulls matched real text/image pairs
together and pushes mismatched real pairs and all fake pairs apart.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from racmc import tensor as T
from racmc.encoders import FAKE, REAL
from racmc.tensor import Tensor

log = logging.getLogger(__name__)

COS_EPS = 1e-12


@dataclass
class LabelSplit:
    pos: np.ndarray  # real rows
    neg: np.ndarray  # fake rows

    @classmethod
    def from_labels(cls, labels) -> "LabelSplit":
        labels = np.asarray(labels)
        return cls(np.flatnonzero(labels == REAL), np.flatnonzero(labels == FAKE))

    @property
    def n_pos(self) -> int:
        return len(self.pos)

    @property
    def n_neg(self) -> int:
        return len(self.neg)


class MMDResult(NamedTuple):
    value: Tensor
    bandwidth: float
    degenerate: bool


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median of pooled pairwise distances (distinct pairs); 1.0 if that is 0."""
    z = np.concatenate([x, y])
    if len(z) < 2:
        return 1.0
    diff = z[:, None, :] - z[None, :, :]
    d = np.sqrt((diff * diff).sum(-1))[np.triu_indices(len(z), 1)]
    med = float(np.median(d))
    return med if med > 0 else 1.0


def gaussian_kernel(x: Tensor, y: Tensor, bandwidth: float) -> Tensor:
    return T.exp(T.pairwise_sqdist(x, y) * (-1.0 / (2.0 * bandwidth ** 2)))


def mmd_squared(x: Tensor, y: Tensor, bandwidth: float | None = None) -> MMDResult:
    """Biased (self-pairs included) squared MMD with a Gaussian kernel.

    The median-heuristic bandwidth is computed from the data but treated as a
    constant by backward.
    """
    n, m = x.shape[0], y.shape[0]
    if n == 0 or m == 0:
        return MMDResult(Tensor(0.0), float("nan"), True)
    if bandwidth is None:
        bandwidth = median_bandwidth(x.data, y.data)
    kxx = T.sum_(gaussian_kernel(x, x, bandwidth)) * (1.0 / n ** 2)
    kxy = T.sum_(gaussian_kernel(x, y, bandwidth)) * (2.0 / (n * m))
    kyy = T.sum_(gaussian_kernel(y, y, bandwidth)) * (1.0 / m ** 2)
    return MMDResult(kxx - kxy + kyy, bandwidth, False)


def news_overall_loss(m_prime: Tensor, split: LabelSplit, bandwidth: float | None = None) -> MMDResult:
    if split.n_pos == 0 or split.n_neg == 0:
        return MMDResult(Tensor(0.0), float("nan"), True)
    res = mmd_squared(T.take_rows(m_prime, split.pos), T.take_rows(m_prime, split.neg), bandwidth)
    return MMDResult(-res.value, res.bandwidth, False)


def cosine_matrix(x: Tensor, y: Tensor) -> Tensor:
    """cos[i, j] = <x_i, y_j> / (||x_i|| ||y_j|| + eps)."""
    nx, ny = T.norm_rows(x), T.norm_rows(y)
    if (nx.data == 0).any() or (ny.data == 0).any():
        log.debug("zero vector in cosine similarity; result stabilised to 0")
    denom = T.matmul(T.reshape(nx, (-1, 1)), T.reshape(ny, (1, -1))) + COS_EPS
    return T.matmul(x, T.transpose(y)) / denom


def cosine_sim(x: Tensor, y: Tensor) -> Tensor:
    return T.reshape(cosine_matrix(T.reshape(x, (1, -1)), T.reshape(y, (1, -1))), ())


def news_internal_loss(t_prime: Tensor, i_prime: Tensor, split: LabelSplit) -> tuple[Tensor, Tensor, Tensor]:
    """(l_t, l_f, l_ni); empty sums contribute 0."""
    l_t = Tensor(0.0)
    bp = split.n_pos
    if bp >= 1:
        cos = cosine_matrix(T.take_rows(t_prime, split.pos), T.take_rows(i_prime, split.pos))
        eye = np.eye(bp)
        matched = T.sum_(cos * Tensor(eye))
        l_t = -matched * (1.0 / bp)
        if bp >= 2:
            mismatched = T.sum_(cos * Tensor(1.0 - eye))
            l_t = l_t + mismatched * (1.0 / (bp * (bp - 1)))
    l_f = Tensor(0.0)
    bn = split.n_neg
    if bn >= 1:
        cos = cosine_matrix(T.take_rows(t_prime, split.neg), T.take_rows(i_prime, split.neg))
        l_f = T.sum_(cos) * (1.0 / bn ** 2)
    return l_t, l_f, l_t + l_f
