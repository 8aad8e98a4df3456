"""Dominant feature fusion reasoning: consistency/inconsistency features, the
classifier, cross-entropy and the weighted total loss."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from racmc import tensor as T
from racmc.errors import DataError
from racmc.mrc import IAFF, FusedFeatures, ProjectionHead
from racmc.nn import Linear, Mode, Module
from racmc.tensor import Tensor

PROB_FLOOR = 1e-12


@dataclass
class ReasoningFeatures:
    M_hat: Tensor
    F1: Tensor
    F2: Tensor
    F3: Tensor
    F4: Tensor

    @property
    def fused(self) -> Tensor:
        return T.concat_cols(self.F1, self.F2, self.F3, self.F4)


class Reasoner(Module):
    def __init__(self, dim: int, rng: np.random.Generator, dropout: float = 0.4, ratio: int = 4):
        self.head = ProjectionHead(2 * dim, dim, rng, dropout)
        self.iaff = IAFF(dim, rng, ratio)

    def __call__(self, fused: FusedFeatures, mode: Mode, trace: dict | None = None) -> ReasoningFeatures:
        m = fused.M_prime
        m_hat = fused.T_prime + fused.I_prime
        return ReasoningFeatures(
            M_hat=m_hat,
            F1=T.abs_(m - m_hat),
            F2=m * m_hat,
            F3=self.head(m, m_hat, mode),
            F4=self.iaff(m, m_hat, mode, trace, "F4"),
        )


def reasoning_features(fused: FusedFeatures, params: Reasoner, mode: Mode) -> ReasoningFeatures:
    return params(fused, mode)


class Classifier(Module):
    """Two linear layers with a relu between; columns are (fake, real) probabilities."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(n_in, hidden, rng)
        self.fc2 = Linear(hidden, 2, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return T.softmax_rows(self.fc2(T.relu(self.fc1(x))))


def classify(feat: ReasoningFeatures, params: Classifier) -> Tensor:
    return params(feat.fused)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Batch mean of -log p[i, y_i], probabilities floored at 1e-12."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != probs.shape[0]:
        raise DataError(f"{labels.shape[0] if labels.ndim else 0} labels for {probs.shape[0]} rows")
    if not np.isin(labels, (0, 1)).all():
        raise DataError(f"labels must be 0 (fake) or 1 (real), got {np.unique(labels)}")
    onehot = np.zeros(probs.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = T.sum_(T.clamp_min(probs, PROB_FLOOR) * Tensor(onehot), axis=1)
    return -T.mean(T.log(picked))


def total_loss(l_ic, l_no, l_ni, l_ce, lam: float):
    """lam * l_ic + l_no + l_ni + l_ce, evaluated left to right."""
    return lam * l_ic + l_no + l_ni + l_ce


@dataclass
class LossReport:
    l_ic: float
    l_no: float
    l_ni: float
    l_ce: float
    total: float
    lam: float

    def recompute(self) -> float:
        return total_loss(self.l_ic, self.l_no, self.l_ni, self.l_ce, self.lam)

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}
