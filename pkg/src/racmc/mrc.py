"""Multiscale residual-aware compensation: masked cross-granularity attention,
projection heads and iterative attentional feature fusion.

Inputs are [B, N] with no token axis, so every sample acts as one token and the
score matrices are B x B: attention mixes information across the samples of a
batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from racmc import tensor as T
from racmc.encoders import EncodedBatch
from racmc.errors import ConfigError, DimensionError
from racmc.nn import BatchNorm, Linear, Mode, Module, uniform_init
from racmc.tensor import Tensor


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n = x.shape
    return T.permute(T.reshape(x, (b, heads, n // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    h, b, d = x.shape
    return T.reshape(T.permute(x, (1, 0, 2)), (b, h * d))


class ThresholdNet(Module):
    """Per-pair, per-head mask thresholds from concatenated (query row, key row).

    The first layer acting on ``concat(q_i, k_j)`` is split into a query half
    and a key half, so the B x B x 2N concatenation is never materialised.
    """

    def __init__(self, dim: int, hidden: int, heads: int, rng: np.random.Generator):
        self.query = Linear(dim, hidden, rng)
        self.key = Linear(dim, hidden, rng, bias=False)
        self.out = Linear(hidden, heads, rng)
        # both halves see fan-in 2*dim
        bound = 1.0 / np.sqrt(2 * dim)
        self.query.weight.data = rng.uniform(-bound, bound, (dim, hidden))
        self.key.weight.data = rng.uniform(-bound, bound, (dim, hidden))
        self.query.bias.data = rng.uniform(-bound, bound, hidden)

    def __call__(self, q: Tensor, k: Tensor) -> Tensor:
        hidden = T.relu(T.pairwise_add(self.query(q), self.key(k)))
        return T.permute(self.out(hidden), (2, 0, 1))  # heads x Bq x Bk


class MaskedAttention(Module):
    def __init__(self, dim: int, heads: int, threshold: ThresholdNet, rng: np.random.Generator,
                 tau: float = 0.1, attn_dropout: float = 0.1):
        if dim % heads:
            raise ConfigError(f"width {dim} is not divisible by {heads} heads")
        if tau <= 0:
            raise ConfigError(f"mask temperature must be positive, got {tau}")
        self.w_q = uniform_init(rng, dim, (dim, dim))
        self.w_k = uniform_init(rng, dim, (dim, dim))
        self.w_v = uniform_init(rng, dim, (dim, dim))
        self.w_o = uniform_init(rng, dim, (dim, dim))
        self.threshold = threshold
        self.heads = heads
        self.tau = tau
        self.attn_dropout = attn_dropout

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor, mode: Mode,
                 trace: dict | None = None, name: str = "attn") -> Tensor:
        if not (q_in.shape == k_in.shape == v_in.shape) or len(q_in.shape) != 2:
            raise DimensionError(f"attention inputs {q_in.shape}, {k_in.shape}, {v_in.shape}")
        d = q_in.shape[1] // self.heads
        q = split_heads(q_in @ self.w_q, self.heads)
        k = split_heads(k_in @ self.w_k, self.heads)
        v = split_heads(v_in @ self.w_v, self.heads)
        scores = T.matmul(q, T.transpose(k)) * (1.0 / np.sqrt(d))
        sim = T.softmax_rows(scores)
        theta = self.threshold(q_in, k_in)
        if mode.soft_mask:
            omega = T.sigmoid((sim - theta) * (1.0 / self.tau))
        else:
            omega = Tensor(sim.data >= theta.data)
        # the mask scales the raw scaled scores; masked entries become 0, not -inf
        attn = T.softmax_rows(omega * scores)
        attn = T.dropout(attn, self.attn_dropout, mode.dropout, mode.rng)
        if trace is not None:
            trace[f"omega/{name}"] = omega.data.copy()
        return merge_heads(T.matmul(attn, v)) @ self.w_o


@dataclass
class InteractionSet:
    T_fc: Tensor
    T_cf: Tensor
    I_fc: Tensor
    I_cf: Tensor
    M_f1: Tensor
    M_f2: Tensor
    M_c1: Tensor
    M_c2: Tensor


class Interactions(Module):
    """Eight residual attention interactions.

    Each direction has its own W_q/W_k/W_v/W_o; the two directions of a pair
    share one threshold network.
    """

    NAMES = ("T_fc", "T_cf", "I_fc", "I_cf", "M_f1", "M_f2", "M_c1", "M_c2")

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, tau: float = 0.1,
                 attn_dropout: float = 0.1, threshold_hidden: int | None = None):
        hidden = threshold_hidden or dim
        pairs = [ThresholdNet(dim, hidden, heads, rng) for _ in range(4)]
        self.thresholds = pairs
        self.blocks = [MaskedAttention(dim, heads, pairs[i // 2], rng, tau, attn_dropout)
                       for i in range(8)]

    def __call__(self, batch: EncodedBatch, mode: Mode, trace: dict | None = None) -> InteractionSet:
        tf, tc, imf, ic = batch.T_f_proj, batch.T_c, batch.I_f_proj, batch.I_c
        routes = [(tf, tc), (tc, tf), (imf, ic), (ic, imf), (tf, imf), (imf, tf), (tc, ic), (ic, tc)]
        out = {}
        for name, block, (q, kv) in zip(self.NAMES, self.blocks, routes):
            out[name] = q + block(q, kv, kv, mode, trace, name)
        return InteractionSet(**out)


class ProjectionHead(Module):
    """concat -> linear -> batch norm -> relu -> dropout -> linear."""

    def __init__(self, n_in: int, dim: int, rng: np.random.Generator, dropout: float = 0.4):
        self.fc1 = Linear(n_in, dim, rng)
        self.bn = BatchNorm(dim)
        self.fc2 = Linear(dim, dim, rng)
        self.dropout = dropout

    def __call__(self, a: Tensor, b: Tensor, mode: Mode) -> Tensor:
        if a.shape[0] != b.shape[0]:
            raise DimensionError(f"projection head inputs {a.shape} and {b.shape} differ in rows")
        h = T.relu(self.bn(self.fc1(T.concat_cols(a, b)), mode))
        h = T.dropout(h, self.dropout, mode.dropout, mode.rng)
        return self.fc2(h)


class ChannelAttention(Module):
    """Transform, normalise, activate, transform, normalise.

    The global variant first mean-pools each row to one value.  The last
    normalisation starts with zero scale, so a fresh branch outputs 0.
    """

    def __init__(self, dim: int, ratio: int, rng: np.random.Generator, pooled: bool):
        inner = max(1, dim // ratio)
        self.pooled = pooled
        self.fc1 = Linear(1 if pooled else dim, inner, rng)
        self.bn1 = BatchNorm(inner)
        self.fc2 = Linear(inner, dim, rng)
        self.bn2 = BatchNorm(dim)
        self.bn2.scale.data[:] = 0.0

    def __call__(self, z: Tensor, mode: Mode) -> Tensor:
        if self.pooled:
            z = T.mean(z, axis=1, keepdims=True)
        h = T.relu(self.bn1(self.fc1(z), mode))
        return self.bn2(self.fc2(h), mode)


class Gate(Module):
    def __init__(self, dim: int, ratio: int, rng: np.random.Generator):
        self.glob = ChannelAttention(dim, ratio, rng, pooled=True)
        self.local = ChannelAttention(dim, ratio, rng, pooled=False)

    def __call__(self, z: Tensor, mode: Mode) -> Tensor:
        return T.sigmoid(self.glob(z, mode) + self.local(z, mode))


class IAFF(Module):
    """Two-stage gated convex combination of two equally shaped features."""

    def __init__(self, dim: int, rng: np.random.Generator, ratio: int = 4):
        self.first = Gate(dim, ratio, rng)
        self.second = Gate(dim, ratio, rng)

    def __call__(self, x: Tensor, y: Tensor, mode: Mode, trace: dict | None = None,
                 name: str = "iaff") -> Tensor:
        if x.shape != y.shape:
            raise DimensionError(f"iAFF inputs {x.shape} and {y.shape} differ")
        k = self.first(x + y, mode)
        k2 = self.second(x * k + y * (1.0 - k), mode)
        if trace is not None:
            trace[f"gate/{name}"] = k2.data.copy()
        # x * k2 + y * (1 - k2), anchored at the nearer endpoint: each branch moves
        # at most half of (x - y), so rounding can never leave [min, max], and the
        # result is exactly x when x == y
        d = x - y
        near_x = Tensor(k2.data >= 0.5)
        return (x - d * (1.0 - k2)) * near_x + (y + d * k2) * (1.0 - near_x)


@dataclass
class FusedFeatures:
    T_prime: Tensor
    I_prime: Tensor
    M_prime: Tensor
    T_o: Tensor | None = None
    I_o: Tensor | None = None
    M_o1: Tensor | None = None
    M_o2: Tensor | None = None
    M_f: Tensor | None = None
    M_c: Tensor | None = None


class Fusion(Module):
    """Projection heads and iAFF stages turning interactions into T', I', M'."""

    def __init__(self, n1: int, n2: int, dim: int, rng: np.random.Generator, dropout: float = 0.4,
                 ratio: int = 4):
        self.head_t_o = ProjectionHead(n1 + dim, dim, rng, dropout)
        self.head_t = ProjectionHead(2 * dim, dim, rng, dropout)
        self.iaff_t = IAFF(dim, rng, ratio)
        self.head_i_o = ProjectionHead(n2 + dim, dim, rng, dropout)
        self.head_i = ProjectionHead(2 * dim, dim, rng, dropout)
        self.iaff_i = IAFF(dim, rng, ratio)
        self.head_m_o1 = ProjectionHead(n1 + n2, dim, rng, dropout)
        self.head_m1 = ProjectionHead(2 * dim, dim, rng, dropout)
        self.iaff_mf = IAFF(dim, rng, ratio)
        self.head_m_o2 = ProjectionHead(2 * dim, dim, rng, dropout)
        self.head_m2 = ProjectionHead(2 * dim, dim, rng, dropout)
        self.iaff_mc = IAFF(dim, rng, ratio)
        # concat(M^f, M^c) is 2N wide; this head restores width N
        self.head_m = ProjectionHead(2 * dim, dim, rng, dropout)

    def originals(self, batch: EncodedBatch, mode: Mode):
        t_o = self.head_t_o(batch.T_f, batch.T_c, mode)
        i_o = self.head_i_o(batch.I_f, batch.I_c, mode)
        m_o1 = self.head_m_o1(batch.T_f, batch.I_f, mode)
        m_o2 = self.head_m_o2(batch.T_c, batch.I_c, mode)
        return t_o, i_o, m_o1, m_o2

    def __call__(self, batch: EncodedBatch, inter: InteractionSet, mode: Mode,
                 trace: dict | None = None) -> FusedFeatures:
        t_o, i_o, m_o1, m_o2 = self.originals(batch, mode)
        t_prime = self.iaff_t(t_o, self.head_t(inter.T_fc, inter.T_cf, mode), mode, trace, "T")
        i_prime = self.iaff_i(i_o, self.head_i(inter.I_fc, inter.I_cf, mode), mode, trace, "I")
        m_f = self.iaff_mf(m_o1, self.head_m1(inter.M_f1, inter.M_f2, mode), mode, trace, "M_f")
        m_c = self.iaff_mc(m_o2, self.head_m2(inter.M_c1, inter.M_c2, mode), mode, trace, "M_c")
        m_prime = self.head_m(m_f, m_c, mode)
        return FusedFeatures(t_prime, i_prime, m_prime, t_o, i_o, m_o1, m_o2, m_f, m_c)

    def without_interaction(self, batch: EncodedBatch, mode: Mode) -> FusedFeatures:
        """Ablated path: granularity concatenations only, no attention, no iAFF."""
        t_o, i_o, m_o1, m_o2 = self.originals(batch, mode)
        m_prime = self.head_m(m_o1, m_o2, mode)
        return FusedFeatures(t_o, i_o, m_prime, t_o, i_o, m_o1, m_o2)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, params: MaskedAttention, mode: Mode) -> Tensor:
    return params(q, k, v, mode)


def iaff_fuse(x: Tensor, y: Tensor, params: IAFF, mode: Mode) -> Tensor:
    return params(x, y, mode)


def projection_head(a: Tensor, b: Tensor, params: ProjectionHead, mode: Mode) -> Tensor:
    return params(a, b, mode)


def interact_granularities(batch: EncodedBatch, params: Interactions, mode: Mode) -> InteractionSet:
    return params(batch, mode)


def mrc_forward(batch: EncodedBatch, interactions: Interactions, fusion: Fusion, mode: Mode,
                trace: dict | None = None) -> tuple[InteractionSet, FusedFeatures]:
    inter = interactions(batch, mode, trace)
    return inter, fusion(batch, inter, mode, trace)
