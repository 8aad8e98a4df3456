"""Interaction constraints: KL consistency and Frobenius exclusivity."""

from __future__ import annotations

from dataclasses import dataclass

from racmc import tensor as T
from racmc.encoders import EncodedBatch
from racmc.mrc import FusedFeatures, InteractionSet
from racmc.tensor import Tensor

LOG_FLOOR = 1e-12


@dataclass
class InteractionLossReport:
    l_c_T: Tensor
    l_c_I: Tensor
    l_c_M: Tensor
    l_e_T: Tensor
    l_e_I: Tensor
    l_e_M: Tensor
    l_ic: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: v.item() for k, v in vars(self).items()}


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Row-mean of KL(softmax(p) || softmax(q)) over the feature axis."""
    p = T.softmax_rows(p_logits)
    q = T.softmax_rows(q_logits)
    gap = T.log(T.clamp_min(p, LOG_FLOOR)) - T.log(T.clamp_min(q, LOG_FLOOR))
    return T.mean(T.sum_(p * gap, axis=1))


def consistency_loss(inter: InteractionSet, fused: FusedFeatures) -> tuple[Tensor, Tensor, Tensor]:
    m, t, i = fused.M_prime, fused.T_prime, fused.I_prime
    l_t = kl_divergence(m, inter.T_fc) + kl_divergence(m, inter.T_cf)
    l_i = kl_divergence(m, inter.I_fc) + kl_divergence(m, inter.I_cf)
    l_m = (kl_divergence(t, inter.M_f1) + kl_divergence(t, inter.M_c1)
           + kl_divergence(i, inter.M_f2) + kl_divergence(i, inter.M_c2))
    return l_t, l_i, l_m


def gram_norm(a: Tensor, b: Tensor) -> Tensor:
    """||a b^T||_F."""
    return T.frobenius(T.matmul(a, T.transpose(b)))


def _scaled_sum(pairs, batch_size: int) -> Tensor:
    total = gram_norm(*pairs[0])
    for a, b in pairs[1:]:
        total = total + gram_norm(a, b)
    return total * (1.0 / batch_size ** 2)


def exclusivity_loss(batch: EncodedBatch, inter: InteractionSet) -> tuple[Tensor, Tensor, Tensor]:
    b = batch.size
    tf, tc, imf, ic = batch.T_f_proj, batch.T_c, batch.I_f_proj, batch.I_c
    l_t = _scaled_sum([(tf, inter.T_fc), (tc, inter.T_fc), (tc, inter.T_cf), (tf, inter.T_cf)], b)
    l_i = _scaled_sum([(imf, inter.I_fc), (ic, inter.I_fc), (ic, inter.I_cf), (imf, inter.I_cf)], b)
    # each multimodal interaction against both same-granularity sources
    l_m = _scaled_sum([
        (tf, inter.M_f1), (imf, inter.M_f1),
        (tf, inter.M_f2), (imf, inter.M_f2),
        (tc, inter.M_c1), (ic, inter.M_c1),
        (tc, inter.M_c2), (ic, inter.M_c2),
    ], b)
    return l_t, l_i, l_m


def interaction_loss(batch: EncodedBatch, inter: InteractionSet, fused: FusedFeatures) -> InteractionLossReport:
    c_t, c_i, c_m = consistency_loss(inter, fused)
    e_t, e_i, e_m = exclusivity_loss(batch, inter)
    total = c_t + c_i + c_m + e_t + e_i + e_m
    return InteractionLossReport(c_t, c_i, c_m, e_t, e_i, e_m, total)
