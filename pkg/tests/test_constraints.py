import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import gram_frobenius_loops, kl_loops
from racmc import tensor as T
from racmc.constraints import (
    consistency_loss,
    exclusivity_loss,
    gram_norm,
    interaction_loss,
    kl_divergence,
)
from racmc.encoders import EncodedBatch
from racmc.mrc import FusedFeatures, InteractionSet
from racmc.tensor import Tensor, grad_check

NAMES = ("T_fc", "T_cf", "I_fc", "I_cf", "M_f1", "M_f2", "M_c1", "M_c2")


def random_parts(rng, b=4, n=6, scale=1.0):
    def r():
        return Tensor(scale * rng.standard_normal((b, n)))

    batch = EncodedBatch(T_f=r(), I_f=r(), T_f_proj=r(), T_c=r(), I_f_proj=r(), I_c=r(),
                         labels=np.arange(b) % 2)
    inter = InteractionSet(**{k: r() for k in NAMES})
    fused = FusedFeatures(T_prime=r(), I_prime=r(), M_prime=r())
    return batch, inter, fused


# ---------------------------------------------------------------- KL


def test_kl_identical_is_zero(rng):
    x = Tensor(rng.standard_normal((5, 7)))
    assert abs(kl_divergence(x, x).item()) < 1e-12


def test_kl_worked_example():
    p = Tensor([[math.log(0.5), math.log(0.5)]])
    q = Tensor([[math.log(0.25), math.log(0.75)]])
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert kl_divergence(p, q).item() == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.14384, abs=1e-5)


def test_kl_one_hot_against_uniform():
    assert kl_divergence(Tensor([[1000.0, 0.0]]), Tensor([[0.0, 0.0]])).item() == pytest.approx(math.log(2))


def test_kl_row_shift_invariant(rng):
    x = rng.standard_normal((4, 5))
    shifted = x + rng.standard_normal((4, 1)) * 10
    assert abs(kl_divergence(Tensor(x), Tensor(shifted)).item()) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kl_matches_loops_and_is_positive(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    got = kl_divergence(Tensor(p), Tensor(q)).item()
    assert got == pytest.approx(kl_loops(p.tolist(), q.tolist()), rel=1e-10)
    assert got > 1e-9


def test_kl_gradients_flow_to_both_arguments(rng):
    xs = [Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4)))]
    assert grad_check(lambda t: kl_divergence(t[0], t[1]), xs) < 1e-7


# ---------------------------------------------------------------- consistency


def test_consistency_all_identical_is_zero(rng):
    x = Tensor(rng.standard_normal((4, 6)))
    inter = InteractionSet(**{k: x for k in NAMES})
    fused = FusedFeatures(x, x, x)
    assert [v.item() for v in consistency_loss(inter, fused)] == [0.0, 0.0, 0.0]


def test_consistency_term_by_term(rng):
    _, inter, fused = random_parts(rng)
    inter.M_f1 = fused.T_prime
    inter.M_c1 = fused.T_prime
    _, _, l_m = consistency_loss(inter, fused)
    image_side = kl_divergence(fused.I_prime, inter.M_f2) + kl_divergence(fused.I_prime, inter.M_c2)
    assert l_m.item() == pytest.approx(image_side.item(), rel=1e-14)


def test_consistency_text_and_image_terms(rng):
    _, inter, fused = random_parts(rng)
    l_t, l_i, _ = consistency_loss(inter, fused)
    m = fused.M_prime.data.tolist()
    assert l_t.item() == pytest.approx(kl_loops(m, inter.T_fc.data.tolist())
                                       + kl_loops(m, inter.T_cf.data.tolist()), rel=1e-10)
    assert l_i.item() == pytest.approx(kl_loops(m, inter.I_fc.data.tolist())
                                       + kl_loops(m, inter.I_cf.data.tolist()), rel=1e-10)


def test_consistency_nonnegative_100_sets():
    for seed in range(100):
        _, inter, fused = random_parts(np.random.default_rng(seed), scale=3.0)
        assert all(v.item() >= 0 for v in consistency_loss(inter, fused))


# ---------------------------------------------------------------- exclusivity


def test_rank_one_frobenius():
    # u, v as single-feature columns: A B^T = u v^T and its norm is |u| |v|
    u, v = Tensor([[1.0], [0.0]]), Tensor([[0.0], [2.0]])
    assert gram_norm(u, v).item() == pytest.approx(2.0, rel=1e-15)


def test_rank_one_exclusivity_term():
    z = Tensor(np.zeros((2, 1)))
    u, v = Tensor([[1.0], [0.0]]), Tensor([[0.0], [2.0]])
    batch = EncodedBatch(T_f=z, I_f=z, T_f_proj=u, T_c=z, I_f_proj=z, I_c=z, labels=np.array([1, 0]))
    inter = InteractionSet(**{k: z for k in NAMES})
    inter.T_fc = v
    l_t, l_i, l_m = exclusivity_loss(batch, inter)
    assert l_t.item() == pytest.approx(2.0 / 4, rel=1e-15)
    assert l_i.item() == 0.0 and l_m.item() == 0.0


def test_single_orthogonal_rows_give_zero():
    assert gram_norm(Tensor([[1.0, 0.0]]), Tensor([[0.0, 2.0]])).item() == 0.0


def test_zero_interaction_contributes_nothing(rng):
    batch, inter, _ = random_parts(rng)
    for k in NAMES:
        setattr(inter, k, Tensor(np.zeros((4, 6))))
    assert [v.item() for v in exclusivity_loss(batch, inter)] == [0.0, 0.0, 0.0]


def test_row_orthogonal_blocks_give_zero():
    a = Tensor(np.hstack([np.eye(2), np.zeros((2, 2))]))
    b = Tensor(np.hstack([np.zeros((2, 2)), np.eye(2)]))
    assert gram_norm(a, b).item() == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_frobenius_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    got = gram_norm(Tensor(a), Tensor(b)).item()
    assert got == pytest.approx(gram_frobenius_loops(a.tolist(), b.tolist()), rel=1e-10)


def test_exclusivity_text_terms_scaled(rng):
    batch, inter, _ = random_parts(rng)
    l_t, _, _ = exclusivity_loss(batch, inter)
    tf, tc = batch.T_f_proj.data.tolist(), batch.T_c.data.tolist()
    fc, cf = inter.T_fc.data.tolist(), inter.T_cf.data.tolist()
    expected = (gram_frobenius_loops(tf, fc) + gram_frobenius_loops(tc, fc)
                + gram_frobenius_loops(tc, cf) + gram_frobenius_loops(tf, cf)) / 16
    assert l_t.item() == pytest.approx(expected, rel=1e-10)


# ---------------------------------------------------------------- l_ic


def test_equal_features_leave_exclusivity_only(rng):
    batch, _, _ = random_parts(rng)
    x = Tensor(rng.standard_normal((4, 6)))
    inter = InteractionSet(**{k: x for k in NAMES})
    rep = interaction_loss(batch, inter, FusedFeatures(x, x, x))
    assert rep.l_c_T.item() == rep.l_c_I.item() == rep.l_c_M.item() == 0.0
    assert rep.l_ic.item() == pytest.approx(rep.l_e_T.item() + rep.l_e_I.item() + rep.l_e_M.item(),
                                            rel=1e-15)


def test_zero_features_give_zero_loss():
    z = Tensor(np.zeros((3, 4)))
    batch = EncodedBatch(z, z, z, z, z, z, labels=np.array([0, 1, 0]))
    rep = interaction_loss(batch, InteractionSet(**{k: z for k in NAMES}), FusedFeatures(z, z, z))
    assert rep.l_ic.item() == 0.0


def test_report_sum_bitwise(rng):
    batch, inter, fused = random_parts(rng)
    rep = interaction_loss(batch, inter, fused)
    f = rep.as_floats()
    total = f["l_c_T"] + f["l_c_I"] + f["l_c_M"] + f["l_e_T"] + f["l_e_I"] + f["l_e_M"]
    assert total == f["l_ic"]
    assert all(v >= 0 for v in f.values())


def test_interaction_loss_gradients(rng):
    batch, inter, fused = random_parts(rng, b=3, n=4)
    leaves = [batch.T_f_proj, batch.T_c, inter.T_fc, inter.M_c2, fused.M_prime, fused.T_prime]
    assert grad_check(lambda _: interaction_loss(batch, inter, fused).l_ic, leaves) < 1e-4
