"""Central-difference verification of the full loss and its building blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from racmc import tensor as T
from racmc.constraints import kl_divergence
from racmc.encoders import RecordArrays
from racmc.mgc import LabelSplit, mmd_squared, news_internal_loss
from racmc.model import Ablation, ModelConfig, RaCMC
from racmc.mrc import IAFF, Interactions, ProjectionHead
from racmc.nn import Mode, Module
from racmc.tensor import Tape, Tensor, backward

TERMS = ("L", "l_ic", "l_no", "l_ni", "l_ce")


@dataclass
class CheckEntry:
    name: str
    error: float


def toy_batch(rng: np.random.Generator, batch: int = 4, n1: int = 8, n2: int = 8, n_raw: int = 8,
              requires_grad: bool = True) -> RecordArrays:
    def block(n):
        return Tensor(rng.standard_normal((batch, n)), requires_grad=requires_grad)

    labels = np.array([1, 0] * (batch // 2) + [1] * (batch % 2))
    return RecordArrays(block(n1), block(n_raw), block(n2), block(n_raw), labels,
                        [f"toy-{i}" for i in range(batch)])


def jitter(module: Module, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Move every parameter and running statistic off its structured init value."""
    for _, p in module.named_parameters():
        p.data = p.data + scale * rng.standard_normal(p.data.shape)
    for name, b in module.named_buffers():
        if name.endswith("running_var"):
            b[...] = rng.uniform(0.5, 1.5, b.shape)
        else:
            b[...] = 0.3 * rng.standard_normal(b.shape)


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic))


def check_model_terms(model: RaCMC, records: RecordArrays, lam: float = 0.1, h: float = 1e-5,
                      params_per_tensor: int = 2, rng: np.random.Generator | None = None,
                      terms=TERMS) -> dict[str, float]:
    """Max relative error per loss term over all inputs and sampled parameter entries.

    The MMD bandwidth is frozen at its value at the unperturbed point, matching
    the constant-bandwidth treatment in backward.
    """
    rng = rng or np.random.default_rng(0)
    mode = Mode.check()
    inputs = [t for t in (records.text_fine, records.text_coarse, records.image_fine,
                          records.image_coarse) if isinstance(t, Tensor)]
    params = model.parameters()
    targets = inputs + params
    bandwidth = model(records, mode, lam).bandwidth
    bw = None if np.isnan(bandwidth) else bandwidth

    def values(out) -> dict[str, float]:
        return {"L": out.loss.item(), **{k: out.terms[k].item() for k in terms if k != "L"}}

    with Tape() as tape:
        out = model(records, mode, lam, bandwidth=bw)
    analytic = {}
    for term in terms:
        for t in targets:
            t.grad = np.zeros_like(t.data)
        loss = out.loss if term == "L" else out.terms[term]
        backward(loss, tape)
        analytic[term] = [t.grad.reshape(-1).copy() for t in targets]

    worst = dict.fromkeys(terms, 0.0)
    for ti, t in enumerate(targets):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if ti >= len(inputs) and flat.size > params_per_tensor:
            idx = rng.choice(flat.size, params_per_tensor, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = values(model(records, mode, lam, bandwidth=bw))
            flat[i] = orig - h
            down = values(model(records, mode, lam, bandwidth=bw))
            flat[i] = orig
            for term in terms:
                numeric = (up[term] - down[term]) / (2 * h)
                worst[term] = max(worst[term], _rel_err(analytic[term][ti][i], numeric))
    for t in targets:
        t.grad = None
    return worst


def check_modules(rng: np.random.Generator, dim: int = 8, batch: int = 4, heads: int = 2,
                  h: float = 1e-5) -> dict[str, float]:
    mode = Mode.check()

    def x():
        return Tensor(rng.standard_normal((batch, dim)))

    head = ProjectionHead(2 * dim, dim, rng)
    jitter(head, rng)
    a, b = x(), x()
    out = {"projection_head": T.grad_check(lambda v: T.sum_(T.sigmoid(head(v[0], v[1], mode))), [a, b], h)}

    iaff = IAFF(dim, rng)
    jitter(iaff, rng)
    a, b = x(), x()
    out["iaff"] = T.grad_check(lambda v: T.sum_(T.sigmoid(iaff(v[0], v[1], mode))), [a, b], h)

    inter = Interactions(dim, heads, rng)
    block = inter.blocks[0]
    q, kv = x(), x()
    w = Tensor(rng.standard_normal((batch, dim)))
    out["masked_attention"] = T.grad_check(
        lambda v: T.sum_(block(v[0], v[1], v[1], mode) * w), [q, kv] + block.parameters(), h)

    p, qq = x(), x()
    out["kl_divergence"] = T.grad_check(lambda v: kl_divergence(v[0], v[1]), [p, qq], h)

    xs, ys = x(), Tensor(rng.standard_normal((batch + 1, dim)))
    bw = 1.3
    out["mmd_squared"] = T.grad_check(lambda v: mmd_squared(v[0], v[1], bw).value, [xs, ys], h)

    tp, ip = x(), x()
    split = LabelSplit.from_labels([1, 1, 0, 0][:batch] + [1] * max(0, batch - 4))
    out["news_internal"] = T.grad_check(lambda v: news_internal_loss(v[0], v[1], split)[2], [tp, ip], h)
    return out


def run_gradcheck(seed: int = 0, batch: int = 4, dim: int = 8, heads: int = 2, lam: float = 0.1,
                  h: float = 1e-5, params_per_tensor: int = 2) -> list[CheckEntry]:
    """Full-loss check (one entry per term) followed by per-module checks."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n1=dim, n2=dim, n_raw=dim, dim=dim, heads=heads)
    model = RaCMC(cfg, rng, Ablation())
    jitter(model, rng)
    records = toy_batch(rng, batch, dim, dim, dim)
    entries = [CheckEntry(f"loss/{k}", v)
               for k, v in check_model_terms(model, records, lam, h, params_per_tensor, rng).items()]
    entries += [CheckEntry(f"module/{k}", v) for k, v in check_modules(rng, dim, batch, heads, h).items()]
    return entries
