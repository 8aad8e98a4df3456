"""The assembled network and its loss, with ablation switches."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from racmc import tensor as T
from racmc.constraints import InteractionLossReport, interaction_loss
from racmc.dfr import Classifier, LossReport, Reasoner, ReasoningFeatures, cross_entropy, total_loss
from racmc.encoders import EncodedBatch, Projections, RecordArrays, encode_batch
from racmc.errors import ConfigError
from racmc.mgc import LabelSplit, news_internal_loss, news_overall_loss
from racmc.mrc import FusedFeatures, Fusion, InteractionSet, Interactions
from racmc.nn import Mode, Module
from racmc.tensor import Tensor


@dataclass
class ModelConfig:
    n1: int = 24
    n2: int = 32
    n_raw: int = 16
    dim: int = 16
    heads: int = 8
    tau: float = 0.1
    proj_dropout: float = 0.4
    attn_dropout: float = 0.1
    iaff_ratio: int = 4

    def validate(self) -> None:
        if min(self.n1, self.n2, self.n_raw, self.dim, self.heads, self.iaff_ratio) < 1:
            raise ConfigError(f"dimensions must be positive: {self}")
        if self.dim % self.heads:
            raise ConfigError(f"width {self.dim} is not divisible by {self.heads} heads")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        for rate in (self.proj_dropout, self.attn_dropout):
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"dropout rate {rate} outside [0, 1)")


ABLATIONS = ("no_l_ic", "no_l_no", "no_l_ni", "image_only", "text_only", "no_mrc", "no_mgc", "no_dfr")


@dataclass
class Ablation:
    no_l_ic: bool = False
    no_l_no: bool = False
    no_l_ni: bool = False
    image_only: bool = False
    text_only: bool = False
    no_mrc: bool = False
    no_mgc: bool = False
    no_dfr: bool = False

    @classmethod
    def from_names(cls, names) -> "Ablation":
        unknown = set(names) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation(s) {sorted(unknown)}; choose from {ABLATIONS}")
        return cls(**{n: True for n in names})

    def validate(self) -> None:
        if self.image_only and self.text_only:
            raise ConfigError("image_only and text_only are mutually exclusive")
        if (self.image_only or self.text_only) and self.no_dfr:
            raise ConfigError("single-modality variants already bypass reasoning; drop no_dfr")

    @property
    def unimodal(self) -> bool:
        return self.image_only or self.text_only

    @property
    def use_l_ic(self) -> bool:
        return not (self.no_l_ic or self.no_mrc or self.unimodal)

    @property
    def use_l_no(self) -> bool:
        return not (self.no_l_no or self.no_mgc or self.unimodal)

    @property
    def use_l_ni(self) -> bool:
        return not (self.no_l_ni or self.no_mgc or self.unimodal)

    def active(self) -> list[str]:
        return [k for k, v in asdict(self).items() if v]


@dataclass
class ForwardResult:
    probs: Tensor
    loss: Tensor
    report: LossReport
    batch: EncodedBatch
    inter: InteractionSet | None = None
    fused: FusedFeatures | None = None
    reasoning: ReasoningFeatures | None = None
    ic_report: InteractionLossReport | None = None
    terms: dict[str, Tensor] = field(default_factory=dict)
    bandwidth: float = float("nan")


class RaCMC(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, ablation: Ablation | None = None):
        cfg.validate()
        self.cfg = cfg
        self.ablation = ablation or Ablation()
        self.ablation.validate()
        d = cfg.dim
        self.proj = Projections(cfg.n1, cfg.n2, cfg.n_raw, d, rng)
        self.interactions = Interactions(d, cfg.heads, rng, cfg.tau, cfg.attn_dropout)
        self.fusion = Fusion(cfg.n1, cfg.n2, d, rng, cfg.proj_dropout, cfg.iaff_ratio)
        self.reasoner = Reasoner(d, rng, cfg.proj_dropout, cfg.iaff_ratio)
        self.classifier = Classifier(self.classifier_width, 2 * d, rng)

    @property
    def classifier_width(self) -> int:
        if self.ablation.unimodal:
            return self.cfg.dim
        if self.ablation.no_dfr:
            return 2 * self.cfg.dim
        return 4 * self.cfg.dim

    def forward(self, records: RecordArrays, mode: Mode, lam: float = 0.1,
                bandwidth: float | None = None, trace: dict | None = None) -> ForwardResult:
        ab = self.ablation
        batch = encode_batch(records, self.proj)
        inter = reasoning = ic = None
        if ab.no_mrc:
            fused = self.fusion.without_interaction(batch, mode)
        else:
            inter = self.interactions(batch, mode, trace)
            fused = self.fusion(batch, inter, mode, trace)

        if ab.image_only:
            features = fused.I_prime
        elif ab.text_only:
            features = fused.T_prime
        elif ab.no_dfr:
            features = T.concat_cols(fused.T_prime + fused.I_prime, fused.M_prime)
        else:
            reasoning = self.reasoner(fused, mode, trace)
            features = reasoning.fused
        probs = self.classifier(features)

        zero = Tensor(0.0)
        l_ce = cross_entropy(probs, batch.labels)
        l_ic = l_no = l_ni = zero
        terms = {"l_ce": l_ce}
        if ab.use_l_ic:
            ic = interaction_loss(batch, inter, fused)
            l_ic = ic.l_ic
        split = LabelSplit.from_labels(batch.labels)
        used_bw = float("nan")
        if ab.use_l_no:
            res = news_overall_loss(fused.M_prime, split, bandwidth)
            l_no, used_bw = res.value, res.bandwidth
        if ab.use_l_ni:
            l_t, l_f, l_ni = news_internal_loss(fused.T_prime, fused.I_prime, split)
            terms.update(l_t=l_t, l_f=l_f)
        terms.update(l_ic=l_ic, l_no=l_no, l_ni=l_ni)
        loss = total_loss(l_ic, l_no, l_ni, l_ce, lam)
        report = LossReport(l_ic.item(), l_no.item(), l_ni.item(), l_ce.item(), loss.item(), lam)
        return ForwardResult(probs, loss, report, batch, inter, fused, reasoning, ic, terms, used_bw)

    __call__ = forward
