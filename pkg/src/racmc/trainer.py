"""Mini-batch training, evaluation metrics and best-epoch selection."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from racmc.encoders import FAKE, REAL, RecordArrays
from racmc.errors import ConfigError, DataError
from racmc.model import Ablation, ModelConfig, RaCMC
from racmc.nn import Mode
from racmc.optim import Adam
from racmc.tensor import Tape, backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 64
    lr: float = 1e-3
    lam: float = 0.1
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    ablation: Ablation = field(default_factory=Ablation)
    # stop once best test accuracy reaches this value (None: run all epochs)
    stop_at_accuracy: float | None = None

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError(f"epochs, batch size must be positive and lr non-negative: "
                              f"{self.epochs}, {self.batch_size}, {self.lr}")
        self.model.validate()
        self.ablation.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        ablation = Ablation(**d.pop("ablation", {}))
        return cls(model=model, ablation=ablation, **d)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float


@dataclass
class MetricsReport:
    accuracy: float
    fake: ClassMetrics
    real: ClassMetrics
    # confusion[true][pred], index 0 = fake, 1 = real
    confusion: list[list[int]]

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def class_metrics(tp: int, fp: int, fn: int) -> ClassMetrics:
    p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    return ClassMetrics(p, r, 2 * p * r / (p + r) if p + r else 0.0)


def metrics_from_predictions(labels, preds) -> MetricsReport:
    labels, preds = np.asarray(labels), np.asarray(preds)
    conf = [[int(((labels == t) & (preds == p)).sum()) for p in (FAKE, REAL)] for t in (FAKE, REAL)]
    total = len(labels)
    acc = _ratio(conf[0][0] + conf[1][1], total)
    fake = class_metrics(conf[0][0], conf[1][0], conf[0][1])
    real = class_metrics(conf[1][1], conf[0][1], conf[1][0])
    return MetricsReport(acc, fake, real, conf)


def predict(model: RaCMC, data: RecordArrays, batch_size: int, lam: float = 0.1):
    """Eval-mode class probabilities, batched in dataset order (last batch kept)."""
    probs = []
    for start in range(0, len(data), batch_size):
        out = model(data.subset(np.arange(start, min(start + batch_size, len(data)))), Mode.eval(), lam)
        probs.append(out.probs.data)
    return np.concatenate(probs)


def evaluate(model: RaCMC, data: RecordArrays, cfg: TrainConfig) -> MetricsReport:
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    probs = predict(model, data, cfg.batch_size, cfg.lam)
    return metrics_from_predictions(data.labels, probs.argmax(axis=1))


@dataclass
class TrainResult:
    model: RaCMC
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_accuracy: float
    history: list[dict]


def train(train_set: RecordArrays, test_set: RecordArrays, cfg: TrainConfig,
          on_step: Callable[[dict], None] | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train from scratch and keep the parameters of the best-test-accuracy epoch.

    Init, shuffling and dropout draw from independent streams derived from
    ``cfg.seed``, so a run is a pure function of its inputs.  The last
    incomplete mini-batch of each epoch is dropped.
    """
    cfg.validate()
    if len(train_set) == 0 or len(test_set) == 0:
        raise ConfigError("train and test sets must be non-empty")
    if set(np.unique(train_set.labels)) != {FAKE, REAL}:
        raise ConfigError("training set must contain both real and fake records")
    if cfg.batch_size < 2:
        raise ConfigError("training batch size must be at least 2")
    dims = (cfg.model.n1, cfg.model.n2, cfg.model.n_raw)
    for name, ds in (("train", train_set), ("test", test_set)):
        if ds.dims != dims:
            raise ConfigError(f"{name} data dims {ds.dims} do not match model dims {dims}")

    init_seq, shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    model = RaCMC(cfg.model, np.random.default_rng(init_seq), cfg.ablation)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    mode = Mode.train(np.random.default_rng(dropout_seq))
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)

    n_batches = len(train_set) // cfg.batch_size
    if n_batches == 0:
        raise ConfigError(f"batch size {cfg.batch_size} exceeds training set size {len(train_set)}")

    best_acc, best_epoch, best_state = -1.0, -1, model.state_dict()
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        sums = dict.fromkeys(("l_ic", "l_no", "l_ni", "l_ce", "total"), 0.0)
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            opt.zero_grad()
            with Tape() as tape:
                out = model(train_set.subset(idx), mode, cfg.lam)
            backward(out.loss, tape)
            opt.step()
            step += 1
            rep = out.report
            if not math.isfinite(rep.total):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} step {step}: {rep}")
            for k in sums:
                sums[k] += getattr(rep, k)
            if on_step is not None:
                on_step({"epoch": epoch, "step": step, "l_ic": rep.l_ic, "l_no": rep.l_no,
                         "l_ni": rep.l_ni, "l_ce": rep.l_ce, "L": rep.total})
        metrics = evaluate(model, test_set, cfg)
        record = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()},
                  "test": metrics.to_dict()}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.info("epoch %d loss %.4f test acc %.4f", epoch, record["total"], metrics.accuracy)
        if metrics.accuracy > best_acc:
            best_acc, best_epoch, best_state = metrics.accuracy, epoch, model.state_dict()
        if cfg.stop_at_accuracy is not None and best_acc >= cfg.stop_at_accuracy:
            break
    model.load_state_dict(best_state)
    return TrainResult(model, best_state, best_epoch, best_acc, history)
