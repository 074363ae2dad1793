"""Training loop, per-domain evaluation and leave-one-domain-out experiments."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import Corpus, RecordSet, leave_one_out_splits
from .errors import ContractError, NumericalError, ValidationError
from .layer import FuseStyleConfig, Mode
from .model import Model, ModelConfig, build_model, forward, predict_from_logits
from .selection import SelectionStrategy
from .tensor import backward, no_grad, sigmoid_bce_loss, zero_grad

logger = logging.getLogger(__name__)


class TrainingAborted(NumericalError):
    """The loss went non-finite; carries the offending batch for diagnosis."""

    def __init__(self, message: str, epoch: int, batch_index: int, sample_ids: Sequence[str]):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
        self.sample_ids = list(sample_ids)


# -- optimiser and schedule -------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params, grads, state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError("optimizer state was built for a different parameter list")
    state.step += 1
    t = state.step
    corr1 = 1.0 - state.beta1 ** t
    corr2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape or state.m[i].shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / corr1
        v_hat = state.v[i] / corr2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


@dataclass
class PlateauScheduler:
    """Multiply the rate by ``factor`` once ``patience`` epochs pass without improvement.

    An epoch improves when its loss is below ``best - threshold``.
    """

    lr0: float = 1e-4
    factor: float = 0.01
    patience: int = 2
    threshold: float = 1e-6
    best: float = math.inf
    bad_epochs: int = 0
    reductions: int = 0

    @property
    def lr(self) -> float:
        return self.lr0 * self.factor ** self.reductions

    def step(self, epoch_loss: float) -> float:
        if epoch_loss < self.best - self.threshold:
            self.best = epoch_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.reductions += 1
                self.bad_epochs = 0
        return self.lr


def scheduler_step(sched: PlateauScheduler, epoch_loss: float) -> float:
    return sched.step(epoch_loss)


# -- training and evaluation ------------------------------------------------


@dataclass
class TrainResult:
    loss_curve: List[float]
    lr_curve: List[float]
    epoch_times: List[float]
    decision_log: List[str]


def train(
    model: Model,
    records: RecordSet,
    epochs: int,
    rng: np.random.Generator,
    batch_size: int = 32,
    shuffle_seed: int = 0,
    optimizer: Optional[AdamState] = None,
    scheduler: Optional[PlateauScheduler] = None,
) -> TrainResult:
    """Train in place. Epoch ``e`` visits records in the order drawn from ``(shuffle_seed, e)``."""
    if len(records) == 0:
        raise ValidationError("training set is empty")
    optimizer = optimizer or AdamState()
    scheduler = scheduler or PlateauScheduler(lr0=optimizer.lr)
    optimizer.lr = scheduler.lr
    params = model.params
    result = TrainResult([], [], [], [])
    for epoch in range(epochs):
        start = time.perf_counter()
        total, seen = 0.0, 0
        for b, batch in enumerate(records.batches(batch_size, [shuffle_seed, epoch])):
            targets = batch.labels.reshape(-1, 1).astype(np.float64)
            zero_grad(params)
            try:
                # overflow surfaces as NumericalError from the op checks, so numpy's warnings are redundant
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    logits, decisions = forward(model, batch.images, Mode.Train, rng)
                    loss = sigmoid_bce_loss(logits, targets)
                    if not math.isfinite(loss.item()):
                        raise NumericalError("loss is not finite")
                    backward(loss)
            except NumericalError as exc:
                logger.error("numerical abort at epoch %d batch %d: %s; samples %s", epoch, b, exc, batch.sample_ids)
                raise TrainingAborted(f"epoch {epoch} batch {b}: {exc}", epoch, b, batch.sample_ids) from exc
            adam_step(params, [p.grad for p in params], optimizer)
            n = len(batch.labels)
            total += loss.item() * n
            seen += n
            for layer, decision in zip(model.config.mix_points, decisions):
                result.decision_log.append(decision.to_log_line(b, layer, epoch))
        epoch_loss = total / seen
        result.loss_curve.append(epoch_loss)
        result.lr_curve.append(optimizer.lr)
        optimizer.lr = scheduler.step(epoch_loss)
        result.epoch_times.append(time.perf_counter() - start)
        logger.info("epoch %d loss %.6f lr %.3g", epoch + 1, epoch_loss, result.lr_curve[-1])
    return result


@dataclass
class Prediction:
    sample_id: str
    domain: str
    label: int
    logit: float
    pred: int


@dataclass
class EvalResult:
    accuracy: Dict[str, float]
    predictions: List[Prediction]


def accuracy_from_predictions(predictions: Sequence[Prediction]) -> Dict[str, float]:
    correct: Dict[str, int] = {}
    total: Dict[str, int] = {}
    for p in predictions:
        total[p.domain] = total.get(p.domain, 0) + 1
        correct[p.domain] = correct.get(p.domain, 0) + int(p.pred == p.label)
    return {d: 100.0 * correct[d] / total[d] for d in total}


def evaluate(model: Model, test_sets: Dict[str, RecordSet], batch_size: int = 128) -> EvalResult:
    """Eval-mode accuracy (%) per domain; consumes no randomness."""
    predictions: List[Prediction] = []
    for domain, records in test_sets.items():
        if len(records) == 0:
            raise ValidationError(f"test set for {domain} is empty")
        for batch in records.batches(batch_size):
            with no_grad():
                logits, _ = forward(model, batch.images, Mode.Eval)
            z = logits.data.reshape(-1)
            preds = predict_from_logits(z)
            for sid, label, logit, pred in zip(batch.sample_ids, batch.labels, z, preds):
                predictions.append(Prediction(sid, domain, int(label), float(logit), int(pred)))
    if not predictions:
        raise ValidationError("no test records to evaluate")
    return EvalResult(accuracy_from_predictions(predictions), predictions)


# -- experiments --------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    data_dir: str
    holdout: str
    strategy: Optional[str] = "LeastDotProduct"  # None trains without FuseStyle
    alpha: float = 0.3
    p_apply: float = 0.5
    epsilon: float = 1e-6
    epochs: int = 15
    batch_size: int = 32
    lr: float = 1e-4
    patience: int = 2
    factor: float = 0.01
    seed: int = 1
    init_seed: Optional[int] = None
    shuffle_seed: Optional[int] = None
    aug_seed: Optional[int] = None
    block_channels: Sequence[int] = (16, 32, 64, 64)
    mix_points: Sequence[int] = (1, 4)
    detach_reference_stats: bool = False

    def __post_init__(self):
        if self.strategy is not None:
            object.__setattr__(self, "strategy", SelectionStrategy.parse(self.strategy).value)
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        object.__setattr__(self, "mix_points", tuple(int(p) for p in self.mix_points))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if not self.lr > 0 or not 0 < self.factor <= 1 or self.patience < 0:
            raise ValidationError("invalid optimiser or scheduler settings")

    def resolved(self) -> "ExperimentConfig":
        """Fill derived seeds so the snapshot names every source of randomness."""
        return dataclasses.replace(
            self,
            init_seed=self.seed if self.init_seed is None else self.init_seed,
            shuffle_seed=self.seed + 1000 if self.shuffle_seed is None else self.shuffle_seed,
            aug_seed=self.seed + 2000 if self.aug_seed is None else self.aug_seed,
        )

    @property
    def uses_fusestyle(self) -> bool:
        return self.strategy is not None and len(self.mix_points) > 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["block_channels"] = list(self.block_channels)
        d["mix_points"] = list(self.mix_points)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    def model_config(self) -> ModelConfig:
        fs = FuseStyleConfig(
            alpha=self.alpha,
            p_apply=self.p_apply,
            epsilon=self.epsilon,
            strategy=self.strategy or SelectionStrategy.LeastDotProduct,
            detach_reference_stats=self.detach_reference_stats,
        )
        return ModelConfig(
            block_channels=self.block_channels,
            mix_points=self.mix_points if self.uses_fusestyle else (),
            fusestyle=fs,
            seed=self.init_seed if self.init_seed is not None else self.seed,
        )


@dataclass
class ExperimentReport:
    config: dict
    strategy: str
    holdout: str
    seen: List[str]
    accuracy: Dict[str, float]
    loss_curve: List[float]
    lr_curve: List[float]
    epoch_times: List[float]
    seed: int
    predictions: List[Prediction] = field(default_factory=list)
    decision_log: List[str] = field(default_factory=list)

    @property
    def unseen(self) -> str:
        return self.holdout

    @property
    def unseen_accuracy(self) -> float:
        return self.accuracy[self.holdout]

    @property
    def seen_accuracy(self) -> float:
        return float(np.mean([self.accuracy[d] for d in self.seen]))


def run_experiment(config: ExperimentConfig, corpus: Optional[Corpus] = None, model_out: Optional[list] = None) -> ExperimentReport:
    """Leave ``config.holdout`` out, train on the rest, evaluate every domain's test split."""
    config = config.resolved()
    corpus = corpus or Corpus(config.data_dir)
    splits = leave_one_out_splits(corpus.manifest, config.holdout)
    model = build_model(config.model_config())
    rng = np.random.default_rng(config.aug_seed)
    optimizer = AdamState(lr=config.lr)
    scheduler = PlateauScheduler(lr0=config.lr, factor=config.factor, patience=config.patience)
    result = train(
        model,
        splits.train_records(corpus),
        config.epochs,
        rng,
        batch_size=config.batch_size,
        shuffle_seed=config.shuffle_seed,
        optimizer=optimizer,
        scheduler=scheduler,
    )
    evaluation = evaluate(model, splits.test_records(corpus))
    if model_out is not None:
        model_out.append(model)
    return ExperimentReport(
        config=config.to_dict(),
        strategy=config.strategy if config.uses_fusestyle else "None",
        holdout=config.holdout,
        seen=list(splits.train_domains),
        accuracy=evaluation.accuracy,
        loss_curve=result.loss_curve,
        lr_curve=result.lr_curve,
        epoch_times=result.epoch_times,
        seed=config.seed,
        predictions=evaluation.predictions,
        decision_log=result.decision_log,
    )
