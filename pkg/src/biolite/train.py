"""Cross-entropy loss, Adam with decoupled weight decay, plateau LR decay and the epoch loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data, model, ops
from .errors import DataError, InternalError
from .metrics import ConfusionMatrix, EvalReport
from .seeding import make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 4
    max_epochs: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    plateau_min_delta: float = 1e-4
    lr_min: float = 1e-6
    early_stop_patience: int = 30
    max_steps: int | None = None
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")


# ---------------------------------------------------------------- loss


def ce_loss(logits: np.ndarray, target: np.ndarray):
    """Mean per-pixel categorical cross-entropy and its gradient w.r.t. the logits.

    Returns (loss, dlogits) with dlogits = (softmax - onehot) / (n * h * w).
    """
    n, C, h, w = logits.shape
    if target.shape != (n, h, w):
        raise DataError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= C):
        raise DataError(f"target contains class ids outside [0, {C})")
    logp = ops.log_softmax_channels(logits)
    t = target.astype(np.intp)[:, None]
    picked = np.take_along_axis(logp, t, axis=1)
    count = n * h * w
    loss = -float(picked.sum(dtype=np.float64)) / count
    grad = np.exp(logp)
    np.put_along_axis(grad, t, np.take_along_axis(grad, t, axis=1) - 1, axis=1)
    grad /= logits.dtype.type(count)
    return loss, grad


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: model.ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.tensors.items()},
            v={k: np.zeros_like(a) for k, a in params.tensors.items()},
        )

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(params: model.ModelParams, grads: dict, state: AdamState, config: TrainConfig, lr: float | None = None):
    """One in-place Adam update with decoupled weight decay; returns (params, state).

    theta <- theta - lr * wd * theta, then the bias-corrected Adam step.
    """
    lr = config.lr if lr is None else lr
    if set(grads) != set(params.tensors):
        raise InternalError("gradient names do not match parameter names")
    state.t += 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.tensors.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise InternalError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if config.weight_decay:
            theta -= theta.dtype.type(lr * config.weight_decay) * theta
        theta -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(theta.dtype)
    return params, state


# ---------------------------------------------------------------- plateau scheduler


@dataclass
class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` epochs without improvement (mode: max)."""

    lr: float
    patience: int = 10
    factor: float = 0.5
    min_delta: float = 1e-4
    lr_min: float = 1e-6
    best: float = -math.inf
    bad_epochs: int = 0

    def step(self, metric: float) -> float:
        if metric > self.best + self.min_delta:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.lr_min)
                self.bad_epochs = 0
        return self.lr


def plateau_scheduler(val_metrics, config: TrainConfig) -> float:
    """LR after replaying a history of validation Dice values through the scheduler."""
    if not val_metrics:
        raise ValueError("need at least one completed epoch")
    sched = PlateauScheduler(config.lr, config.plateau_patience, config.plateau_factor,
                             config.plateau_min_delta, config.lr_min)
    for m in val_metrics:
        sched.step(m)
    return sched.lr


# ---------------------------------------------------------------- training log


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float
    val_miou: float
    lr: float
    steps: int = 0


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_dice: float = -math.inf

    CSV_FIELDS = ("epoch", "train_loss", "val_loss", "val_dice", "val_miou", "lr")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.CSV_FIELDS)
            for r in self.epochs:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_dice), repr(r.val_miou), repr(r.lr)])

    def as_dicts(self):
        return [asdict(r) for r in self.epochs]


# ---------------------------------------------------------------- loop


def evaluate_frames(params: model.ModelParams, frames, batch_size: int = 4, size=data.INPUT_SIZE):
    """(mean CE loss, EvalReport) of the model on already-preprocessed frames."""
    cm = ConfusionMatrix()
    total, count = 0.0, 0
    for i in range(0, len(frames), batch_size):
        x, y = data.to_batch(frames[i:i + batch_size], size)
        logits = model.forward(params, x)
        loss, _ = ce_loss(logits, y)
        total += loss * y.size
        count += y.size
        cm.accumulate(logits.argmax(axis=1), y)
    return total / count, EvalReport.from_confusion(cm)


def train(train_set, val_set, params: model.ModelParams, config: TrainConfig = TrainConfig(),
          augment_config: data.AugmentConfig | None = None, on_epoch=None):
    """Mini-batch Adam training with validation-Dice checkpointing and early stopping.

    ``train_set`` and ``val_set`` are sequences of preprocessed ``LabeledFrame``s at the
    network input size. Returns (best params, TrainLog). ``on_epoch(record, params, is_best)``
    is called after each epoch.
    """
    train_set, val_set = list(train_set), list(val_set)
    if not train_set or not val_set:
        raise DataError("training and validation sets must be non-empty")
    train_ids = {f.id for f in train_set}
    if any(f.id in train_ids for f in val_set) and not all(f.id in train_ids for f in val_set):
        log.warning("validation set partially overlaps the training set")
    size = train_set[0].image.shape[:2]
    aug = augment_config or data.AugmentConfig(enabled=config.augment)
    if not config.augment:
        aug = data.AugmentConfig(enabled=False)

    params = params.copy()
    state = AdamState.zeros_like(params)
    sched = PlateauScheduler(config.lr, config.plateau_patience, config.plateau_factor,
                             config.plateau_min_delta, config.lr_min)
    tlog = TrainLog()
    best = params.copy()
    since_best = 0
    steps = 0
    for epoch in range(1, config.max_epochs + 1):
        lr = sched.lr
        order = make_rng(config.seed, "shuffle", epoch).permutation(len(train_set))
        losses = []
        for start in range(0, len(order), config.batch_size):
            if config.max_steps is not None and steps >= config.max_steps:
                break
            batch = []
            for i in order[start:start + config.batch_size]:
                f = train_set[i]
                batch.append(data.augment(f, aug, make_rng(config.seed, "augment", epoch, f.id)))
            x, y = data.to_batch(batch, size)
            logits, cache = model.forward(params, x, cache=True)
            loss, dlogits = ce_loss(logits, y)
            grads = model.backward(params, cache, dlogits)
            adam_step(params, grads, state, config, lr)
            losses.append(loss)
            steps += 1
        if not losses:
            break
        val_loss, report = evaluate_frames(params, val_set, config.batch_size, size)
        rec = EpochRecord(epoch, float(np.mean(losses)), val_loss, report.mean_dice, report.miou, lr, steps)
        tlog.epochs.append(rec)
        is_best = report.mean_dice > tlog.best_val_dice
        if is_best:
            tlog.best_val_dice = report.mean_dice
            tlog.best_epoch = epoch
            best = params.copy()
            since_best = 0
        else:
            since_best += 1
        log.info("epoch %d loss %.4f val_loss %.4f val_dice %.4f val_miou %.4f lr %.2e",
                 epoch, rec.train_loss, val_loss, report.mean_dice, report.miou, lr)
        if on_epoch is not None:
            on_epoch(rec, params, is_best)
        sched.step(report.mean_dice)
        if since_best >= config.early_stop_patience:
            log.info("early stop after %d epochs without improvement", since_best)
            break
    return best, tlog
