"""Chronological split, MSE, Adam and early-stopped training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor_core as tc
from .errors import ConfigurationError, DataError, DimensionError, TrainingDivergedError
from .model import HeartModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    lr_initial: float = 1e-3
    lr_decay_factor: float = 0.5
    patience_decay: int = 5
    patience_stop: int = 15
    max_epochs: int = 500
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr_initial <= 0:
            raise ConfigurationError("lr_initial must be positive")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigurationError("lr_decay_factor must lie in (0, 1)")
        if not self.patience_stop >= self.patience_decay >= 1:
            raise ConfigurationError("need patience_stop >= patience_decay >= 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("max_epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainingConfig":
        return cls(**dict(d))


def split_chronological(samples: Sequence, train_fraction: float, gap: int = 0):
    """First ``floor(fraction * N)`` samples train, the rest validate.

    ``gap`` drops that many samples from the end of the training side, an
    embargo for windows that would overlap the validation period.
    """
    if not 0 < train_fraction < 1:
        raise DataError("train_fraction must lie in (0, 1)")
    n = len(samples)
    cut = int(math.floor(train_fraction * n))
    train, val = list(samples[:max(0, cut - gap)]), list(samples[cut:])
    if not train or not val:
        raise DataError(f"split of {n} samples at {train_fraction} leaves an empty side")
    return train, val


def mse(pred, target) -> float:
    pred = np.asarray(pred.data if isinstance(pred, tc.Tensor) else pred, dtype=np.float64)
    target = np.asarray(target.data if isinstance(target, tc.Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shapes {pred.shape} and {target.shape} differ")
    d = pred - target
    return float(np.mean(d * d))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: Mapping, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; ``params`` and ``state`` are updated in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass
class TrainingHistory:
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_validation_mse: float = math.inf
    best_epoch: int = -1
    best_params: dict[str, np.ndarray] | None = None
    stop_reason: str = ""

    @property
    def epochs(self) -> int:
        return len(self.val_mse)

    def rows(self):
        for i, (a, b, c) in enumerate(zip(self.train_mse, self.val_mse, self.lr)):
            yield i + 1, a, b, c

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "val_mse", "lr"])
            for e, a, b, c in self.rows():
                w.writerow([e, repr(a), repr(b), repr(c)])

    def summary(self) -> dict:
        return {"epochs": self.epochs, "best_epoch": self.best_epoch,
                "best_validation_mse": self.best_validation_mse, "stop_reason": self.stop_reason,
                "train_mse": self.train_mse, "val_mse": self.val_mse, "lr": self.lr}


def _as_arrays(data):
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[0], np.ndarray):
        return data
    from .data import stack_samples
    return stack_samples(data)


def evaluate(model: HeartModel, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Eval-mode MSE over a whole set, accumulated batch by batch."""
    total = 0.0
    for i in range(0, len(x), batch_size):
        d = model(x[i:i + batch_size]) - y[i:i + batch_size]
        total += float(np.sum(d * d))
    return total / y.size


def train(model: HeartModel, train_set, validation_set, config: TrainingConfig,
          callback=None) -> TrainingHistory:
    """Mini-batch Adam on training MSE with validation-driven decay and stopping.

    After each epoch the validation MSE is computed in eval mode.  Each run of
    ``patience_decay`` epochs without a strict improvement multiplies the
    learning rate by ``lr_decay_factor``; ``patience_stop`` such epochs end the
    run.  The best parameters are restored into ``model`` before returning.
    """
    xt, yt = _as_arrays(train_set)
    xv, yv = _as_arrays(validation_set)
    if len(xt) == 0 or len(xv) == 0:
        raise DataError("training and validation sets must be non-empty")
    shuffle_rng = tc.make_rng(config.seed, 2)
    dropout_rng = tc.make_rng(config.seed, 3)
    state = AdamState()
    hist = TrainingHistory()
    lr = config.lr_initial
    stale = 0
    n = len(xt)
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            loss, grads = model.loss_and_grads(xt[idx], yt[idx], rng=dropout_rng, mode="train")
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}, step {state.step + 1}, lr={lr:g}")
            adam_step(model.params, grads, state, lr, config.beta1, config.beta2, config.eps)
            total += loss * len(idx)
        val = evaluate(model, xv, yv)
        if not math.isfinite(val):
            raise TrainingDivergedError(f"non-finite validation MSE at epoch {epoch}")
        hist.train_mse.append(total / n)
        hist.val_mse.append(val)
        hist.lr.append(lr)
        if val < hist.best_validation_mse:
            hist.best_validation_mse = val
            hist.best_epoch = epoch
            hist.best_params = {k: v.copy() for k, v in model.params.items()}
            stale = 0
        else:
            stale += 1
        if callback is not None:
            callback(epoch, hist)
        log.debug("epoch %d train %.6g val %.6g lr %.3g", epoch, total / n, val, lr)
        if stale >= config.patience_stop:
            hist.stop_reason = "patience"
            break
        if stale and stale % config.patience_decay == 0:
            lr *= config.lr_decay_factor
    else:
        hist.stop_reason = "max_epochs"
    model.params = {k: v.copy() for k, v in hist.best_params.items()}
    return hist
