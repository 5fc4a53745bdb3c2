"""MSE objective, Adam optimizer, and the mini-batch training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import windows_to_arrays
from .errors import DivergenceError, UsageError
from .tensor import Tape, Tensor, resolve_dtype


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-5
    epochs: int = 200
    batch_size: int = 64
    patience: int = 10          # epochs without val improvement before stopping
    seed: int = 0
    precision: str = "standard"
    decoupled_decay: bool = False   # default: L2 term added to the gradient
    scale: bool = False             # divide counts by the train max before fitting

    def validate(self):
        if min(self.lr, self.weight_decay + 1, self.epochs, self.batch_size, self.patience) <= 0:
            raise UsageError("lr, epochs, batch_size and patience must be positive")
        if self.patience > self.epochs:
            raise UsageError(f"patience {self.patience} exceeds epochs {self.epochs}")

    def replace(self, **kv):
        out = TrainConfig(**{**self.__dict__, **kv})
        return out


def mse_loss(pred, target):
    """Mean over all elements of the squared difference."""
    d = T.sub(pred, target)
    return T.mean_all(T.hadamard(d, d))


class Adam:
    """Adam with bias correction; weight decay defaults to L2-on-gradient.

    Only tensors handed in are updated, so frozen tensors are excluded by
    construction.  ``decoupled=True`` applies the decay directly to the
    parameters instead of the gradient.
    """

    def __init__(self, params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999),
                 eps=1e-8, decoupled=False):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.decoupled = decoupled
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise UsageError("adam step: a trainable parameter has no gradient")
            g = p.grad
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype)
            if self.weight_decay and self.decoupled:
                p.data -= (self.lr * self.weight_decay) * p.data

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    best_epoch: int = -1       # 0-based index into the lists
    epochs_run: int = 0
    scale: float = 1.0


def predict_windows(model, windows, batch_size=256, scale=1.0, dtype=None):
    """Eval-mode predictions for a list of windows, on the raw count scale."""
    dtype = dtype or model.dtype
    inputs, hours, _ = windows_to_arrays(windows)
    inputs = inputs.astype(dtype)
    if scale != 1.0:
        inputs = inputs / scale
    preds = []
    tapes = {p.tape for _, p in model.named_tensors() if p.tape is not None}
    tape = tapes.pop() if tapes else None
    ctx = tape.paused() if tape is not None else _null_ctx()
    with ctx:
        for lo in range(0, len(windows), batch_size):
            x = Tensor(inputs[lo:lo + batch_size])
            out = model.forward_batch(x, hours[lo:lo + batch_size], mode="eval")
            preds.append(out.data.astype(np.float64))
    stacked = np.concatenate(preds, axis=0)
    return stacked * scale


class _null_ctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _rmse_mae(preds, targets):
    err = preds - targets
    return float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err)))


def fit(model, train_windows, val_windows, config, log_path=None):
    """Train with shuffled mini-batches and validation-based early stopping.

    Per epoch: seeded shuffle, train-mode forward, MSE backward, Adam step;
    then validation RMSE/MAE in eval mode on raw counts.  Stops when the
    validation RMSE has not improved for ``patience`` epochs and restores
    the best epoch's parameters.  Batches that would reach batchnorm with a
    single sample are dropped.
    """
    config.validate()
    if not train_windows or not val_windows:
        raise UsageError("fit needs non-empty train and validation window lists")
    dtype = resolve_dtype(config.precision)
    if model.dtype != dtype:
        raise UsageError(f"model dtype {model.dtype} does not match config precision {config.precision}")

    inputs, hours, targets = windows_to_arrays(train_windows)
    inputs = inputs.astype(dtype)
    targets = targets.astype(dtype)
    scale = 1.0
    if config.scale:
        scale = float(max(inputs.max(), targets.max(), 1.0))
        inputs = inputs / dtype(scale)
        targets = targets / dtype(scale)

    _, _, val_targets = windows_to_arrays(val_windows)
    val_targets = val_targets.astype(np.float64)

    tape = Tape()
    model.attach_tape(tape)
    adam = Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay,
                decoupled=config.decoupled_decay)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory(scale=scale)
    best_snapshot = None
    best_rmse = math.inf
    since_best = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    try:
        for epoch in range(config.epochs):
            perm = rng.permutation(len(train_windows))
            losses = []
            for bi, lo in enumerate(range(0, len(perm), config.batch_size)):
                idx = perm[lo:lo + config.batch_size]
                if len(idx) < 2 and len(perm) > 1:
                    continue  # batchnorm cannot take a single-sample batch
                tape.reset()
                x = Tensor(inputs[idx])
                y = Tensor(targets[idx])
                loss = mse_loss(model.forward_batch(x, hours[idx], mode="train"), y)
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(
                        f"non-finite training loss at epoch {epoch + 1}, batch {bi + 1}"
                    )
                tape.backward(loss)
                adam.step()
                adam.zero_grad()
                losses.append(value)
            tape.reset()

            preds = predict_windows(model, val_windows, scale=scale)
            rmse, mae = _rmse_mae(preds, val_targets)
            history.train_loss.append(float(np.mean(losses)))
            history.val_rmse.append(rmse)
            history.val_mae.append(mae)
            history.epochs_run = epoch + 1
            if log_fh:
                log_fh.write(json.dumps({
                    "epoch": epoch + 1,
                    "train_loss": history.train_loss[-1],
                    "val_rmse": rmse,
                    "val_mae": mae,
                    "time": time.time(),
                }) + "\n")
                log_fh.flush()

            if rmse < best_rmse:
                best_rmse = rmse
                best_snapshot = model.snapshot()
                history.best_epoch = epoch
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()

    if best_snapshot is not None:
        model.restore(best_snapshot)
    return model, history
