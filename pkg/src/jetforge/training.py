"""Optimization: AdamW, learning-rate schedules, early stopping, training loop."""

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import model as M
from .errors import ConfigError, ContractError, NonFiniteError, TrainingDiverged
from .metrics import report_from_probs
from .rng import substream
from .tensor import no_grad

log = logging.getLogger(__name__)

IMPROVEMENT = 1e-6


class AdamW:
    """Adam with decoupled weight decay.

    Each step first shrinks every parameter by ``lr * weight_decay`` and
    then applies the bias-corrected Adam update from its gradient.
    """

    def __init__(self, params, lr=1e-3, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient in parameter {i} with shape {p.shape}")
            if self.weight_decay:
                p.data = p.data * (1 - self.lr * self.weight_decay)
            with np.errstate(over="ignore"):
                self.m[i] = b1 * self.m[i] + (1 - b1) * g
                self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            if not np.isfinite(self.v[i]).all():
                raise NonFiniteError(f"second moment overflowed in parameter {i} with shape {p.shape}")
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def adamw_step(optimizer):
    optimizer.step()
    return optimizer


# ---------------------------------------------------------------------------
# Schedules


def onecycle_lr(step, total_steps, max_lr=1e-3, pct_start=0.2, div_start=25.0, div_final=1e4):
    """One-cycle schedule with cosine warm-up and cosine annealing.

    The rate rises from ``max_lr / div_start`` to ``max_lr`` at step
    ``pct_start * total_steps`` and falls to ``max_lr / div_final`` at the
    last step.
    """
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    start, final = max_lr / div_start, max_lr / div_final
    peak = pct_start * total_steps
    if step <= peak:
        frac = step / peak if peak > 0 else 1.0
        return start + (max_lr - start) * (1 - math.cos(math.pi * frac)) / 2
    span = total_steps - 1 - peak
    frac = (step - peak) / span if span > 0 else 1.0
    return final + (max_lr - final) * (1 + math.cos(math.pi * frac)) / 2


def cosine_lr(epoch, t_max, lr0, min_lr=0.0):
    if not 0 <= epoch <= t_max:
        raise ContractError(f"epoch {epoch} outside [0, {t_max}]")
    return min_lr + (lr0 - min_lr) * (1 + math.cos(math.pi * epoch / t_max)) / 2


class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr, factor=0.5, patience=2, min_lr=1e-4, threshold=IMPROVEMENT):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric):
        if metric < self.best - self.threshold:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def plateau_lr(history, lr0, factor=0.5, patience=2, min_lr=1e-4):
    """Learning rate after replaying a history of monitored values."""
    sched = PlateauScheduler(lr0, factor, patience, min_lr)
    for value in history:
        sched.step(value)
    return sched.lr


class EarlyStopping:
    def __init__(self, patience, threshold=IMPROVEMENT):
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric):
        """Record one epoch; returns True when training should stop."""
        if metric < self.best - self.threshold:
            self.best = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# Training loop

SCHEDULERS = ("plateau", "cosine", "onecycle")


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.01
    scheduler: str = "onecycle"
    early_stop_patience: int = 10
    seed: int = 0
    pct_start: float = 0.2
    div_start: float = 25.0
    div_final: float = 1e4
    plateau_factor: float = 0.5
    plateau_patience: int = 2
    plateau_min_lr: float = 1e-4
    cosine_min_lr: float = 1e-6

    def __post_init__(self):
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"scheduler must be one of {SCHEDULERS}, got {self.scheduler!r}")

    def to_dict(self):
        return asdict(self)


def evaluate(state, data, batch_size=1024):
    """Accuracy, per-class AUC, loss and confusion matrix in inference mode."""
    probs = M.predict_proba(state, data.features, batch_size)
    return report_from_probs(probs, data.labels)


def train(state, train_data, val_data, cfg=None, on_epoch=None):
    """Train ``state`` in place and return ``(best_state, history)``.

    ``best_state`` is a copy taken at the epoch with the lowest validation
    loss. ``history`` holds one dict per epoch with train/val loss,
    validation accuracy and the learning rate in effect.
    """
    cfg = cfg or TrainConfig()
    rng = substream(cfg.seed, "train")
    opt = AdamW(state.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, math.ceil(len(train_data) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    plateau = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_lr)
    stopper = EarlyStopping(cfg.early_stop_patience)
    best, best_loss, history, step = state.copy(), math.inf, [], 0

    for epoch in range(cfg.epochs):
        if cfg.scheduler == "cosine":
            opt.lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.cosine_min_lr)
        elif cfg.scheduler == "plateau":
            opt.lr = plateau.lr
        running, seen = 0.0, 0
        try:
            for batch in train_data.batches(cfg.batch_size, rng):
                if cfg.scheduler == "onecycle":
                    opt.lr = onecycle_lr(
                        step, total_steps, cfg.lr, cfg.pct_start, cfg.div_start, cfg.div_final
                    )
                opt.zero_grad()
                out = M.loss(M.forward(state, batch, training=True, rng=rng), batch.labels)
                out.backward()
                opt.step()
                running += out.item() * len(batch)
                seen += len(batch)
                step += 1
            val = evaluate(state, val_data)
        except NonFiniteError as exc:
            raise TrainingDiverged(epoch, f"training diverged at epoch {epoch}: {exc}") from exc
        if not math.isfinite(val.loss):
            raise TrainingDiverged(epoch)
        row = {
            "epoch": epoch,
            "train_loss": running / max(seen, 1),
            "val_loss": val.loss,
            "val_accuracy": val.accuracy,
            "lr": opt.lr,
        }
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.info("epoch %d train %.4f val %.4f acc %.4f", epoch, row["train_loss"], val.loss, val.accuracy)
        if val.loss < best_loss:
            best, best_loss = state.copy(), val.loss
        if cfg.scheduler == "plateau":
            plateau.step(val.loss)
        if stopper.step(val.loss):
            break
    return best, history


def write_history(path, history):
    with open(path, "w") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")
