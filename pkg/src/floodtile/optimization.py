"""Adam, reduce-on-plateau scheduling and early stopping."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

DEFAULT_LR = 4.27e-5


class NonFiniteGradientError(FloatingPointError):
    pass


class Adam:
    """Bias-corrected Adam over a dict of named arrays (updated in place)."""

    def __init__(self, params, lr=DEFAULT_LR, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())
        self.v = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())

    def step(self, params, grads) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def load_state(self, state: dict) -> None:
        self.lr = state["lr"]
        self.beta1, self.beta2, self.eps = state["beta1"], state["beta2"], state["eps"]
        self.step_count = int(state["step_count"])
        for k in self.m:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]


def adam_step(params, grads, state: Adam) -> None:
    state.step(params, grads)


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` stale epochs.

    An epoch is stale unless its loss is strictly below the best seen. The
    rate drops on the ``patience + 1``-th consecutive stale observation.
    """

    lr: float = DEFAULT_LR
    factor: float = 0.1
    patience: int = 10
    min_lr: float = 1e-8
    best_seen: float = float("inf")
    stale_count: int = 0

    def observe(self, val_loss: float) -> float:
        if val_loss < self.best_seen:
            self.best_seen = val_loss
            self.stale_count = 0
        else:
            self.stale_count += 1
            if self.stale_count > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.stale_count = 0
        return self.lr


def scheduler_observe(sched: PlateauScheduler, val_loss: float) -> float:
    return sched.observe(val_loss)


@dataclass
class EarlyStopper:
    """Track the best validation loss and signal a stop after ``patience`` stale epochs."""

    patience: int = 75
    best_loss: float = float("inf")
    counter: int = 0
    best_epoch: int = -1
    best_state: dict = field(default=None, repr=False)
    epochs_seen: int = 0

    def observe(self, val_loss: float, state_fn) -> bool:
        """Record one epoch; returns True when training should stop.

        ``state_fn`` is called only on improvement and must return a
        snapshot of the parameters to keep.
        """
        self.epochs_seen += 1
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_state = state_fn()
            self.best_epoch = self.epochs_seen
            self.counter = 0
        else:
            self.counter += 1
        return self.counter >= self.patience


def early_stop_observe(stopper: EarlyStopper, val_loss: float, params) -> bool:
    return stopper.observe(val_loss, lambda: OrderedDict((k, np.copy(v)) for k, v in params.items()))
