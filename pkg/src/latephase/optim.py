"""Update rules on parameter stores (``dict[str, ndarray]``).

Every optimizer exposes ``query(params)``, the point at which the caller must
evaluate the gradient, and ``step(params, grads)``, which returns new
parameters. The same rule applies to base and late-phase stores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError


def _check_grads(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r}")


def _zeros_like(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


@dataclass
class NesterovState:
    """SGD with Nesterov momentum; ``momentum=0`` is plain SGD."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")

    def query(self, params):
        if self.momentum == 0.0 or not self.velocity:
            return params
        return {k: p + self.momentum * self.velocity[k] for k, p in params.items()}

    def step(self, params, grads):
        return nesterov_step(self, params, grads)

    def copy(self):
        return NesterovState(self.lr, self.momentum, self.weight_decay,
                             {k: v.copy() for k, v in self.velocity.items()})


def nesterov_step(state: NesterovState, params, grad_at_lookahead):
    """``nu <- rho nu - lr (g + wd * lookahead); theta <- theta + nu``.

    ``grad_at_lookahead`` must have been evaluated at ``state.query(params)``.
    """
    _check_grads(grad_at_lookahead)
    if not state.velocity:
        state.velocity = _zeros_like(params)
    out = {}
    for k, p in params.items():
        g = grad_at_lookahead[k]
        nu = state.velocity[k]
        if state.weight_decay:
            g = g + state.weight_decay * (p + state.momentum * nu)
        nu = state.momentum * nu - state.lr * g
        state.velocity[k] = nu
        out[k] = p + nu
    return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def query(self, params):
        return params

    def step(self, params, grads):
        return adam_step(self, params, grads)

    def copy(self):
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(state: AdamState, params, grad):
    """Adam with bias-corrected moments."""
    _check_grads(grad)
    if not state.m:
        state.m = _zeros_like(params)
        state.v = _zeros_like(params)
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    out = {}
    for k, p in params.items():
        g = grad[k]
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


@dataclass
class SwaState:
    """Running arithmetic mean of the iterates seen since activation."""

    average: dict = field(default_factory=dict)
    t: int = 0
    start: float | None = None

    def copy(self):
        return SwaState({k: v.copy() for k, v in self.average.items()}, self.t, self.start)


def swa_update(state: SwaState, params) -> SwaState:
    """``theta_swa <- (t theta_swa + theta) / (t + 1)``."""
    t = state.t
    if t == 0:
        state.average = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    else:
        state.average = {k: (t * state.average[k] + params[k]) / (t + 1) for k in params}
    state.t = t + 1
    return state


class SwaWrapper:
    """Runs an inner optimizer and folds each new iterate into an SWA average once active."""

    def __init__(self, inner, swa: SwaState | None = None, active: bool = False):
        self.inner = inner
        self.swa = swa if swa is not None else SwaState()
        self.active = active

    @property
    def lr(self):
        return self.inner.lr

    @lr.setter
    def lr(self, value):
        self.inner.lr = value

    def query(self, params):
        return self.inner.query(params)

    def step(self, params, grads):
        new = self.inner.step(params, grads)
        if self.active:
            swa_update(self.swa, new)
        return new

    def averaged(self, params):
        return self.swa.average if self.swa.t > 0 else params

    def copy(self):
        return SwaWrapper(self.inner.copy(), self.swa.copy(), self.active)


@dataclass
class LrSchedule:
    kind: str = "constant"
    lr: float = 0.1
    start_epoch: float = 0.0
    end_epoch: float = 1.0
    lr_end: float = 0.001
    milestones: tuple = ()
    factor: float = 0.1

    def __post_init__(self):
        if self.kind not in ("constant", "linear_anneal", "multistep"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "linear_anneal" and not self.end_epoch > self.start_epoch:
            raise ConfigError("linear_anneal requires end_epoch > start_epoch")


def lr_at(schedule: LrSchedule, epoch: float) -> float:
    if epoch < 0:
        raise ConfigError("epoch must be nonnegative")
    if schedule.kind == "constant":
        return schedule.lr
    if schedule.kind == "linear_anneal":
        if epoch <= schedule.start_epoch:
            return schedule.lr
        if epoch >= schedule.end_epoch:
            return schedule.lr_end
        frac = (epoch - schedule.start_epoch) / (schedule.end_epoch - schedule.start_epoch)
        return schedule.lr + frac * (schedule.lr_end - schedule.lr)
    passed = sum(1 for m in schedule.milestones if epoch >= m)
    return schedule.lr * math.pow(schedule.factor, passed)
