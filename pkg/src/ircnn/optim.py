"""Optimizers: SGD with Nesterov momentum and decay, Adam, and EVE (Adam whose
step size is divided by a smoothed, clipped relative change of the batch loss).

Step functions update ``params`` and their state in place and return a
:class:`StepInfo` with the effective learning rate (and the feedback scalar d
for EVE) for metrics reporting. All steps are deterministic functions of
(state, grads, loss).

Learning-rate decay convention (SGD decay and EVE gamma):
lr_t = lr0 / (1 + decay * n) with n the number of completed steps, so the
first update uses lr0 exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericsError


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.01
    momentum: float = 0.9
    decay: float = 9.99e-7
    nesterov: bool = True

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")


@dataclass(frozen=True)
class EveConfig:
    lr: float = 1e-4
    decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.9
    beta3: float = 0.9
    k_lower: float = 0.1
    k_upper: float = 10.0
    eps: float = 1e-8

    def __post_init__(self):
        for b in (self.beta1, self.beta2):
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"beta1/beta2 must be in [0, 1), got {b}")
        if not 0.0 <= self.beta3 <= 1.0:
            raise ConfigError(f"beta3 must be in [0, 1], got {self.beta3}")
        if not 0.0 < self.k_lower < self.k_upper:
            raise ConfigError(f"need 0 < k_lower < k_upper, got "
                              f"{self.k_lower}, {self.k_upper}")


@dataclass
class OptimizerState:
    """Per-parameter moment/velocity buffers plus scalar feedback state."""

    t: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    d: float = 1.0
    f_prev: float | None = None


@dataclass(frozen=True)
class StepInfo:
    lr: float
    d: float | None = None


def _check_finite_grads(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if g.size and not (np.isfinite(g.min()) and np.isfinite(g.max())):
            raise NumericsError(f"non-finite gradient for parameter {name!r}")


def sgd_nesterov_step(state: OptimizerState, params: dict[str, np.ndarray],
                      grads: dict[str, np.ndarray], cfg: SgdConfig) -> StepInfo:
    """v <- mu*v - lr_t*g; theta <- theta + mu*v - lr_t*g (Nesterov look-ahead).

    With nesterov off the update is the plain heavy-ball theta <- theta + v.
    Momentum 0 and decay 0 reduce to vanilla gradient descent bitwise.
    """
    _check_finite_grads(grads)
    lr_t = cfg.lr / (1.0 + cfg.decay * state.t)
    mu = cfg.momentum
    for name, g in grads.items():
        p = params[name]
        vel = state.velocity.get(name)
        if vel is None:
            vel = np.zeros_like(p)
        vel = mu * vel - lr_t * g
        state.velocity[name] = vel
        if cfg.nesterov:
            params[name] = p + mu * vel - lr_t * g
        else:
            params[name] = p + vel
    state.t += 1
    return StepInfo(lr=lr_t)


def _adam_update(state: OptimizerState, params: dict[str, np.ndarray],
                 grads: dict[str, np.ndarray], lr: float, beta1: float,
                 beta2: float, eps: float) -> None:
    """Shared bias-corrected moment update; EVE routes through this exact code
    path so that beta3=1, gamma=0 reproduces Adam bitwise."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(params[name])
            v = np.zeros_like(params[name])
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def adam_step(state: OptimizerState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], cfg: AdamConfig) -> StepInfo:
    _check_finite_grads(grads)
    _adam_update(state, params, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return StepInfo(lr=cfg.lr)


def eve_step(state: OptimizerState, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray], batch_loss: float,
             cfg: EveConfig) -> StepInfo:
    """Adam step scaled by 1/d, where d smooths the clipped relative change of
    the batch loss between consecutive steps.

    Step 1 sets d = 1 and takes a plain Adam step. From step 2 on:
    r = |f_t - f_{t-1}| / max(eps, min(f_t, f_{t-1})), c = clip(r, k_lower,
    k_upper), d <- beta3*d + (1-beta3)*c. The base rate also decays as
    lr_t = lr / (1 + decay*n) before the division by d.
    """
    if not np.isfinite(batch_loss):
        raise NumericsError(f"non-finite batch loss {batch_loss!r} fed to eve")
    _check_finite_grads(grads)
    if state.t == 0:
        state.d = 1.0
    else:
        r = abs(batch_loss - state.f_prev) / max(cfg.eps,
                                                 min(batch_loss, state.f_prev))
        c = min(max(r, cfg.k_lower), cfg.k_upper)
        state.d = cfg.beta3 * state.d + (1.0 - cfg.beta3) * c
    assert cfg.k_lower <= state.d <= cfg.k_upper or state.t == 0
    lr_t = cfg.lr / (1.0 + cfg.decay * state.t)
    effective = lr_t / state.d
    _adam_update(state, params, grads, effective, cfg.beta1, cfg.beta2, cfg.eps)
    state.f_prev = batch_loss
    return StepInfo(lr=effective, d=state.d)


def apply_l2(grads: dict[str, np.ndarray], params: dict[str, np.ndarray],
             strength: float, scope: set[str] | list[str]) -> dict[str, np.ndarray]:
    """g <- g + strength * theta for in-scope kernel parameters only.

    ``scope`` holds parameter names (kernels of the block branch convs);
    biases and out-of-scope layers pass through untouched.
    """
    if strength == 0.0:
        return grads
    scope = set(scope)
    return {name: (g + strength * params[name]) if name in scope else g
            for name, g in grads.items()}


def l2_scope(graph) -> set[str]:
    """Kernel parameter names of nodes flagged as block-branch conv layers."""
    names = set()
    for nid, node in graph.nodes.items():
        if node.attrs.get("l2_scope"):
            names.update(n for n in graph.param_names_of(nid) if not n.endswith(".b"))
    return names
