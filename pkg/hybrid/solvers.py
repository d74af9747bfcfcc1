# hybrid/solvers.py
# v0.1.0 — parameter update rules: heavy-ball SGD with momentum and bias-corrected Adam.
# A SolverState is owned by exactly one trainer at a time (the parameter server of its shard).

from __future__ import annotations
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple
import logging

import numpy as np

from .errors import DivergenceError, ShapeError, ValidationError

SGD_MOMENTUM = "sgd_momentum"
ADAM = "adam"
SOLVER_KINDS = (SGD_MOMENTUM, ADAM)

# Learning-rate sweep range used for the HEP experiments.
HEP_LR_RANGE = (1e-4, 1e-3)

log = logging.getLogger("engine")

# --------------------------- Data Models -------------------------------------

@dataclass
class SolverConfig:
    kind: str = ADAM
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def validate(self) -> "SolverConfig":
        if self.kind not in SOLVER_KINDS:
            raise ValidationError(f"solver kind must be one of {SOLVER_KINDS}, got {self.kind!r}")
        if not self.lr > 0:
            raise ValidationError("solver lr must be > 0")
        for name in ("momentum", "beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValidationError(f"solver {name} must be in [0, 1), got {v}")
        if not self.epsilon > 0:
            raise ValidationError("solver epsilon must be > 0")
        return self


@dataclass
class SolverState:
    config: SolverConfig
    step: int = 0
    velocity: List[np.ndarray] = field(default_factory=list)
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @property
    def kind(self) -> str:
        return self.config.kind


def init_solver_state(config: SolverConfig, params: Sequence[np.ndarray]) -> SolverState:
    config.validate()
    zeros = lambda: [np.zeros_like(p, dtype=np.float64) for p in params]
    if config.kind == SGD_MOMENTUM:
        return SolverState(config, velocity=zeros())
    return SolverState(config, m=zeros(), v=zeros())

# --------------------------- Helpers -----------------------------------------

def _check(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
           buffers: Sequence[np.ndarray], layer: str) -> None:
    if len(params) != len(grads) or len(params) != len(buffers):
        raise ShapeError(f"solver arrays for {layer}", (len(params),), (len(grads),))
    for p, g, b in zip(params, grads, buffers):
        if p.shape != g.shape:
            raise ShapeError(f"gradient for {layer}", p.shape, g.shape)
        if b.shape != p.shape:
            raise ShapeError(f"solver buffer for {layer}", p.shape, b.shape)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in layer {layer}", layer=layer)

# --------------------------- Update rules ------------------------------------

def _commit(layer: str, params: List[np.ndarray], updated: Sequence[np.ndarray],
            buffers: Sequence[Tuple[List[np.ndarray], Sequence[np.ndarray]]]) -> None:
    """Write a candidate step in place; a non-finite new parameter rejects the whole step."""
    if not all(np.all(np.isfinite(u)) for u in updated):
        raise DivergenceError(f"non-finite parameter after update in layer {layer}", layer=layer)
    for p, u in zip(params, updated):
        p[...] = u
    for old, new in buffers:
        for b, n in zip(old, new):
            b[...] = n


def sgd_momentum_step(params: List[np.ndarray], grads: Sequence[np.ndarray], state: SolverState,
                      layer: str = "?") -> Tuple[List[np.ndarray], SolverState]:
    """v <- mu*v + g ; p <- p - lr*v (in place)."""
    _check(params, grads, state.velocity, layer)
    mu, lr = state.config.momentum, state.config.lr
    velocity = [mu * v + g for g, v in zip(grads, state.velocity)]
    updated = [p - lr * v for p, v in zip(params, velocity)]
    _commit(layer, params, updated, [(state.velocity, velocity)])
    state.step += 1
    return params, state


def adam_step(params: List[np.ndarray], grads: Sequence[np.ndarray], state: SolverState,
              layer: str = "?") -> Tuple[List[np.ndarray], SolverState]:
    _check(params, grads, state.m, layer)
    cfg = state.config
    t = state.step + 1
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    m = [cfg.beta1 * mi + (1.0 - cfg.beta1) * g for g, mi in zip(grads, state.m)]
    v = [cfg.beta2 * vi + (1.0 - cfg.beta2) * (g * g) for g, vi in zip(grads, state.v)]
    updated = [p - cfg.lr * (mi / c1) / (np.sqrt(vi / c2) + cfg.epsilon) for p, mi, vi in zip(params, m, v)]
    _commit(layer, params, updated, [(state.m, m), (state.v, v)])
    state.step = t
    return params, state


def solver_step(params: List[np.ndarray], grads: Sequence[np.ndarray], state: SolverState,
                layer: str = "?") -> Tuple[List[np.ndarray], SolverState]:
    if state.kind == SGD_MOMENTUM:
        return sgd_momentum_step(params, grads, state, layer)
    return adam_step(params, grads, state, layer)
