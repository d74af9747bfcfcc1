# tests/test_solvers.py
from __future__ import annotations

import numpy as np
import pytest

from hybrid.errors import DivergenceError, ShapeError, ValidationError
from hybrid.solvers import ADAM, SGD_MOMENTUM, SolverConfig, init_solver_state, solver_step


def test_sgd_momentum_heavy_ball():
    cfg = SolverConfig(kind=SGD_MOMENTUM, lr=0.1, momentum=0.5)
    p = [np.array([1.0, 2.0])]
    state = init_solver_state(cfg, p)
    solver_step(p, [np.array([1.0, 1.0])], state)
    np.testing.assert_allclose(p[0], [0.9, 1.9])
    solver_step(p, [np.array([1.0, 1.0])], state)
    # v = 0.5 * 1 + 1 = 1.5
    np.testing.assert_allclose(p[0], [0.75, 1.75])
    assert state.step == 2


def test_zero_momentum_is_plain_sgd():
    cfg = SolverConfig(kind=SGD_MOMENTUM, lr=0.01, momentum=0.0)
    p = [np.zeros(3)]
    state = init_solver_state(cfg, p)
    for _ in range(3):
        solver_step(p, [np.ones(3)], state)
    np.testing.assert_allclose(p[0], -0.03)


def test_adam_first_step_moves_by_lr():
    cfg = SolverConfig(kind=ADAM, lr=1e-3)
    p = [np.array([0.0, 0.0])]
    state = init_solver_state(cfg, p)
    solver_step(p, [np.array([5.0, -0.01])], state)
    np.testing.assert_allclose(p[0], [-1e-3, 1e-3], rtol=1e-4)


def test_updates_are_deterministic():
    rng = np.random.default_rng(0)
    grads = [[rng.normal(size=(4, 4))] for _ in range(5)]

    def run():
        p = [np.ones((4, 4))]
        st = init_solver_state(SolverConfig(), p)
        for g in grads:
            solver_step(p, g, st)
        return p[0]

    assert np.array_equal(run(), run())


def test_non_finite_gradient_raises_divergence_naming_layer():
    p = [np.zeros(2)]
    state = init_solver_state(SolverConfig(), p)
    with pytest.raises(DivergenceError) as exc:
        solver_step(p, [np.array([np.nan, 0.0])], state, layer="conv3")
    assert exc.value.layer == "conv3"
    np.testing.assert_array_equal(p[0], 0.0)


def test_shape_mismatch_and_bad_config():
    p = [np.zeros(2)]
    state = init_solver_state(SolverConfig(), p)
    with pytest.raises(ShapeError):
        solver_step(p, [np.zeros(3)], state)
    with pytest.raises(ValidationError):
        SolverConfig(kind="rmsprop").validate()
    with pytest.raises(ValidationError):
        SolverConfig(momentum=1.0).validate()
    with pytest.raises(ValidationError):
        SolverConfig(lr=0.0).validate()


@pytest.mark.parametrize("kind", [SGD_MOMENTUM, ADAM])
def test_overflowing_update_is_rejected_without_touching_state(kind):
    cfg = SolverConfig(kind=kind, lr=1e308, momentum=0.5)
    p = [np.array([1.7e308, 0.0])]
    state = init_solver_state(cfg, p)
    with pytest.raises(DivergenceError) as exc:
        solver_step(p, [np.array([-1.0, -1.0])], state, layer="fc")
    assert exc.value.layer == "fc"
    np.testing.assert_array_equal(p[0], [1.7e308, 0.0])
    assert state.step == 0
    buffers = state.velocity if kind == SGD_MOMENTUM else state.m + state.v
    assert all(np.all(b == 0) for b in buffers)


@pytest.mark.parametrize("seed", range(5))
def test_adam_step_size_stays_below_lr_over_one_minus_beta1(seed):
    rng = np.random.default_rng(seed)
    cfg = SolverConfig(kind=ADAM, lr=1e-3)
    p = [np.zeros(64)]
    state = init_solver_state(cfg, p)
    bound = cfg.lr / (1.0 - cfg.beta1)
    for _ in range(300):
        # heavy-tailed, sparse gradients are the worst case for the moment ratio
        g = rng.standard_cauchy(64) * (rng.random(64) < 0.2)
        before = p[0].copy()
        solver_step(p, [g], state)
        assert np.max(np.abs(p[0] - before)) < bound
