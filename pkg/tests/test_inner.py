import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdpocp.grid import ControlTrajectory, TimeGrid
from pdpocp.inner import (
    InnerConfig, huber, huber_grad, inner_solve, lagrangian_value, smoothed_lagrangian_and_gradient,
)
from pdpocp.models import InvalidParameterError
from pdpocp.shooting import residual

# Penalty minima of the double integrator at N=100, from an independent conic solve.
DI_Q_N100 = {0.5: 0.7102062499999999, 5.0: 2.0230639610389947, 10.0: 2.4043750000000386}
# Constrained optimum for N=100 is 307.5 / 124.
DI_PHI_N100 = 307.5 / 124
# Robot optimum at N=40, from SLSQP on a hand-written Euler model.
FFR_PHI_N40 = 6.200155488043423


def zeros(model, N):
    return ControlTrajectory(np.zeros((model.m, N)))


def test_q_at_zero_is_zero(di, rng):
    g = TimeGrid(1.0, 50)
    warm = ControlTrajectory(rng.uniform(-2.5, 2.5, (1, 50)))
    res = inner_solve(di, g, 0.0, warm)
    assert res.lagrangian_value == 0.0
    assert not np.any(res.u_star.values)


@pytest.mark.parametrize("c", sorted(DI_Q_N100))
def test_penalty_minimum_matches_oracle(di, c):
    res = inner_solve(di, TimeGrid(1.0, 100), c, zeros(di, 100))
    assert res.converged
    assert res.lagrangian_value == pytest.approx(DI_Q_N100[c], abs=1e-9)


def test_exact_penalty_above_threshold(di):
    g = TimeGrid(1.0, 100)
    res = inner_solve(di, g, 30.0, zeros(di, 100))
    assert np.max(np.abs(res.residual)) < 1e-9
    assert res.phi_value == pytest.approx(DI_PHI_N100, abs=1e-9)
    assert res.lagrangian_value == pytest.approx(lagrangian_value(di, g, res.u_star, 30.0), abs=1e-12)


def test_warm_restart_is_a_fixed_point(di):
    g = TimeGrid(1.0, 100)
    first = inner_solve(di, g, 7.0, zeros(di, 100))
    again = inner_solve(di, g, 7.0, first.u_star)
    assert np.max(np.abs(again.u_star.values - first.u_star.values)) < 1e-8
    assert again.lagrangian_value == pytest.approx(first.lagrangian_value, abs=1e-12)


def test_smoothing_method_agrees(di):
    g = TimeGrid(1.0, 60)
    tr = inner_solve(di, g, 20.0, zeros(di, 60))
    sm = inner_solve(di, g, 20.0, zeros(di, 60), InnerConfig(method="smoothing"))
    assert sm.converged
    assert sm.lagrangian_value == pytest.approx(tr.lagrangian_value, abs=1e-8)


def test_robot_global_minimum_from_zero(ffr):
    res = inner_solve(ffr, TimeGrid(12.0, 40), 30.0, zeros(ffr, 40))
    assert res.converged
    assert np.max(np.abs(res.residual)) < 1e-9
    assert res.phi_value == pytest.approx(FFR_PHI_N40, abs=1e-8)


def test_multistart_is_deterministic(ffr, rng):
    g = TimeGrid(12.0, 20)
    warm = ControlTrajectory(rng.uniform(-0.4, 0.4, (2, 20)))
    a = inner_solve(ffr, g, 3.0, warm, InnerConfig(seed=5))
    b = inner_solve(ffr, g, 3.0, warm, InnerConfig(seed=5))
    assert a.u_star == b.u_star and a.restart_index == b.restart_index


def test_convex_model_skips_restarts(di):
    res = inner_solve(di, TimeGrid(1.0, 20), 3.0, zeros(di, 20), restarts=10)
    assert res.restart_index == 0


def test_iteration_cap_reports_non_convergence(ffr):
    cfg = InnerConfig(max_iter=1, polish_iter=1, restarts=0)
    res = inner_solve(ffr, TimeGrid(12.0, 30), 5.0, zeros(ffr, 30), cfg)
    assert not res.converged
    assert res.kkt_residual > cfg.grad_tol


def test_solution_stays_in_box(ffr, rng):
    warm = ControlTrajectory(rng.uniform(-3, 3, (2, 25)))
    res = inner_solve(ffr, TimeGrid(12.0, 25), 2.0, warm)
    assert np.all(np.abs(res.u_star.values) <= ffr.bounds.upper[:, None])


def test_negative_c_rejected(di):
    with pytest.raises(InvalidParameterError):
        inner_solve(di, TimeGrid(1.0, 10), -1.0, zeros(di, 10))


@pytest.mark.parametrize("kw", [
    dict(mu_schedule=()), dict(mu_schedule=(1e-3, 1e-2)), dict(grad_tol=0.0),
    dict(max_iter=0), dict(restarts=-1), dict(method="newton"),
])
def test_config_validation(kw):
    with pytest.raises(InvalidParameterError):
        InnerConfig(**kw)


@settings(max_examples=60)
@given(st.floats(-50, 50), st.floats(1e-8, 10))
def test_huber_brackets_abs(h, mu):
    v = float(huber(h, mu))
    assert abs(h) - 0.5 * mu - 1e-12 <= v <= abs(h) + 1e-12
    assert abs(float(huber_grad(h, mu))) <= 1.0


def test_smoothed_gradient_matches_differences(ffr, rng):
    g = TimeGrid(12.0, 12)
    u = ControlTrajectory(rng.uniform(-0.4, 0.4, (2, 12)))
    _, grad = smoothed_lagrangian_and_gradient(ffr, g, u, 4.0, 1e-2)
    z, e = u.flat(), 1e-6
    fd = [
        (smoothed_lagrangian_and_gradient(ffr, g, ControlTrajectory.from_flat(z + e * d, 2), 4.0, 1e-2)[0]
         - smoothed_lagrangian_and_gradient(ffr, g, ControlTrajectory.from_flat(z - e * d, 2), 4.0, 1e-2)[0])
        / (2 * e)
        for d in np.eye(z.size)
    ]
    np.testing.assert_allclose(grad, fd, atol=1e-7)


def test_lagrangian_value_definition(di, rng):
    g = TimeGrid(1.0, 30)
    u = ControlTrajectory(rng.uniform(-1, 1, (1, 30)))
    phi = 0.5 * g.dt * np.sum(u.values ** 2)
    expect = phi + 3.0 * np.sum(np.abs(residual(di, g, u)))
    assert lagrangian_value(di, g, u, 3.0) == pytest.approx(expect, rel=1e-14)
