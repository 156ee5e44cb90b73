import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdpocp.grid import ControlTrajectory, TimeGrid
from pdpocp.shooting import (
    SimulationDivergedError, residual, residual_hessian, residual_jacobian, simulate,
    weighted_residual_gradient,
)

from conftest import di_rhs, euler_reference, ffr_rhs


def test_simulation_matches_reference_loop(ffr, rng):
    g = TimeGrid(12.0, 30)
    U = rng.uniform(-0.4, 0.4, (30, 2))
    ref = euler_reference(ffr_rhs, ffr.x0, U, g.dt)
    np.testing.assert_allclose(simulate(ffr, g, ControlTrajectory(U.T)).values.T, ref, rtol=1e-13, atol=1e-13)


def test_linear_fast_path_matches_loop(di, rng):
    g = TimeGrid(1.0, 40)
    U = rng.uniform(-2.5, 2.5, (40, 1))
    ref = euler_reference(di_rhs, di.x0, U, g.dt)
    np.testing.assert_allclose(residual(di, g, ControlTrajectory(U.T)), ref[-1] - di.xf, atol=1e-13)


@pytest.mark.parametrize("N", [10, 100, 1000])
def test_double_integrator_residual_closed_forms(di, N):
    g = TimeGrid(1.0, N)
    np.testing.assert_allclose(residual(di, g, ControlTrajectory(np.zeros((1, N)))), [1.0, 1.0], atol=1e-12)
    # u = -1: x1(1) = 1/2 + 1/(2N) under forward Euler
    h = residual(di, g, ControlTrajectory(-np.ones((1, N))))
    np.testing.assert_allclose(h, [0.5 + 0.5 / N, 0.0], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_double_integrator_residual_is_affine(di, seed, a, b):
    g = TimeGrid(1.0, 12)
    r = np.random.default_rng(seed)
    u, v = r.normal(size=(1, 12)), r.normal(size=(1, 12))
    h0 = residual(di, g, ControlTrajectory(np.zeros((1, 12))))
    lhs = residual(di, g, ControlTrajectory(a * u + b * v)) - h0
    rhs = a * (residual(di, g, ControlTrajectory(u)) - h0) + b * (residual(di, g, ControlTrajectory(v)) - h0)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def _fd_jacobian(model, grid, u, e=1e-6):
    z = u.flat()
    cols = []
    for k in range(z.size):
        d = np.zeros_like(z)
        d[k] = e
        hp = residual(model, grid, ControlTrajectory.from_flat(z + d, model.m))
        hm = residual(model, grid, ControlTrajectory.from_flat(z - d, model.m))
        cols.append((hp - hm) / (2 * e))
    return np.stack(cols, axis=1)


@pytest.mark.parametrize("tag", ["di", "ffr"])
def test_jacobian_matches_differences(tag, request, rng):
    model = request.getfixturevalue(tag)
    g = TimeGrid(model.t_f, 15)
    u = ControlTrajectory(rng.uniform(-0.4, 0.4, (model.m, 15)))
    np.testing.assert_allclose(residual_jacobian(model, g, u), _fd_jacobian(model, g, u), atol=1e-7)


def test_weighted_gradient_batches(ffr, rng):
    g = TimeGrid(12.0, 9)
    Z = rng.uniform(-0.4, 0.4, (3, 18))
    w = rng.normal(size=(3, 6))
    G = weighted_residual_gradient(ffr, g, Z, w)
    for k in range(3):
        J = residual_jacobian(ffr, g, ControlTrajectory.from_flat(Z[k], 2))
        np.testing.assert_allclose(G[k], J.T @ w[k], atol=1e-12)


def test_residual_hessian_matches_differences(ffr, rng):
    g = TimeGrid(12.0, 8)
    z = rng.uniform(-0.4, 0.4, 16)
    w = rng.normal(size=6)
    H = residual_hessian(ffr, g, z, w)
    e = 1e-6

    def grad(z):
        return residual_jacobian(ffr, g, ControlTrajectory.from_flat(z, 2)).T @ w

    fd = np.stack([(grad(z + e * d) - grad(z - e * d)) / (2 * e) for d in np.eye(16)])
    np.testing.assert_allclose(H, fd, atol=1e-6)
    np.testing.assert_array_equal(H, H.T)


def test_linear_model_hessian_vanishes(di):
    assert not np.any(residual_hessian(di, TimeGrid(1.0, 5), np.ones(5), np.ones(2)))


def test_divergence_is_reported():
    from pdpocp.models import OcpModel
    from pdpocp.grid import BoxBounds

    blow = OcpModel(
        n=1, m=1, t_f=1.0, x0=[1.0], xf=[0.0], bounds=BoxBounds.symmetric([1.0]),
        dynamics=lambda x, u: np.exp(np.minimum(x, 700.0)) * 1e300,
        dynamics_jacobians=lambda x, u: (np.ones(x.shape + (1,)), np.zeros(x.shape[:-1] + (1, 1))),
        cost_integrand=lambda u: np.sum(u ** 2, -1), cost_gradient=lambda u: 2 * u,
        cost_hessian=lambda u: 2 * np.ones(u.shape + (1,)),
    )
    with pytest.raises(SimulationDivergedError):
        simulate(blow, TimeGrid(1.0, 4), ControlTrajectory(np.zeros((1, 4))))
