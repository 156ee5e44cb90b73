"""Single shooting: forward Euler simulation and the terminal residual ``h(u)``.

The decision vector orders controls interval by interval, so column block
``j`` of the residual Jacobian holds ``d h / d u_j``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .grid import ControlTrajectory, DimensionError, StateTrajectory, TimeGrid
from .models import OcpModel


class SimulationDivergedError(FloatingPointError):
    pass


def _check(model: OcpModel, grid: TimeGrid, u: ControlTrajectory):
    if u.m != model.m or u.N != grid.N:
        raise DimensionError(
            f"control is {u.m}x{u.N}, model/grid expect {model.m}x{grid.N}"
        )


def euler_states(model: OcpModel, dt: float, U: np.ndarray) -> np.ndarray:
    """Explicit Euler states for controls ``U`` of shape ``(..., N, m)``.

    Returns an array of shape ``(..., N + 1, n)``.
    """
    U = np.asarray(U, dtype=float)
    if model.euler is not None:
        with np.errstate(over="ignore", invalid="ignore"):
            X = model.euler(dt, U)
        if not np.all(np.isfinite(X)):
            raise SimulationDivergedError("non-finite state encountered during simulation")
        return X
    N = U.shape[-2]
    X = np.empty(U.shape[:-2] + (N + 1, model.n))
    X[..., 0, :] = model.x0
    x = X[..., 0, :]
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(N):
            x = x + dt * model.dynamics(x, U[..., i, :])
            X[..., i + 1, :] = x
    if not np.all(np.isfinite(X)):
        raise SimulationDivergedError("non-finite state encountered during simulation")
    return X


def simulate(model: OcpModel, grid: TimeGrid, u: ControlTrajectory) -> StateTrajectory:
    _check(model, grid, u)
    X = euler_states(model, grid.dt, u.values.T)
    return StateTrajectory(X.T)


@lru_cache(maxsize=32)
def _linear_terms(model: OcpModel, grid: TimeGrid):
    # x_N = M^N x0 + sum_j M^(N-1-j) dt B u_j with M = I + dt A
    A, B = model.linear
    M = np.eye(model.n) + grid.dt * A
    blocks = np.empty((grid.N, model.n, model.m))
    P = np.eye(model.n)
    for j in range(grid.N - 1, -1, -1):
        blocks[j] = grid.dt * P @ B
        P = P @ M
    J = np.ascontiguousarray(blocks.transpose(1, 0, 2).reshape(model.n, -1))
    J.setflags(write=False)
    free = P @ model.x0
    free.setflags(write=False)
    return free, J


def residual_flat(model: OcpModel, grid: TimeGrid, z: np.ndarray) -> np.ndarray:
    """Terminal mismatch ``x_N - xf`` for a flat control vector."""
    if model.linear is not None:
        free, J = _linear_terms(model, grid)
        r = free + J @ z - model.xf
        if not np.all(np.isfinite(r)):
            raise SimulationDivergedError("non-finite terminal state")
        return r
    X = euler_states(model, grid.dt, z.reshape(grid.N, model.m))
    return X[-1] - model.xf


def residual(model: OcpModel, grid: TimeGrid, u: ControlTrajectory) -> np.ndarray:
    """Boundary residual ``h(u)``: Euler terminal state minus the target state."""
    _check(model, grid, u)
    return residual_flat(model, grid, u.flat())


def residual_and_jacobian_flat(model: OcpModel, grid: TimeGrid, z: np.ndarray):
    if model.linear is not None:
        _, J = _linear_terms(model, grid)
        return residual_flat(model, grid, z), J
    U = z.reshape(grid.N, model.m)
    X = euler_states(model, grid.dt, U)
    fx, fu = model.dynamics_jacobians(X[:-1], U)
    dt = grid.dt
    # Transition products Phi(N, j+1) = prod (I + dt fx_i), accumulated backwards;
    # the resulting columns equal the forward sensitivities S_N.
    blocks = np.empty((grid.N, model.n, model.m))
    P = np.eye(model.n)
    eye = np.eye(model.n)
    for j in range(grid.N - 1, -1, -1):
        blocks[j] = dt * (P @ fu[j])
        P = P @ (eye + dt * fx[j])
    J = blocks.transpose(1, 0, 2).reshape(model.n, -1)
    return X[-1] - model.xf, J


def residual_jacobian(model: OcpModel, grid: TimeGrid, u: ControlTrajectory) -> np.ndarray:
    """Exact Jacobian of the discrete residual, shape ``(n, m * N)``."""
    _check(model, grid, u)
    return np.array(residual_and_jacobian_flat(model, grid, u.flat())[1])


def weighted_residual_gradient(model: OcpModel, grid: TimeGrid, Z: np.ndarray, w: np.ndarray):
    """Gradient of ``w . h(z)`` for a batch of flat controls ``Z`` (shape ``(B, m N)``)."""
    Z = np.atleast_2d(Z)
    U = Z.reshape(Z.shape[0], grid.N, model.m)
    X = euler_states(model, grid.dt, U)
    fx, fu = model.dynamics_jacobians(X[:, :-1], U)
    dt = grid.dt
    p = np.broadcast_to(np.asarray(w, dtype=float), (Z.shape[0], model.n)).copy()
    G = np.empty_like(U)
    for j in range(grid.N - 1, -1, -1):
        G[:, j] = dt * np.einsum("bnm,bn->bm", fu[:, j], p)
        p = p + dt * np.einsum("bnk,bn->bk", fx[:, j], p)
    return G.reshape(Z.shape[0], -1)


def _weighted_second_derivatives(model: OcpModel, X, U, P, step=1e-6):
    """``d^2 (p . f) / d(x, u)^2`` at every step, shape ``(N, n + m, n + m)``."""
    if model.dynamics_hessian is not None:
        return np.asarray(model.dynamics_hessian(X, U, P), dtype=float)
    n, m = model.n, model.m
    Q = np.empty(X.shape[:-1] + (n + m, n + m))
    for k in range(n + m):
        dx = np.zeros(n + m)
        dx[k] = step
        fxp, fup = model.dynamics_jacobians(X + dx[:n], U + dx[n:])
        fxm, fum = model.dynamics_jacobians(X - dx[:n], U - dx[n:])
        gp = np.einsum("...ij,...i->...j", np.concatenate([fxp, fup], -1), P)
        gm = np.einsum("...ij,...i->...j", np.concatenate([fxm, fum], -1), P)
        Q[..., k, :] = (gp - gm) / (2 * step)
    return 0.5 * (Q + np.swapaxes(Q, -1, -2))


def residual_hessian(model: OcpModel, grid: TimeGrid, z: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Hessian of ``w . h(z)`` for the Euler-discretised dynamics.

    Second-order adjoint form: the sum over steps of ``G_i^T Q_i G_i`` with
    ``G_i`` the forward sensitivity of ``(x_i, u_i)`` and ``Q_i`` the
    curvature of ``p_{i+1} . f`` at that step.
    """
    n, m, N, dt = model.n, model.m, grid.N, grid.dt
    nz = N * m
    if model.linear is not None:
        return np.zeros((nz, nz))
    U = z.reshape(N, m)
    X = euler_states(model, dt, U)
    fx, fu = model.dynamics_jacobians(X[:-1], U)
    P = np.empty((N, n))
    p = np.asarray(w, dtype=float).copy()
    for i in range(N - 1, -1, -1):
        P[i] = p
        p = p + dt * (fx[i].T @ p)
    Q = dt * _weighted_second_derivatives(model, X[:-1], U, P)
    Qxx, Qxu, Quu = Q[:, :n, :n], Q[:, :n, n:], Q[:, n:, n:]
    rows = np.flatnonzero(np.any(Q[:, :n, :] != 0, axis=(0, 2)))
    H = np.zeros((nz, nz))
    if rows.size:
        SR = np.zeros((N, rows.size, nz))
        S = np.zeros((n, nz))
        eye = np.eye(n)
        for i in range(N):
            SR[i] = S[rows]
            # columns of later controls are still zero
            S = (eye + dt * fx[i]) @ S
            S[:, i * m:(i + 1) * m] += dt * fu[i]
        W = np.einsum("iab,ibk->iak", Qxx[:, rows][:, :, rows], SR)
        H += SR.reshape(-1, nz).T @ W.reshape(-1, nz)
        cross = np.einsum("iak,iab->ikb", SR, Qxu[:, rows, :])
        for i in range(N):
            H[:, i * m:(i + 1) * m] += cross[i]
            H[i * m:(i + 1) * m, :] += cross[i].T
    idx = np.arange(N)[:, None] * m + np.arange(m)
    H[idx[:, :, None], idx[:, None, :]] += Quu
    return 0.5 * (H + H.T)
