"""First-order optimality certificates built from the adjoint of the Euler scheme.

For the discretised problem the stationarity condition on interval ``j`` reads
``grad f0(u_j) + f_u(x_j, u_j)^T lam_{j+1} = 0`` on the free coordinates, and the
adjoint obeys ``lam_j = (I + dt f_x(x_j, u_j)^T) lam_{j+1}``. Every adjoint
trajectory is therefore linear in ``lam_N``, so fitting the switching functions
to the interior arcs is a small linear least-squares problem.

With ``lam0 = 1`` and a separable quadratic cost, ``psi = R^{-1} f_u^T lam`` and
the pointwise minimiser of the Hamiltonian is ``clip_law(psi, bound)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .grid import ControlTrajectory, StateTrajectory, TimeGrid
from .models import InvalidParameterError, OcpModel
from .shooting import simulate


class DegenerateArcError(ValueError):
    """Too few interior-arc nodes to pin down the adjoint."""


def clip_law(psi, bound):
    """``-psi`` clamped to ``[-bound, bound]``."""
    bound = np.asarray(bound, dtype=float)
    if np.any(bound <= 0):
        raise InvalidParameterError("bound must be positive")
    return np.clip(-np.asarray(psi, dtype=float), -bound, bound)


@dataclass(frozen=True, eq=False)
class Certificate:
    adjoints: np.ndarray
    switching: np.ndarray
    max_clip_violation: float
    hamiltonian_range: tuple
    fitted_constants: dict
    fit_residual: float
    interior_nodes: int
    inconclusive: bool = False
    sign_agreement: tuple = field(default=())

    def to_dict(self) -> dict:
        return {
            "max_clip_violation": self.max_clip_violation,
            "hamiltonian_range": list(self.hamiltonian_range),
            "fitted_constants": dict(self.fitted_constants),
            "fit_residual": self.fit_residual,
            "interior_nodes": self.interior_nodes,
            "inconclusive": self.inconclusive,
            "sign_agreement": list(self.sign_agreement),
            "adjoints": self.adjoints.tolist(),
            "switching": self.switching.tolist(),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _cost_scale(model: OcpModel, U: np.ndarray) -> np.ndarray:
    R = np.asarray(model.cost_hessian(U), dtype=float)
    diag = np.diagonal(R, axis1=-2, axis2=-1)
    off = R - diag[..., :, None] * np.eye(model.m)
    if np.any(np.abs(off) > 1e-12) or np.any(diag <= 0):
        raise InvalidParameterError("certificates need a separable, strictly convex cost")
    grad = np.asarray(model.cost_gradient(U), dtype=float)
    if not np.allclose(grad, diag * U, rtol=1e-10, atol=1e-12):
        raise InvalidParameterError("certificates need a quadratic cost without linear term")
    return diag


def _adjoint_basis(model: OcpModel, grid: TimeGrid, X: np.ndarray, U: np.ndarray):
    """``M[j]`` with ``lam_j = M[j] @ lam_N``, plus ``f_u`` per interval."""
    fx, fu = model.dynamics_jacobians(X[:-1], U)
    fx = np.broadcast_to(fx, (grid.N, model.n, model.n))
    fu = np.broadcast_to(fu, (grid.N, model.n, model.m))
    M = np.empty((grid.N + 1, model.n, model.n))
    M[-1] = np.eye(model.n)
    eye = np.eye(model.n)
    for j in range(grid.N - 1, -1, -1):
        M[j] = (eye + grid.dt * fx[j].T) @ M[j + 1]
    return M, fu


def hamiltonian_profile(u: ControlTrajectory, states: StateTrajectory, adjoints: np.ndarray,
                        model: OcpModel, grid: TimeGrid) -> np.ndarray:
    """``H_j = f0(u_j) + lam_{j+1} . f(x_j, u_j)`` with ``lam0 = 1``."""
    U = u.values.T
    X = states.values.T
    lam = np.asarray(adjoints, dtype=float)
    if U.shape != (grid.N, model.m) or X.shape != (grid.N + 1, model.n) \
            or lam.shape != (model.n, grid.N + 1):
        raise InvalidParameterError("trajectory and adjoint shapes do not match the grid")
    f = model.dynamics(X[:-1], U)
    return model.cost_integrand(U) + np.einsum("ji,ji->j", lam.T[1:], f)


def certify(model: OcpModel, grid: TimeGrid, u: ControlTrajectory,
            tol_arc: Optional[float] = None, inconclusive_tol: float = 1e-2) -> Certificate:
    """Fit ``lam_N`` to the interior arcs and check the clip law everywhere.

    Nodes with ``|u| < bound - tol_arc`` count as interior; ``tol_arc``
    defaults to ``1e-3`` times each channel's bound.
    """
    if u.values.shape != (model.m, grid.N):
        raise InvalidParameterError("control shape does not match the model and grid")
    if not np.allclose(-model.bounds.lower, model.bounds.upper):
        raise InvalidParameterError("certificates assume symmetric control bounds")
    bound = model.bounds.upper
    tol = 1e-3 * bound if tol_arc is None else np.broadcast_to(float(tol_arc), bound.shape)
    states = simulate(model, grid, u)
    X, U = states.values.T, u.values.T
    scale = _cost_scale(model, U)
    M, fu = _adjoint_basis(model, grid, X, U)
    # psi_j = diag(1/scale_j) fu_j^T M_{j+1} lam_N
    design = np.einsum("jnr,jnk->jrk", fu, M[1:]) / scale[..., None]
    interior = np.abs(U) < bound - tol
    count = int(interior.sum())
    if count < 2:
        raise DegenerateArcError(f"only {count} interior-arc node(s); the solution is fully bang")
    A, b = design[interior], -U[interior]
    lam_N, *_ = np.linalg.lstsq(A, b, rcond=None)
    fit = float(np.max(np.abs(A @ lam_N - b)))
    lam = (M @ lam_N).T
    psi = (design @ lam_N).T
    violation = float(np.max(np.abs(u.values - clip_law(psi, bound[:, None]))))
    H = hamiltonian_profile(u, states, lam, model, grid)
    agree = tuple(float(v) for v in _sign_agreement(u.values, -psi))
    return Certificate(
        adjoints=lam,
        switching=psi,
        max_clip_violation=violation,
        hamiltonian_range=(float(H.min()), float(H.max())),
        fitted_constants=_constants(model, lam),
        fit_residual=fit,
        interior_nodes=count,
        inconclusive=bool(fit > inconclusive_tol * float(bound.max())),
        sign_agreement=agree,
    )


def _sign_agreement(a, b, zero=1e-9):
    sa = np.where(np.abs(a) < zero, 0.0, np.sign(a))
    sb = np.where(np.abs(b) < zero, 0.0, np.sign(b))
    return np.mean(sa == sb, axis=1)


def _constants(model: OcpModel, lam: np.ndarray) -> dict:
    if model.tag == "double_integrator":
        # lam2(t) = -c1 t - c2, so u = c1 t + c2 on interior arcs
        return {"c1": float(lam[0, 0]), "c2": float(-lam[1, 0])}
    if model.tag == "free_flying_robot":
        # lam4(t) = -c1 t + c4, lam5(t) = -c2 t + c5
        return {"c1": float(lam[0, 0]), "c2": float(lam[1, 0]),
                "c4": float(lam[3, 0]), "c5": float(lam[4, 0]),
                "lam3_0": float(lam[2, 0]), "lam6_0": float(lam[5, 0])}
    return {f"lam{i + 1}_0": float(v) for i, v in enumerate(lam[:, 0])}


def certify_double_integrator(u: ControlTrajectory, grid: TimeGrid, model: OcpModel, **kw) -> Certificate:
    if model.tag != "double_integrator":
        raise InvalidParameterError("expected the double integrator model")
    return certify(model, grid, u, **kw)


def certify_free_flying_robot(u: ControlTrajectory, grid: TimeGrid, model: OcpModel, **kw) -> Certificate:
    if model.tag != "free_flying_robot":
        raise InvalidParameterError("expected the free-flying robot model")
    return certify(model, grid, u, **kw)
