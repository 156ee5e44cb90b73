"""Control-constrained optimal control problems with dynamics affine in the control.

Every callable on :class:`OcpModel` broadcasts over leading axes: ``x`` has
shape ``(..., n)`` and ``u`` has shape ``(..., m)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .grid import BoxBounds

MODEL_TAGS = ("double_integrator", "free_flying_robot", "custom")


class InvalidParameterError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OcpModel:
    """Problem ``min int f0(u) dt`` s.t. ``x' = f(x, u)``, ``x(0) = x0``,
    ``x(t_f) = xf`` and ``u`` in ``bounds``.

    ``cost_integrand`` already includes any constant factor of the objective.
    ``linear`` optionally holds ``(A, B)`` with ``f(x, u) = A x + B u``; the
    shooting code uses it to skip the stepwise recursion. ``dynamics_hessian``
    optionally returns the curvature of ``p . f(x, u)`` in ``(x, u)``;
    finite differences of the Jacobians are used without it. ``euler``
    optionally maps ``(dt, U)`` with ``U`` of shape ``(..., N, m)`` to the
    forward-Euler states ``(..., N + 1, n)`` without a Python-level loop.
    """

    n: int
    m: int
    t_f: float
    x0: np.ndarray
    xf: np.ndarray
    bounds: BoxBounds
    dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dynamics_jacobians: Callable[[np.ndarray, np.ndarray], tuple]
    cost_integrand: Callable[[np.ndarray], np.ndarray]
    cost_gradient: Callable[[np.ndarray], np.ndarray]
    cost_hessian: Callable[[np.ndarray], np.ndarray]
    tag: str = "custom"
    params: dict = field(default_factory=dict)
    linear: Optional[tuple] = None
    nonconvex: bool = False
    dynamics_hessian: Optional[Callable] = None
    euler: Optional[Callable] = None

    def __post_init__(self):
        if self.tag not in MODEL_TAGS:
            raise InvalidParameterError(f"unknown model tag {self.tag!r}")
        for name in ("x0", "xf"):
            v = np.array(getattr(self, name), dtype=float).reshape(-1)
            if v.shape != (self.n,):
                raise InvalidParameterError(f"{name} must have length {self.n}")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if self.bounds.m != self.m:
            raise InvalidParameterError("bounds do not match the control dimension")


def make_double_integrator(s0=0.0, sf=0.0, v0=1.0, vf=0.0, a=2.5) -> OcpModel:
    """Unit-mass car on ``[0, 1]``: minimise ``1/2 int u^2`` with ``|u| <= a``."""
    if not a > 0:
        raise InvalidParameterError(f"control bound must be positive, got {a}")
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])

    def dynamics(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return np.stack(np.broadcast_arrays(x[..., 1], u[..., 0]), axis=-1)

    def jacobians(x, u):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        return np.broadcast_to(A, shape + (2, 2)), np.broadcast_to(B, shape + (2, 1))

    def cost(u):
        return 0.5 * np.sum(np.square(u), axis=-1)

    def cost_grad(u):
        return np.array(u, dtype=float)

    def cost_hess(u):
        u = np.asarray(u)
        return np.broadcast_to(np.eye(1), u.shape[:-1] + (1, 1))

    return OcpModel(
        n=2, m=1, t_f=1.0,
        x0=[s0, v0], xf=[sf, vf],
        bounds=BoxBounds.symmetric([a]),
        dynamics=dynamics, dynamics_jacobians=jacobians,
        cost_integrand=cost, cost_gradient=cost_grad, cost_hessian=cost_hess,
        tag="double_integrator",
        params=dict(s0=float(s0), sf=float(sf), v0=float(v0), vf=float(vf), a=float(a)),
        linear=(A, B),
    )


def make_free_flying_robot(x0=None, xf=None, t_f=12.0, u1_max=0.8, u2_max=0.4) -> OcpModel:
    """Planar robot steered by two thrusters, minimising ``int u1^2 + u2^2``.

    States are position (x1, x2), thrust direction x3, velocities (x4, x5)
    and angular velocity x6.
    """
    if x0 is None:
        x0 = [-10.0, -10.0, np.pi / 2, 0.0, 0.0, 0.0]
    if xf is None:
        xf = [0.0] * 6

    def dynamics(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        thrust = u[..., 0] + u[..., 1]
        parts = (
            x[..., 3],
            x[..., 4],
            x[..., 5],
            thrust * np.cos(x[..., 2]),
            thrust * np.sin(x[..., 2]),
            0.2 * (u[..., 0] - u[..., 1]),
        )
        return np.stack(np.broadcast_arrays(*parts), axis=-1)

    def jacobians(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        c = np.broadcast_to(np.cos(x[..., 2]), shape)
        s = np.broadcast_to(np.sin(x[..., 2]), shape)
        thrust = np.broadcast_to(u[..., 0] + u[..., 1], shape)
        fx = np.zeros(shape + (6, 6))
        fx[..., 0, 3] = 1.0
        fx[..., 1, 4] = 1.0
        fx[..., 2, 5] = 1.0
        fx[..., 3, 2] = -thrust * s
        fx[..., 4, 2] = thrust * c
        fu = np.zeros(shape + (6, 2))
        fu[..., 3, 0] = fu[..., 3, 1] = c
        fu[..., 4, 0] = fu[..., 4, 1] = s
        fu[..., 5, 0] = 0.2
        fu[..., 5, 1] = -0.2
        return fx, fu

    def weighted_hessian(x, u, p):
        x, u, p = (np.asarray(v, dtype=float) for v in (x, u, p))
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1], p.shape[:-1])
        c, s = np.cos(x[..., 2]), np.sin(x[..., 2])
        thrust = u[..., 0] + u[..., 1]
        Q = np.zeros(shape + (8, 8))
        Q[..., 2, 2] = -thrust * (p[..., 3] * c + p[..., 4] * s)
        mixed = -p[..., 3] * s + p[..., 4] * c
        for k in (6, 7):
            Q[..., 2, k] = mixed
            Q[..., k, 2] = mixed
        return Q

    def euler(dt, U):
        # the chain x6 -> x3 -> (x4, x5) -> (x1, x2) is triangular, so each
        # coordinate is a running sum taken in the same order as the step loop
        U = np.asarray(U, dtype=float)
        lead = U.shape[:-2]
        X0 = np.broadcast_to(np.asarray(x0, dtype=float), lead + (6,))

        def run(start, incr):
            return np.cumsum(np.concatenate([start[..., None], incr], axis=-1), axis=-1)

        thrust = U[..., 0] + U[..., 1]
        x6 = run(X0[..., 5], dt * (0.2 * (U[..., 0] - U[..., 1])))
        x3 = run(X0[..., 2], dt * x6[..., :-1])
        x4 = run(X0[..., 3], dt * (thrust * np.cos(x3[..., :-1])))
        x5 = run(X0[..., 4], dt * (thrust * np.sin(x3[..., :-1])))
        x1 = run(X0[..., 0], dt * x4[..., :-1])
        x2 = run(X0[..., 1], dt * x5[..., :-1])
        return np.stack([x1, x2, x3, x4, x5, x6], axis=-1)

    def cost(u):
        return np.sum(np.square(u), axis=-1)

    def cost_grad(u):
        return 2.0 * np.asarray(u, dtype=float)

    def cost_hess(u):
        u = np.asarray(u)
        return np.broadcast_to(2.0 * np.eye(2), u.shape[:-1] + (2, 2))

    return OcpModel(
        n=6, m=2, t_f=float(t_f),
        x0=x0, xf=xf,
        bounds=BoxBounds.symmetric([u1_max, u2_max]),
        dynamics=dynamics, dynamics_jacobians=jacobians,
        cost_integrand=cost, cost_gradient=cost_grad, cost_hessian=cost_hess,
        tag="free_flying_robot",
        params=dict(t_f=float(t_f), u1_max=float(u1_max), u2_max=float(u2_max)),
        nonconvex=True,
        dynamics_hessian=weighted_hessian,
        euler=euler,
    )


def make_model(tag: str, **params) -> OcpModel:
    if tag == "double_integrator":
        return make_double_integrator(**params)
    if tag == "free_flying_robot":
        return make_free_flying_robot(**params)
    raise InvalidParameterError(f"no factory for model tag {tag!r}")


def dynamics_jacobian_check(model: OcpModel, x, u, h: float = 1e-5) -> float:
    """Largest entry-wise gap between the analytic Jacobians and central differences."""
    if not h > 0:
        raise InvalidParameterError("finite-difference step must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    fx, fu = model.dynamics_jacobians(x, u)
    fd_x = np.empty((model.n, model.n))
    for k in range(model.n):
        e = np.zeros(model.n)
        e[k] = h
        fd_x[:, k] = (model.dynamics(x + e, u) - model.dynamics(x - e, u)) / (2 * h)
    fd_u = np.empty((model.n, model.m))
    for k in range(model.m):
        e = np.zeros(model.m)
        e[k] = h
        fd_u[:, k] = (model.dynamics(x, u + e) - model.dynamics(x, u - e)) / (2 * h)
    return float(max(np.max(np.abs(fx - fd_x)), np.max(np.abs(fu - fd_u))))
