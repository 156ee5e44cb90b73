"""Minimisation of the exact penalty ``phi(u) + c ||h(u)||_1`` over the control box.

Two globalisations are available, both finished by an active-set SQP polish
on the unsmoothed problem, whose optimality measure sets ``converged``:

``"trust-region"`` (default)
    Each step minimises ``g.d + 1/2 d.D d + c ||h + J d||_1`` over the box
    intersected with an infinity-norm trust region, ``D`` being the diagonal
    of the cost Hessian. The subproblem is solved through its dual, which
    has one bounded variable per residual component.

``"smoothing"``
    ``||h||_1`` is replaced by a Huber function whose width ``mu`` follows a
    decreasing schedule; each width is minimised by projected L-BFGS.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import ControlTrajectory, DimensionError, TimeGrid, project_box
from .models import InvalidParameterError, OcpModel
from .shooting import (
    SimulationDivergedError,
    residual_and_jacobian_flat,
    residual_flat,
    residual_hessian,
)

log = logging.getLogger(__name__)

DEFAULT_MU_SCHEDULE = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)
METHODS = ("trust-region", "smoothing")


@dataclass(frozen=True)
class InnerConfig:
    mu_schedule: tuple = DEFAULT_MU_SCHEDULE
    grad_tol: float = 1e-8
    max_iter: int = 1000
    memory: int = 10
    restarts: int = 4
    perturbation: float = 0.25
    seed: int = 0
    polish_iter: int = 30
    method: str = "trust-region"

    def __post_init__(self):
        mus = tuple(float(v) for v in self.mu_schedule)
        if not mus or any(not v > 0 for v in mus):
            raise InvalidParameterError("mu_schedule must be non-empty and positive")
        if any(b >= a for a, b in zip(mus, mus[1:])):
            raise InvalidParameterError("mu_schedule must be strictly decreasing")
        object.__setattr__(self, "mu_schedule", mus)
        if not self.grad_tol > 0:
            raise InvalidParameterError("grad_tol must be positive")
        if self.max_iter < 1 or self.memory < 1 or self.restarts < 0 or self.polish_iter < 1:
            raise InvalidParameterError("iteration caps and memory must be >= 1, restarts >= 0")
        if not self.perturbation >= 0:
            raise InvalidParameterError("perturbation must be non-negative")
        if self.method not in METHODS:
            raise InvalidParameterError(f"method must be one of {METHODS}, got {self.method!r}")


@dataclass(frozen=True, eq=False)
class InnerResult:
    u_star: ControlTrajectory
    lagrangian_value: float
    phi_value: float
    residual: np.ndarray
    converged: bool
    inner_iterations: int
    kkt_residual: float = np.inf
    multipliers: np.ndarray = field(default=None, repr=False)
    restart_index: int = 0


# ----------------------------------------------------------------------------
# problem adaptor


class ShootingProblem:
    """Flat-vector view of a model on a grid, as consumed by the minimisers."""

    sparse = False

    def __init__(self, model: OcpModel, grid: TimeGrid):
        self.model = model
        self.grid = grid
        self.size = grid.N * model.m
        self.lower = np.tile(model.bounds.lower, grid.N)
        self.upper = np.tile(model.bounds.upper, grid.N)

    def _U(self, z):
        return z.reshape(self.grid.N, self.model.m)

    def phi(self, z):
        return float(self.grid.dt * np.sum(self.model.cost_integrand(self._U(z))))

    def phi_grad(self, z):
        return self.grid.dt * np.asarray(self.model.cost_gradient(self._U(z))).reshape(-1)

    def phi_hessian(self, z):
        blocks = self.grid.dt * np.asarray(self.model.cost_hessian(self._U(z)))
        return scipy.linalg.block_diag(*blocks)

    def phi_hess_diag(self, z):
        blocks = self.grid.dt * np.asarray(self.model.cost_hessian(self._U(z)))
        return np.diagonal(blocks, axis1=-2, axis2=-1).reshape(-1).copy()

    def residual(self, z):
        return residual_flat(self.model, self.grid, z)

    def residual_jacobian(self, z):
        return residual_and_jacobian_flat(self.model, self.grid, z)

    def constraint_hessian(self, z, w):
        return residual_hessian(self.model, self.grid, z, w)


# ----------------------------------------------------------------------------
# penalty pieces


def huber(h, mu):
    a = np.abs(h)
    return np.where(a <= mu, 0.5 * np.square(h) / mu, a - 0.5 * mu)


def huber_grad(h, mu):
    return np.clip(np.asarray(h) / mu, -1.0, 1.0)


def _check_dims(model: OcpModel, grid: TimeGrid, u: ControlTrajectory):
    if u.m != model.m or u.N != grid.N:
        raise DimensionError(f"control is {u.m}x{u.N}, expected {model.m}x{grid.N}")


def lagrangian_value(model: OcpModel, grid: TimeGrid, u: ControlTrajectory, c: float) -> float:
    """``phi(u) + c ||h(u)||_1`` for a control already inside the box."""
    if c < 0:
        raise InvalidParameterError(f"penalty parameter must be non-negative, got {c}")
    _check_dims(model, grid, u)
    prob = ShootingProblem(model, grid)
    return _exact(prob, u.flat(), c)[0]


def smoothed_lagrangian_and_gradient(model, grid, u, c, mu):
    """Huber-smoothed penalty value and its gradient over the flat controls."""
    if not mu > 0:
        raise InvalidParameterError("smoothing width must be positive")
    _check_dims(model, grid, u)
    prob = ShootingProblem(model, grid)
    value, grad, _, _ = _smoothed(prob, u.flat(), c, mu)
    return value, grad


def _smoothed(prob, z, c, mu):
    h, J = prob.residual_jacobian(z)
    value = prob.phi(z) + c * float(np.sum(huber(h, mu)))
    grad = prob.phi_grad(z) + c * (J.T @ huber_grad(h, mu))
    return value, np.asarray(grad).reshape(-1), h, J


def _exact(prob, z, c, h=None):
    if h is None:
        h = prob.residual(z)
    return prob.phi(z) + c * float(np.sum(np.abs(h))), h


# ----------------------------------------------------------------------------
# smoothing continuation with projected L-BFGS


class _BasePreconditioner:
    """Applies ``(D + (c/mu) J_Q^T J_Q)^-1`` restricted to the free variables.

    ``D`` is the diagonal of the cost Hessian and ``Q`` the residuals inside
    the quadratic Huber zone; this is the curvature the memory pairs would
    otherwise have to discover at every smoothing level.
    """

    def __init__(self, prob, d):
        self.sparse = getattr(prob, "sparse", False)
        floor = 1e-8 * max(float(np.max(d)), 1.0) if d.size else 1.0
        self.dreg = np.where(d > floor, d, floor)

    def apply(self, q, free, J, h, c, mu):
        dinv = np.where(free, 1.0 / self.dreg, 0.0)
        quad = np.abs(h) <= mu
        if c == 0 or not np.any(quad):
            return dinv * q
        weight = c / mu
        if self.sparse:
            Jq = J[np.flatnonzero(quad)] @ sp.diags(free.astype(float))
            B = sp.diags(np.where(free, self.dreg, 1.0)) + weight * (Jq.T @ Jq)
            return np.where(free, spla.spsolve(B.tocsc(), q * free), 0.0)
        Jq = J[quad] * free
        t = dinv * q
        small = np.eye(Jq.shape[0]) / weight + (Jq * dinv) @ Jq.T
        corr = np.linalg.solve(small, Jq @ t)
        return t - dinv * (Jq.T @ corr)


def _projected_lbfgs(prob, z, c, mu, tol, max_iter, memory, precond, trace=None):
    lo, hi = prob.lower, prob.upper
    f, g, h, J = _smoothed(prob, z, c, mu)
    S, Y = deque(maxlen=memory), deque(maxlen=memory)
    it = 0
    for it in range(1, max_iter + 1):
        pg = z - np.clip(z - g, lo, hi)
        if np.max(np.abs(pg)) <= tol:
            it -= 1
            break
        free = ~(((z <= lo) & (g > 0)) | ((z >= hi) & (g < 0)))
        q = np.where(free, g, 0.0)
        alphas, rhos = [], []
        for s, y in zip(reversed(S), reversed(Y)):
            sf, yf = s * free, y * free
            sy = sf @ yf
            if sy <= 1e-16 * np.linalg.norm(sf) * np.linalg.norm(yf) or sy <= 0:
                alphas.append(None)
                rhos.append(None)
                continue
            rho = 1.0 / sy
            a = rho * (sf @ q)
            q = q - a * yf
            alphas.append(a)
            rhos.append(rho)
        r = precond.apply(q, free, J, h, c, mu)
        for (s, y), a, rho in zip(zip(S, Y), reversed(alphas), reversed(rhos)):
            if a is None:
                continue
            sf, yf = s * free, y * free
            r = r + sf * (a - rho * (yf @ r))
        d = -np.where(free, r, 0.0)
        if not g @ d < 0:
            S.clear()
            Y.clear()
            d = -precond.apply(np.where(free, g, 0.0), free, J, h, c, mu)
            if not g @ d < 0:
                d = -np.where(free, g, 0.0)
        alpha = 1.0
        accepted = False
        for _ in range(60):
            zn = np.clip(z + alpha * d, lo, hi)
            step = zn - z
            dec = g @ step
            if not np.any(step):
                break
            try:
                fn, gn, hn, Jn = _smoothed(prob, zn, c, mu)
            except SimulationDivergedError:
                alpha *= 0.1
                continue
            if fn <= f + 1e-4 * dec:
                accepted = True
                break
            # safeguarded quadratic interpolation along the arc
            denom = 2.0 * (fn - f - dec)
            trial = -dec / denom if denom > 0 else 0.5
            alpha *= min(0.5, max(0.1, trial))
        if not accepted:
            if S:
                S.clear()
                Y.clear()
                continue
            break
        s, y = zn - z, gn - g
        if s @ y > 1e-12 * (y @ y):
            S.append(s)
            Y.append(y)
        if trace is not None:
            trace.append((mu, fn, _exact(prob, zn, c, hn)[0]))
        z, f, g, h, J = zn, fn, gn, hn, Jn
    return z, it


# ----------------------------------------------------------------------------
# trust-region steps on the exact penalty


def _l1_step(g, D, J, h, a, b, c, y0):
    """Minimise ``g.d + 1/2 d.D d + c ||h + J d||_1`` over ``a <= d <= b``.

    With ``y`` in ``[-c, c]`` dual to the norm, the inner minimisation in ``d``
    is a clip, so the dual is a smooth bound-constrained problem in ``y``.
    Returns ``(d, y)``.
    """

    def negdual(y):
        q = g + J.T @ y
        d = np.clip(-q / D, a, b)
        return -(y @ h + 0.5 * d @ (D * d) + q @ d), -(h + J @ d)

    res = scipy.optimize.minimize(
        negdual, y0, jac=True, method="L-BFGS-B", bounds=[(-c, c)] * h.size,
        options=dict(ftol=1e-15, gtol=1e-13, maxiter=500),
    )
    y = res.x
    return np.clip(-(g + J.T @ y) / D, a, b), y


def _trust_region(prob, z, c, cfg: InnerConfig, trace=None):
    """Trust-region descent on the exact penalty, handing over to the polish.

    Returns ``(z, kkt, multipliers, iterations)``.
    """
    lo, hi = prob.lower, prob.upper
    h, J = prob.residual_jacobian(z)
    f = _exact(prob, z, c, h)[0]
    y = np.zeros(h.size)
    delta = 0.1 * float(np.min(hi - lo))
    last_try = np.inf
    polished = None
    it = 0
    for it in range(1, cfg.max_iter + 1):
        D = prob.phi_hess_diag(z)
        D = np.maximum(D, 1e-8 * max(float(np.max(D)), 1.0))
        g = prob.phi_grad(z)
        d, y = _l1_step(g, D, J, h, np.maximum(lo - z, -delta), np.minimum(hi - z, delta), c, y)
        Jd = np.asarray(J @ d).reshape(-1)
        pred = -(g @ d + 0.5 * d @ (D * d) + c * (np.sum(np.abs(h + Jd)) - np.sum(np.abs(h))))
        scale = 1.0 + abs(f)
        if pred <= 1e-15 * scale:
            break
        # the polish converges quadratically once the pieces of |h| are identified
        if pred <= 1e-6 * scale and pred <= 1e-2 * last_try:
            last_try = pred
            polished = _polish(prob, z, c, _zone_from(h, y, c), y, cfg.grad_tol, cfg.polish_iter)
            if polished[1] <= cfg.grad_tol:
                return polished[0], polished[1], polished[2], it + polished[3]
        zn = np.clip(z + d, lo, hi)
        try:
            hn = prob.residual(zn)
        except SimulationDivergedError:
            delta = 0.25 * float(np.max(np.abs(d)))
            continue
        fn = _exact(prob, zn, c, hn)[0]
        rho = (f - fn) / pred
        if rho > 0.1:
            z, f = zn, fn
            h, J = prob.residual_jacobian(z)
            if trace is not None:
                trace.append((0.0, fn, fn))
            if rho > 0.75 and np.max(np.abs(d)) > 0.99 * delta:
                delta *= 2.0
        else:
            delta = 0.25 * float(np.max(np.abs(d)))
            if delta < 1e-15:
                break
    out = _polish(prob, z, c, _zone_from(h, y, c), y, cfg.grad_tol, cfg.polish_iter)
    if polished is not None and polished[1] < out[1]:
        out = polished
    return out[0], out[1], out[2], it + out[3]


def _zone_from(h, y, c):
    # a multiplier strictly inside (-c, c) says the residual is driven to zero
    return (np.abs(y) < c * (1 - 1e-6)) | (h == 0)


# ----------------------------------------------------------------------------
# exact active-set SQP polish


def _sub(H, rows, cols):
    if sp.issparse(H):
        return H[rows][:, cols]
    return H[np.ix_(rows, cols)]


def _kkt_solve(H, A, r1, r2, sparse):
    k = A.shape[0]
    if sparse:
        K = sp.bmat([[H, A.T], [A, None]], format="csc") if k else sp.csc_matrix(H)
        sol = spla.spsolve(K, np.concatenate([r1, r2]))
    else:
        K = np.block([[H, A.T], [A, np.zeros((k, k))]]) if k else H
        sol = scipy.linalg.solve(K, np.concatenate([r1, r2]), assume_a="sym", check_finite=False)
    return sol[: H.shape[0]], sol[H.shape[0]:]


def _eq_box_qp(H, g, A, b, dlo, dhi, sparse, max_sweeps=50):
    """``min 1/2 d.H d + g.d`` s.t. ``A d = b``, ``dlo <= d <= dhi``.

    Primal-dual active-set sweeps; returns ``(d, nu, settled)`` where ``nu``
    multiplies the equality rows.
    """
    n = g.size
    state = np.zeros(n, dtype=np.int8)
    state[(dlo >= 0) & (g > 0)] = -1
    state[(dhi <= 0) & (g < 0)] = 1
    for _ in range(max_sweeps):
        fixed = np.flatnonzero(state != 0)
        F = np.flatnonzero(state == 0)
        d = np.zeros(n)
        d[state < 0] = dlo[state < 0]
        d[state > 0] = dhi[state > 0]
        r1 = -(g[F] + _sub(H, F, fixed) @ d[fixed])
        r2 = b - A[:, fixed] @ d[fixed]
        dF, nu = _kkt_solve(_sub(H, F, F), A[:, F], r1, r2, sparse)
        if not (np.all(np.isfinite(dF)) and np.all(np.isfinite(nu))):
            raise np.linalg.LinAlgError("singular QP system")
        d[F] = dF
        r = H @ d + g + A.T @ nu
        new = state.copy()
        new[(state < 0) & (r < 0)] = 0
        new[(state > 0) & (r > 0)] = 0
        new[(state == 0) & (d < dlo)] = -1
        new[(state == 0) & (d > dhi)] = 1
        if np.array_equal(new, state):
            return d, nu, True
        state = new
    return np.clip(d, dlo, dhi), nu, False


def _kkt_measure(prob, z, c, h, J, grad_phi, zone, sign, nu, feas_tol):
    w = np.where(zone, nu, c * sign)
    gL = grad_phi + np.asarray(J.T @ w).reshape(-1)
    pg = z - np.clip(z - gL, prob.lower, prob.upper)
    bad = 0.0
    if np.any(zone):
        bad = max(bad, float(np.max(np.abs(h[zone]))) - feas_tol)
        bad = max(bad, float(np.max(np.abs(nu[zone]))) - c * (1 + 1e-12))
    if np.any(~zone & (np.sign(h) != sign)):
        bad = np.inf
    return float(np.max(np.abs(pg))) + max(bad, 0.0), w


def _polish(prob, z, c, zone, nu, grad_tol, max_iter):
    """Sequential quadratic steps on ``phi + c ||h||_1`` from a near-minimiser.

    Residuals in ``zone`` are held at zero by equality constraints with
    multipliers ``nu``; the others keep their sign. Accepted steps never
    increase the exact penalty. Returns ``(z, kkt, multipliers, iterations)``.
    """
    lo, hi = prob.lower, prob.upper
    h, J = prob.residual_jacobian(z)
    m1 = h.size
    zone = np.asarray(zone, bool) & (c > 0)
    sign = np.where(zone, 0.0, np.sign(np.where(h == 0, nu, h)))
    nu = np.where(zone, np.clip(nu, -c, c), 0.0)
    feas_tol = 1e-10
    merit = _exact(prob, z, c, h)[0]
    best = None
    tau = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        gphi = prob.phi_grad(z)
        kkt, w = _kkt_measure(prob, z, c, h, J, gphi, zone, sign, nu, feas_tol)
        if best is None or kkt < best[1]:
            best = (z.copy(), kkt, w.copy())
        if kkt <= grad_tol:
            break
        H = prob.phi_hessian(z)
        if c > 0:
            H = H + prob.constraint_hessian(z, w)
        if prob.sparse:
            H = sp.csr_matrix(H)
        g_fixed = gphi + np.asarray(J.T @ np.where(zone, 0.0, c * sign)).reshape(-1)
        Jz = (sp.csr_matrix(J) if prob.sparse else J)[np.flatnonzero(zone)]
        eye = sp.identity(z.size, format="csr") if prob.sparse else np.eye(z.size)
        scale = max(1.0, float(np.max(np.abs(prob.phi_hess_diag(z)))))
        d = None
        for _ in range(14):
            Hreg = H + tau * eye if tau else H
            try:
                dd, nu_z, _ = _eq_box_qp(Hreg, g_fixed, Jz, -h[zone], lo - z, hi - z, prob.sparse)
            except (np.linalg.LinAlgError, RuntimeError):
                dd = None
            if dd is not None and (dd @ (Hreg @ dd) > 1e-12 * (dd @ dd) or not np.any(dd)):
                d = dd
                break
            tau = max(10 * tau, 1e-8 * scale)
        if d is None:
            break
        tau *= 0.1
        new_nu = np.zeros(m1)
        new_nu[zone] = nu_z
        # residuals whose multiplier left [-c, c] are released with that sign
        over = zone & (np.abs(new_nu) > c * (1 + 1e-9))
        if np.any(over):
            sign = np.where(over, np.sign(new_nu), sign)
            zone = zone & ~over
            nu = np.where(zone, np.clip(new_nu, -c, c), 0.0)
            continue
        accepted = False
        alpha = 1.0
        for _ in range(30):
            zn = np.clip(z + alpha * d, lo, hi)
            try:
                hn = prob.residual(zn)
            except SimulationDivergedError:
                alpha *= 0.5
                continue
            mn = _exact(prob, zn, c, hn)[0]
            if mn <= merit + 1e-12 * max(1.0, abs(merit)):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        z = zn
        h, J = prob.residual_jacobian(z)
        merit = mn
        nu = new_nu
        flipped = ~zone & (np.sign(h) != sign)
        if np.any(flipped):
            zone = zone | flipped
            sign = np.where(zone, 0.0, sign)
            nu = np.where(flipped, 0.0, nu)
    gphi = prob.phi_grad(z)
    kkt, w = _kkt_measure(prob, z, c, h, J, gphi, zone, sign, nu, feas_tol)
    if best is not None and best[1] < kkt:
        z, kkt, w = best
    return z, kkt, w, it


# ----------------------------------------------------------------------------
# driver


def _smoothing(prob, z, c, cfg: InnerConfig, trace=None):
    precond = _BasePreconditioner(prob, prob.phi_hess_diag(z))
    total = 0
    for mu in cfg.mu_schedule:
        tol = max(cfg.grad_tol, mu)
        z, its = _projected_lbfgs(prob, z, c, mu, tol, cfg.max_iter, cfg.memory, precond, trace)
        total += its
    h = prob.residual(z)
    mu = cfg.mu_schedule[-1]
    zp, kkt, w, its = _polish(prob, z, c, np.abs(h) <= mu, c * huber_grad(h, mu),
                              cfg.grad_tol, cfg.polish_iter)
    return zp, kkt, w, total + its


def minimize_penalty(prob, c, z0, cfg: InnerConfig, trace=None):
    """Single-start minimisation of the exact penalty over the box.

    ``trace`` collects ``(level, smoothed value, exact value)`` for every
    accepted step (``level`` is the Huber width, or 0 for trust-region steps).
    Returns ``(z, exact_value, phi, h, converged, iterations, kkt, multipliers)``.
    """
    z = np.clip(np.asarray(z0, dtype=float), prob.lower, prob.upper)
    if cfg.method == "smoothing":
        z, kkt, w, its = _smoothing(prob, z, c, cfg, trace)
    else:
        z, kkt, w, its = _trust_region(prob, z, c, cfg, trace)
    value, h = _exact(prob, z, c)
    return z, value, prob.phi(z), h, kkt <= cfg.grad_tol, its, kkt, w


def start_points(prob, z0, c, cfg: InnerConfig, nonconvex: bool, restarts: int):
    """Warm start followed by Philox-seeded perturbations of it (nonconvex models only)."""
    yield 0, z0
    if not nonconvex:
        return
    key = int(np.float64(c).view(np.uint64))
    half = 0.5 * (prob.upper - prob.lower)
    for r in range(1, restarts + 1):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, key, r])))
        yield r, z0 + cfg.perturbation * half * rng.uniform(-1.0, 1.0, z0.size)


def inner_solve(model: OcpModel, grid: TimeGrid, c: float, warm_start: ControlTrajectory,
                cfg: InnerConfig = InnerConfig(), restarts: int | None = None,
                trace=None) -> InnerResult:
    """Approximate ``argmin`` of ``phi(u) + c ||h(u)||_1`` over the control box.

    Nonconvex models are also started from perturbed warm starts; the lowest
    exact value wins, ties going to the lower ``phi`` and then the lower
    restart index.
    """
    if c < 0:
        raise InvalidParameterError(f"penalty parameter must be non-negative, got {c}")
    _check_dims(model, grid, warm_start)
    prob = ShootingProblem(model, grid)
    z0 = project_box(warm_start, model.bounds).flat()
    if restarts is None:
        restarts = cfg.restarts
    best = None
    for idx, start in start_points(prob, z0, c, cfg, model.nonconvex, restarts):
        try:
            out = minimize_penalty(prob, c, start, cfg, trace if idx == 0 else None)
        except SimulationDivergedError:
            if idx == 0:
                raise
            log.debug("restart %d diverged", idx)
            continue
        key = (out[1], out[2], idx)
        if best is None or key < best[0]:
            best = (key, idx, out)
    _, idx, (z, value, phi, h, converged, its, kkt, w) = best
    return InnerResult(
        u_star=ControlTrajectory.from_flat(z, model.m),
        lagrangian_value=value,
        phi_value=phi,
        residual=h,
        converged=bool(converged),
        inner_iterations=int(its),
        kkt_residual=float(kkt),
        multipliers=w,
        restart_index=idx,
    )
