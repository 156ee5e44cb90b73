"""Reproduction harness: dual sweeps, N-sweeps, success-rate studies,
iterate dumps and a full-transcription baseline."""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.optimize
import scipy.sparse as sp
from scipy.optimize import Bounds, NonlinearConstraint

from .grid import ControlTrajectory, StateTrajectory, TimeGrid, norm_inf
from .inner import InnerConfig, inner_solve
from .models import InvalidParameterError, OcpModel, make_model
from .pdp import PdpConfig, PdpResult, PdpStatus, reference_config, pdp_run
from .shooting import SimulationDivergedError, _weighted_second_derivatives

KINDS = ("dual_sweep", "n_sweep", "success_rate", "iterate_dump", "baseline")
COMPARISON_COLUMNS = (
    "N", "success_rate_pdp1", "success_rate_pdp2", "success_rate_baseline",
    "mean_time_pdp1", "mean_time_pdp2", "mean_time_baseline_all", "mean_time_baseline_success",
)
DEFAULT_INIT_RANGE = (-0.4, 0.4)


class HistoryUnavailableError(RuntimeError):
    """The run was made without keeping per-iteration controls."""


def run_rng(seed: int, run: int) -> np.random.Generator:
    """Counter-based generator for run ``run`` of a study seeded with ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(run)])))


def _map(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ----------------------------------------------------------------------------
# dual sweep


@dataclass(frozen=True, eq=False)
class SweepPoint:
    c: float
    q: float
    phi: float
    h_l1: float
    h_linf: float
    converged: bool
    u: ControlTrajectory = field(repr=False)


def dual_sweep(model: OcpModel, grid: TimeGrid, c_values: Sequence[float],
               inner: InnerConfig = InnerConfig(),
               u_init: Optional[ControlTrajectory] = None) -> list:
    """``q(c)`` on an increasing grid of ``c``, each solve warm-started from the last."""
    c_values = [float(c) for c in c_values]
    if not c_values:
        raise InvalidParameterError("c grid is empty")
    if any(c < 0 for c in c_values):
        raise InvalidParameterError("c values must be non-negative")
    if any(b <= a for a, b in zip(c_values, c_values[1:])):
        raise InvalidParameterError("c grid must be strictly increasing")
    warm = u_init if u_init is not None else ControlTrajectory(np.zeros((model.m, grid.N)))
    points = []
    for c in c_values:
        res = inner_solve(model, grid, c, warm, inner)
        h = res.residual
        points.append(SweepPoint(c, res.lagrangian_value, res.phi_value,
                                 float(np.sum(np.abs(h))), norm_inf(h), res.converged, res.u_star))
        warm = res.u_star
    return points


# ----------------------------------------------------------------------------
# N-sweep


def resample(u: ControlTrajectory, t_f: float, N_target: int) -> np.ndarray:
    """Piecewise-constant ``u`` read off at the midpoints of a finer uniform grid."""
    mid = (np.arange(N_target) + 0.5) * (t_f / N_target)
    idx = np.minimum((mid / (t_f / u.N)).astype(int), u.N - 1)
    return u.values[:, idx]


@dataclass(frozen=True, eq=False)
class NSweepReport:
    N_values: tuple
    results: tuple = field(repr=False)
    distances: tuple
    channel_distances: tuple

    @property
    def statuses(self):
        return tuple(r.status for r in self.results)


def n_sweep(model: OcpModel, N_values: Sequence[int], cfg: PdpConfig,
            u_init=None, threads: int = 1) -> NSweepReport:
    """Run PDP per ``N`` and measure sup-norm distances to the largest-``N`` control.

    ``u_init`` is an optional callable ``N -> ControlTrajectory``.
    """
    N_values = tuple(int(N) for N in N_values)
    if any(N < 2 for N in N_values):
        raise InvalidParameterError("every N must be >= 2")
    if any(b <= a for a, b in zip(N_values, N_values[1:])):
        raise InvalidParameterError("N values must be strictly increasing")

    def one(N):
        return pdp_run(model, TimeGrid(model.t_f, N), cfg, u_init(N) if u_init else None)

    results = tuple(_map(one, N_values, threads))
    ref = results[-1].final_u.values
    Nref = N_values[-1]
    chan = tuple(
        tuple(float(v) for v in np.max(np.abs(resample(r.final_u, model.t_f, Nref) - ref), axis=1))
        for r in results
    )
    return NSweepReport(N_values, results, tuple(max(c) for c in chan), chan)


# ----------------------------------------------------------------------------
# success-rate studies


@dataclass(frozen=True)
class RunRecord:
    run: int
    converged: bool
    status: str
    outer_iterations: int
    wall_time: float
    phi: float
    h_linf: float
    terminal_error: float


@dataclass(frozen=True, eq=False)
class ExperimentReport:
    records: tuple

    @property
    def success_rate(self) -> float:
        if not self.records:
            return 0.0
        return 100.0 * sum(r.converged for r in self.records) / len(self.records)

    @property
    def mean_time_all(self) -> float:
        return float(np.mean([r.wall_time for r in self.records])) if self.records else float("nan")

    @property
    def mean_time_success(self) -> float:
        ok = [r.wall_time for r in self.records if r.converged]
        return float(np.mean(ok)) if ok else float("nan")


def _pdp_record(model, grid, cfg, run, u0) -> RunRecord:
    res = pdp_run(model, grid, cfg, u0)
    last = res.iterates[-1]
    err = norm_inf(res.final_states.terminal - model.xf)
    return RunRecord(run, res.converged, res.status.value, res.outer_iterations,
                     res.wall_time, last.phi, last.h_linf, err)


def random_controls(model: OcpModel, grid: TimeGrid, rng: np.random.Generator,
                    init_range=DEFAULT_INIT_RANGE) -> ControlTrajectory:
    lo, hi = init_range
    u = rng.uniform(lo, hi, (model.m, grid.N))
    return ControlTrajectory(np.clip(u, model.bounds.lower[:, None], model.bounds.upper[:, None]))


def success_rate_study(model: OcpModel, grid: TimeGrid, runs: int, seed: int, cfg: PdpConfig,
                       init_range=DEFAULT_INIT_RANGE, threads: int = 1,
                       stop_on_failure: bool = False) -> ExperimentReport:
    """PDP from ``runs`` random initial controls; run ``r`` draws from ``run_rng(seed, r)``.

    ``stop_on_failure`` ends a serial study at the first unsuccessful run.
    """
    if runs < 1:
        raise InvalidParameterError("runs must be >= 1")
    cfg = replace(cfg, keep_controls=False)

    def one(r):
        return _pdp_record(model, grid, cfg, r, random_controls(model, grid, run_rng(seed, r), init_range))

    if stop_on_failure:
        records = []
        for r in range(runs):
            records.append(one(r))
            if not records[-1].converged:
                break
        return ExperimentReport(tuple(records))
    return ExperimentReport(tuple(_map(one, range(runs), threads)))


# ----------------------------------------------------------------------------
# iterate dump


def iterate_dump(result: PdpResult) -> list:
    """Controls ``u_0, u_1, ...`` of a run, as ``m x N`` arrays."""
    if result.controls is None:
        raise HistoryUnavailableError("run with keep_controls=True to dump iterates")
    return [u.values.copy() for u in result.controls]


# ----------------------------------------------------------------------------
# full-transcription baseline


class TranscriptionProblem:
    """States and controls as unknowns, Euler defects as equality residuals.

    ``z = (x_0, ..., x_N, u_0, ..., u_{N-1})`` and the residual stacks
    ``x_0 - x0``, the ``N`` defects ``x_{j+1} - x_j - dt f(x_j, u_j)`` and
    ``x_N - xf``.
    """

    sparse = True

    def __init__(self, model: OcpModel, grid: TimeGrid):
        self.model = model
        self.grid = grid
        n, m, N = model.n, model.m, grid.N
        self.nx = n * (N + 1)
        self.size = self.nx + m * N
        self.lower = np.concatenate([np.full(self.nx, -np.inf), np.tile(model.bounds.lower, N)])
        self.upper = np.concatenate([np.full(self.nx, np.inf), np.tile(model.bounds.upper, N)])

    def split(self, z):
        n, m, N = self.model.n, self.model.m, self.grid.N
        return z[: self.nx].reshape(N + 1, n), z[self.nx:].reshape(N, m)

    def pack(self, X, U):
        return np.concatenate([np.ravel(X), np.ravel(U)])

    def phi(self, z):
        return float(self.grid.dt * np.sum(self.model.cost_integrand(self.split(z)[1])))

    def phi_grad(self, z):
        g = np.zeros(self.size)
        g[self.nx:] = self.grid.dt * np.asarray(self.model.cost_gradient(self.split(z)[1])).reshape(-1)
        return g

    def phi_hessian(self, z):
        blocks = self.grid.dt * np.asarray(self.model.cost_hessian(self.split(z)[1]))
        return sp.block_diag([sp.csr_matrix((self.nx, self.nx))] + list(blocks), format="csr")

    def phi_hess_diag(self, z):
        blocks = self.grid.dt * np.asarray(self.model.cost_hessian(self.split(z)[1]))
        return np.concatenate([np.zeros(self.nx), np.diagonal(blocks, axis1=-2, axis2=-1).reshape(-1)])

    def residual(self, z):
        X, U = self.split(z)
        if not np.all(np.isfinite(X)):
            raise SimulationDivergedError("non-finite state unknowns")
        f = self.model.dynamics(X[:-1], U)
        defects = X[1:] - X[:-1] - self.grid.dt * f
        return np.concatenate([X[0] - self.model.x0, defects.reshape(-1), X[-1] - self.model.xf])

    def residual_jacobian(self, z):
        X, U = self.split(z)
        n, m, N, dt = self.model.n, self.model.m, self.grid.N, self.grid.dt
        fx, fu = self.model.dynamics_jacobians(X[:-1], U)
        fx = np.broadcast_to(fx, (N, n, n))
        fu = np.broadcast_to(fu, (N, n, m))
        j = np.arange(N)[:, None, None]
        a = np.arange(n)[None, :, None]
        rows_x = n + j * n + a + 0 * np.arange(n)[None, None, :]
        cols_x = j * n + np.arange(n)[None, None, :] + 0 * a
        blocks = [
            (np.arange(n), np.arange(n), np.ones(n)),
            (rows_x.ravel(), cols_x.ravel(), (-np.eye(n) - dt * fx).ravel()),
            (n + np.arange(N * n), n + np.arange(N * n), np.ones(N * n)),
        ]
        rows_u = n + j * n + a + 0 * np.arange(m)[None, None, :]
        cols_u = self.nx + j * m + np.arange(m)[None, None, :] + 0 * a
        blocks.append((rows_u.ravel(), cols_u.ravel(), (-dt * fu).ravel()))
        blocks.append((n * (N + 1) + np.arange(n), N * n + np.arange(n), np.ones(n)))
        r, c, v = (np.concatenate(p) for p in zip(*blocks))
        J = sp.csr_matrix((v, (r, c)), shape=(n * (N + 2), self.size))
        return self.residual(z), J

    def constraint_hessian(self, z, w):
        model = self.model
        n, m, N, dt = model.n, model.m, self.grid.N, self.grid.dt
        if model.linear is not None:
            return sp.csr_matrix((self.size, self.size))
        X, U = self.split(z)
        P = np.asarray(w, dtype=float)[n: n + N * n].reshape(N, n)
        Q = -dt * _weighted_second_derivatives(model, X[:-1], U, P)
        idx = np.concatenate([np.arange(N)[:, None] * n + np.arange(n),
                              self.nx + np.arange(N)[:, None] * m + np.arange(m)], axis=1)
        r = np.broadcast_to(idx[:, :, None], Q.shape).ravel()
        c = np.broadcast_to(idx[:, None, :], Q.shape).ravel()
        return sp.csr_matrix((Q.ravel(), (r, c)), shape=(self.size, self.size))


@dataclass(frozen=True)
class BaselineRecord:
    converged: bool
    phi: float
    residual_inf: float
    kkt: float
    wall_time: float
    unknowns: int
    iterations: int


def baseline_full_transcription(model: OcpModel, grid: TimeGrid, inner: InnerConfig = InnerConfig(),
                                eps: float = 1e-6, x_init: Optional[StateTrajectory] = None,
                                u_init: Optional[ControlTrajectory] = None,
                                max_iter: Optional[int] = None) -> BaselineRecord:
    """Solve the full transcription with a general-purpose sparse NLP method.

    scipy's ``trust-constr`` (interior point with bounds) gets the exact
    Lagrangian Hessian. Converged means the solver reports optimality at
    ``inner.grad_tol`` and the dynamics residual is below ``eps``.
    """
    start = time.perf_counter()
    prob = TranscriptionProblem(model, grid)
    X = np.zeros((grid.N + 1, model.n)) if x_init is None else x_init.values.T
    U = np.zeros((grid.N, model.m)) if u_init is None else u_init.values.T
    z0 = prob.pack(X, np.clip(U, model.bounds.lower, model.bounds.upper))
    dynamics = NonlinearConstraint(
        prob.residual, 0.0, 0.0,
        jac=lambda z: prob.residual_jacobian(z)[1],
        hess=prob.constraint_hessian,
    )
    ok, phi, res_inf, kkt, its = False, float("nan"), float("inf"), float("inf"), 0
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = scipy.optimize.minimize(
                prob.phi, z0, jac=prob.phi_grad, hess=prob.phi_hessian,
                constraints=[dynamics], bounds=Bounds(prob.lower, prob.upper),
                method="trust-constr",
                options=dict(gtol=inner.grad_tol, xtol=1e-14,
                             maxiter=inner.max_iter if max_iter is None else max_iter),
            )
        phi, res_inf, kkt, its = prob.phi(res.x), norm_inf(prob.residual(res.x)), res.optimality, res.nit
        ok = bool(res.status in (1, 2) and res_inf < eps)
    except (SimulationDivergedError, np.linalg.LinAlgError, FloatingPointError, ValueError):
        pass
    return BaselineRecord(ok, float(phi), float(res_inf), float(kkt),
                          time.perf_counter() - start, prob.size, int(its))


def random_states(model: OcpModel, grid: TimeGrid, rng: np.random.Generator,
                  init_range=DEFAULT_INIT_RANGE) -> StateTrajectory:
    lo, hi = init_range
    return StateTrajectory(rng.uniform(lo, hi, (model.n, grid.N + 1)))


def baseline_study(model: OcpModel, grid: TimeGrid, runs: int, seed: int,
                   inner: InnerConfig = InnerConfig(), eps: float = 1e-6,
                   init_range=DEFAULT_INIT_RANGE, threads: int = 1) -> ExperimentReport:
    """Baseline from random states and controls, reported in the PDP record schema."""
    if runs < 1:
        raise InvalidParameterError("runs must be >= 1")

    def one(r):
        rng = run_rng(seed, r)
        u0 = random_controls(model, grid, rng, init_range)
        x0 = random_states(model, grid, rng, init_range)
        b = baseline_full_transcription(model, grid, inner, eps, x0, u0)
        return RunRecord(r, b.converged, "Converged" if b.converged else "Failed",
                         b.iterations, b.wall_time, b.phi, b.residual_inf, float("nan"))

    return ExperimentReport(tuple(_map(one, range(runs), threads)))


# ----------------------------------------------------------------------------
# PDP versus baseline comparison table


def comparison_rows(model_tag: str, N_values: Sequence[int], runs: int, seed: int,
                    init_range=DEFAULT_INIT_RANGE, threads: int = 1, timing: bool = False,
                    include_baseline: bool = True, model_params: Optional[dict] = None,
                    overrides: Optional[dict] = None) -> list:
    """One row per ``N`` in ``COMPARISON_COLUMNS`` order.

    Wall-clock columns are left empty unless ``timing`` is set, so repeated
    runs produce identical files.
    """
    model = make_model(model_tag, **(model_params or {}))
    rows = []
    for N in N_values:
        grid = TimeGrid(model.t_f, N)
        reps = {}
        for variant in (1, 2):
            cfg = reference_config(model_tag, variant, **(overrides or {}))
            reps[variant] = success_rate_study(model, grid, runs, seed, cfg, init_range, threads)
        base = baseline_study(model, grid, runs, seed, init_range=init_range,
                              threads=threads) if include_baseline else None

        def t(v):
            return v if timing else None

        rows.append((
            N, reps[1].success_rate, reps[2].success_rate,
            base.success_rate if base else None,
            t(reps[1].mean_time_success), t(reps[2].mean_time_success),
            t(base.mean_time_all) if base else None,
            t(base.mean_time_success) if base else None,
        ))
    return rows


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    model: str = "double_integrator"
    model_params: dict = field(default_factory=dict)
    N: tuple = (100,)
    c_values: tuple = tuple(float(c) for c in range(21))
    runs: int = 20
    seed: int = 0
    init_range: tuple = DEFAULT_INIT_RANGE
    step_rule: int = 2
    timing: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"kind must be one of {KINDS}, got {self.kind!r}")
        object.__setattr__(self, "N", tuple(int(v) for v in np.atleast_1d(self.N)))
        object.__setattr__(self, "c_values", tuple(float(v) for v in np.atleast_1d(self.c_values)))
        if self.runs < 1:
            raise InvalidParameterError("runs must be >= 1")
        if any(b <= a for a, b in zip(self.c_values, self.c_values[1:])):
            raise InvalidParameterError("c grid must be strictly increasing")
        lo, hi = self.init_range
        if not lo < hi:
            raise InvalidParameterError("init range must have lo < hi")
        if self.step_rule not in (1, 2):
            raise InvalidParameterError("step rule must be 1 or 2")


__all__ = [
    "KINDS", "COMPARISON_COLUMNS", "SweepPoint", "NSweepReport", "RunRecord", "ExperimentReport",
    "BaselineRecord", "ExperimentSpec", "HistoryUnavailableError", "TranscriptionProblem",
    "dual_sweep", "n_sweep", "resample", "success_rate_study", "iterate_dump",
    "baseline_full_transcription", "baseline_study", "comparison_rows", "run_rng",
    "random_controls", "random_states", "PdpStatus",
]
