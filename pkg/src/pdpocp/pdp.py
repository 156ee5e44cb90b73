"""Primal-dual penalty iterations: minimise the penalty at ``c_k``, stop when
feasible, otherwise raise ``c`` by a step proportional to ``||h(u_k)||_1``."""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .grid import ControlTrajectory, StateTrajectory, TimeGrid, norm1, norm2, norm_inf, project_box
from .inner import InnerConfig, InnerResult, inner_solve
from .models import InvalidParameterError, OcpModel
from .shooting import simulate

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("k", "c", "s", "s_tilde", "q", "phi", "h_l1", "h_l2", "h_linf")


class StepRuleError(ValueError):
    """A step size was requested for a feasible iterate."""


@dataclass(frozen=True)
class StepRule:
    """Step-size rule; ``s_k = (1 - pick) * eta_k + pick * beta_k``.

    Type 1: ``eta_k = min(eta, ||h||_2)``, ``beta_k = max(beta, ||h||_1 + ||h||_2)``.
    Type 2: ``eta_k = theta_k / ||h||_1``, ``beta_k = beta / ||h||_1``.
    """

    variant: int = 2
    eta: float = 0.1
    beta: float = 3.0
    theta: tuple = (1.0,)
    pick: float = 0.5

    def __post_init__(self):
        if self.variant not in (1, 2):
            raise InvalidParameterError(f"step rule variant must be 1 or 2, got {self.variant!r}")
        if not 0.0 <= self.pick <= 1.0:
            raise InvalidParameterError("pick fraction must lie in [0, 1]")
        theta = tuple(float(t) for t in np.atleast_1d(self.theta))
        object.__setattr__(self, "theta", theta)
        if self.variant == 1:
            if not 0 < self.eta < self.beta:
                raise InvalidParameterError("type 1 needs 0 < eta < beta")
        else:
            if not self.beta > 0:
                raise InvalidParameterError("type 2 needs beta > 0")
            if not theta or any(not 0 < t <= self.beta for t in theta):
                raise InvalidParameterError("type 2 needs 0 < theta_k <= beta")

    @classmethod
    def type1(cls, eta=0.1, beta=1.0, pick=0.5):
        return cls(variant=1, eta=eta, beta=beta, pick=pick)

    @classmethod
    def type2(cls, beta=3.0, theta=1.0, pick=0.5):
        return cls(variant=2, beta=beta, theta=theta, pick=pick)

    def theta_at(self, k: int) -> float:
        return self.theta[min(k, len(self.theta) - 1)]

    def bracket(self, h_l1: float, h_l2: float, k: int = 0):
        """``(eta_k, beta_k)``."""
        if self.variant == 1:
            return min(self.eta, h_l2), max(self.beta, h_l1 + h_l2)
        if not h_l1 > 0:
            raise StepRuleError("type 2 step size is undefined at a feasible iterate")
        return self.theta_at(k) / h_l1, self.beta / h_l1


def step_size(rule: StepRule, h_norms, k: int = 0) -> float:
    """``s_k`` from ``(||h||_1, ||h||_2)``; always inside ``[eta_k, beta_k]``."""
    h_l1, h_l2 = (float(v) for v in h_norms)
    lo, hi = rule.bracket(h_l1, h_l2, k)
    return (1.0 - rule.pick) * lo + rule.pick * hi


@dataclass(frozen=True)
class PdpConfig:
    """Outer-loop settings.

    ``alpha`` holds ``alpha_k`` (the last entry repeats). With
    ``alpha_in_step`` the factor ``1 + alpha_k`` is also applied inside
    ``s_k`` itself, as in one published parameterisation of the robot runs.
    """

    step_rule: StepRule = field(default_factory=StepRule)
    c0: float = 1.0
    alpha: tuple = (1.0,)
    eps: float = 1e-6
    max_outer: int = 100
    inner: InnerConfig = field(default_factory=InnerConfig)
    alpha_in_step: bool = False
    keep_controls: bool = True

    def __post_init__(self):
        alpha = tuple(float(a) for a in np.atleast_1d(self.alpha))
        object.__setattr__(self, "alpha", alpha)
        if not self.c0 > 0:
            raise InvalidParameterError("c0 must be positive")
        if not self.eps > 0:
            raise InvalidParameterError("eps must be positive")
        if not alpha or any(not a > 0 for a in alpha):
            raise InvalidParameterError("every alpha_k must be positive")
        if self.max_outer < 1:
            raise InvalidParameterError("max_outer must be >= 1")

    def alpha_at(self, k: int) -> float:
        return self.alpha[min(k, len(self.alpha) - 1)]


def reference_config(model_tag: str, variant: int, **overrides) -> PdpConfig:
    """Step-size parameters used for the two reference problems."""
    if model_tag == "double_integrator":
        if variant == 1:
            cfg = PdpConfig(step_rule=StepRule.type1(eta=0.1, beta=1.0), alpha=(1.0,))
        else:
            cfg = PdpConfig(step_rule=StepRule.type2(beta=3.0, theta=1.0), alpha=(1.0,))
    elif model_tag == "free_flying_robot":
        if variant == 1:
            cfg = PdpConfig(step_rule=StepRule.type1(eta=0.1, beta=1.0), alpha=(0.4,),
                            alpha_in_step=True)
        else:
            cfg = PdpConfig(step_rule=StepRule.type2(beta=2.0, theta=1.0), alpha=(1.0,))
    else:
        raise InvalidParameterError(f"no reference parameters for model {model_tag!r}")
    if variant not in (1, 2):
        raise InvalidParameterError(f"step rule variant must be 1 or 2, got {variant!r}")
    return replace(cfg, **overrides)


class PdpStatus(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_OUTER = "MaxOuterReached"
    INNER_FAILED = "InnerFailed"


@dataclass(frozen=True)
class Iterate:
    k: int
    c: float
    s: float
    s_tilde: float
    q: float
    phi: float
    h_l1: float
    h_l2: float
    h_linf: float

    def row(self):
        return tuple(getattr(self, name) for name in HISTORY_COLUMNS)


@dataclass(frozen=True, eq=False)
class PdpResult:
    status: PdpStatus
    iterates: list
    final_u: ControlTrajectory
    final_states: StateTrajectory
    controls: Optional[list] = None
    inner_results: list = field(default_factory=list, repr=False)
    wall_time: float = 0.0

    @property
    def outer_iterations(self) -> int:
        return len(self.iterates)

    @property
    def converged(self) -> bool:
        return self.status is PdpStatus.CONVERGED


def _solve_at(model, grid, c, warm, inner: InnerConfig) -> InnerResult:
    res = inner_solve(model, grid, c, warm, inner)
    if res.converged:
        return res
    log.info("inner solve at c=%g did not converge (kkt %.3g), retrying", c, res.kkt_residual)
    retry = inner_solve(model, grid, c, warm, inner, restarts=2 * max(inner.restarts, 1))
    if retry.converged:
        return retry
    return retry if retry.lagrangian_value < res.lagrangian_value else res


def pdp_run(model: OcpModel, grid: TimeGrid, cfg: PdpConfig = PdpConfig(),
            u_init: Optional[ControlTrajectory] = None) -> PdpResult:
    """Run the primal-dual penalty method from ``u_init`` (zero control by default)."""
    start = time.perf_counter()
    if u_init is None:
        u_init = ControlTrajectory(np.zeros((model.m, grid.N)))
    warm = project_box(u_init, model.bounds)
    c = float(cfg.c0)
    iterates, controls, inner_results = [], [], []
    status = PdpStatus.MAX_OUTER
    for k in range(cfg.max_outer):
        res = _solve_at(model, grid, c, warm, cfg.inner)
        inner_results.append(res)
        warm = res.u_star
        if cfg.keep_controls:
            controls.append(res.u_star)
        h = res.residual
        h1, h2, hinf = norm1(h), norm2(h), norm_inf(h)
        feasible = hinf < cfg.eps
        if feasible:
            s = s_tilde = 0.0
        else:
            alpha = cfg.alpha_at(k)
            s = step_size(cfg.step_rule, (h1, h2), k)
            if cfg.alpha_in_step:
                s *= 1.0 + alpha
            s_tilde = (alpha + 1.0) * s
        iterates.append(Iterate(k, c, s, s_tilde, res.lagrangian_value, res.phi_value, h1, h2, hinf))
        log.debug("k=%d c=%.6g q=%.10g |h|inf=%.3g", k, c, res.lagrangian_value, hinf)
        if not res.converged:
            status = PdpStatus.INNER_FAILED
            break
        if feasible:
            status = PdpStatus.CONVERGED
            break
        c = c + s_tilde * h1
    final_u = iterates and inner_results[-1].u_star
    return PdpResult(
        status=status,
        iterates=iterates,
        final_u=final_u,
        final_states=simulate(model, grid, final_u),
        controls=controls if cfg.keep_controls else None,
        inner_results=inner_results,
        wall_time=time.perf_counter() - start,
    )


def dual_value_history(result: PdpResult):
    """``(c_k, q_k)`` pairs in iteration order."""
    return [(it.c, it.q) for it in result.iterates]
