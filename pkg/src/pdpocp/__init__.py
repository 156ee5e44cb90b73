"""Primal-dual penalty method for control-constrained optimal control."""

from .certificate import Certificate, certify, certify_double_integrator, certify_free_flying_robot, clip_law
from .grid import BoxBounds, ControlTrajectory, StateTrajectory, TimeGrid
from .inner import InnerConfig, InnerResult, inner_solve
from .models import OcpModel, make_double_integrator, make_free_flying_robot, make_model
from .pdp import PdpConfig, PdpResult, PdpStatus, StepRule, reference_config, pdp_run, step_size
from .shooting import residual, residual_jacobian, simulate

__all__ = [
    "BoxBounds", "Certificate", "ControlTrajectory", "InnerConfig", "InnerResult", "OcpModel",
    "PdpConfig", "PdpResult", "PdpStatus", "StateTrajectory", "StepRule", "TimeGrid",
    "certify", "certify_double_integrator", "certify_free_flying_robot", "clip_law",
    "inner_solve", "make_double_integrator", "make_free_flying_robot", "make_model",
    "reference_config", "pdp_run", "residual", "residual_jacobian", "simulate", "step_size",
]
