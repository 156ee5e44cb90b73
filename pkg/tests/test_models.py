import numpy as np
import pytest

from pdpocp.models import InvalidParameterError, dynamics_jacobian_check, make_model

from conftest import ffr_rhs


def test_double_integrator_defaults(di):
    assert (di.n, di.m, di.t_f) == (2, 1, 1.0)
    np.testing.assert_array_equal(di.x0, [0.0, 1.0])
    np.testing.assert_array_equal(di.xf, [0.0, 0.0])
    np.testing.assert_array_equal(di.bounds.upper, [2.5])
    assert di.linear is not None and not di.nonconvex


def test_robot_defaults(ffr):
    assert (ffr.n, ffr.m, ffr.t_f) == (6, 2, 12.0)
    np.testing.assert_allclose(ffr.x0, [-10, -10, np.pi / 2, 0, 0, 0])
    np.testing.assert_array_equal(ffr.bounds.upper, [0.8, 0.4])
    assert ffr.nonconvex


def test_robot_dynamics_match_reference(ffr, rng):
    x, u = rng.normal(size=6), rng.normal(size=2)
    np.testing.assert_allclose(ffr.dynamics(x, u), ffr_rhs(x, u), rtol=1e-14)


def test_dynamics_broadcast(ffr, rng):
    X, U = rng.normal(size=(5, 6)), rng.normal(size=(5, 2))
    batched = ffr.dynamics(X, U)
    for k in range(5):
        np.testing.assert_allclose(batched[k], ffr.dynamics(X[k], U[k]))


@pytest.mark.parametrize("tag", ["double_integrator", "free_flying_robot"])
def test_jacobians_match_differences(tag, rng):
    model = make_model(tag)
    for _ in range(5):
        assert dynamics_jacobian_check(model, rng.normal(size=model.n), rng.normal(size=model.m)) < 1e-8


def test_robot_weighted_hessian_matches_differences(ffr, rng):
    x, u, p = rng.normal(size=6), rng.normal(size=2), rng.normal(size=6)
    Q = ffr.dynamics_hessian(x, u, p)
    e = 1e-6
    z = np.concatenate([x, u])

    def grad(z):
        fx, fu = ffr.dynamics_jacobians(z[:6], z[6:])
        return np.concatenate([fx, fu], axis=1).T @ p

    fd = np.stack([(grad(z + e * d) - grad(z - e * d)) / (2 * e) for d in np.eye(8)])
    np.testing.assert_allclose(Q, fd, atol=1e-7)


def test_cost_scaling(di, ffr):
    assert di.cost_integrand(np.array([2.0])) == 2.0
    assert ffr.cost_integrand(np.array([1.0, 2.0])) == 5.0


def test_invalid_parameters():
    with pytest.raises(InvalidParameterError):
        make_model("double_integrator", a=0.0)
    with pytest.raises(InvalidParameterError):
        make_model("unicycle")
    with pytest.raises(InvalidParameterError):
        make_model("free_flying_robot", x0=[0.0, 0.0])
