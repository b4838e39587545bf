import numpy as np
import pytest
from scipy.stats import multivariate_normal

from pmgrad.model import (
    GaussianDynamics,
    ModelError,
    ModelEvaluationError,
    fd_gradient,
    grad_smoothing,
    log_target,
    make_lgssm,
    make_stochvol,
    model_with_fd_gradients,
    simulate_stochvol,
    stochvol_cov,
)
from pmgrad.oracle import dense_prior


def test_lgssm_log_target_is_dense_joint(rng, lgssm_small):
    model, dyn, y = lgssm_small
    mean, cov = dense_prior(dyn)
    x = rng.standard_normal((4, 3, 2))
    expected = multivariate_normal(mean, cov).logpdf(x.reshape(4, -1)) + multivariate_normal(
        np.zeros(6), np.eye(6)
    ).logpdf((y[None] - x).reshape(4, -1))
    np.testing.assert_allclose(log_target(model, x), expected, rtol=1e-10)


@pytest.mark.parametrize("which", ["lgssm", "stochvol"])
def test_gradients_match_finite_differences(rng, which, lgssm_small, stochvol_small):
    model, dyn, _ = lgssm_small if which == "lgssm" else stochvol_small
    xp = rng.standard_normal(2)
    x = rng.standard_normal(2)
    for t in (1, 2):
        prev = xp if t > 1 else None
        g = model.grad_log_q_wrt_x(t, prev, x)
        np.testing.assert_allclose(g, fd_gradient(lambda z: model.log_q(t, prev, z), x), atol=1e-6)
    gp = model.grad_log_q_wrt_xprev(2, xp, x)
    np.testing.assert_allclose(gp, fd_gradient(lambda z: model.log_q(2, z, x), xp), atol=1e-6)
    dec = model.decomposition
    np.testing.assert_allclose(
        dec.grad_log_g_wrt_x(2, xp, x), fd_gradient(lambda z: dec.log_g(2, xp, z), x), atol=1e-6
    )


def test_smoothing_gradient_is_gradient_of_log_target(rng, stochvol_small):
    model, _, _ = stochvol_small
    path = rng.standard_normal((3, 2))

    def f(z):
        p = np.broadcast_to(path, z.shape[:-1] + (3, 2)).copy()
        p[..., 1, :] = z
        return log_target(model, p)

    g = grad_smoothing(model, 2, path[0], path[1], path[2])
    np.testing.assert_allclose(g, fd_gradient(f, path[1]), atol=1e-6)


def test_fd_model_agrees_with_analytic(rng, lgssm_small):
    model, _, _ = lgssm_small
    fd = model_with_fd_gradients(3, 2, model.log_q, model.decomposition)
    x, xp = rng.standard_normal(2), rng.standard_normal(2)
    np.testing.assert_allclose(fd.grad_log_q_wrt_x(2, xp, x), model.grad_log_q_wrt_x(2, xp, x), atol=1e-6)
    assert fd.finite_difference


def test_batched_observations(rng):
    y = rng.standard_normal((3, 4, 2))
    model, _ = make_lgssm(2, 4, 1.0, y)
    x = rng.standard_normal((3, 5, 2))
    out = model.log_q(2, x, x)
    assert out.shape == (3, 5)
    single, _ = make_lgssm(2, 4, 1.0, y[1])
    np.testing.assert_allclose(out[1], single.log_q(2, x[1], x[1]))


def test_model_errors():
    with pytest.raises(ModelError):
        make_lgssm(2, 3, -1.0, np.zeros((3, 2)))
    with pytest.raises(ModelError):
        make_stochvol(2, 3, 1.2, 0.2, 1.0, np.zeros((3, 2)))
    with pytest.raises(ModelError):
        make_stochvol(3, 3, 0.9, -0.9, 1.0, np.zeros((3, 3)))
    with pytest.raises(ModelError):
        make_lgssm(2, 3, 1.0, np.zeros((4, 2)))
    with pytest.raises(ModelError):
        GaussianDynamics(2, 1, lambda t, x: 0.0, lambda t, x: np.eye(1), constant_cov=False,
                         affine=object())


def test_non_finite_log_q_is_reported(lgssm_small):
    model, _, _ = lgssm_small
    with pytest.raises(ModelEvaluationError) as err:
        log_target(model, np.array([[0.0, 0.0], [np.inf, 0.0], [0.0, 0.0]]))
    assert err.value.t == 2


def test_stochvol_stationary_variance():
    # Long simulated path; the state process is stationary with covariance C_1.
    x, y = simulate_stochvol(2, 20_000, 0.9, 0.25, 0.5, seed=3)
    c1 = stochvol_cov(2, 0.25, 0.5) / (1 - 0.81)
    emp = np.cov(x.T)
    # AR(1) with coefficient 0.9: variance of the sample variance inflates by (1+phi^2)/(1-phi^2).
    se = np.sqrt(2 * (1 + 0.81) / (1 - 0.81) / 20_000) * np.abs(c1).max()
    assert np.max(np.abs(emp - c1)) < 4 * se
    assert y.shape == (20_000, 2)


def test_simulation_seeded():
    a = simulate_stochvol(2, 5, 0.9, 0.25, 1.0, seed=9)
    b = simulate_stochvol(2, 5, 0.9, 0.25, 1.0, seed=9)
    np.testing.assert_array_equal(a[1], b[1])
