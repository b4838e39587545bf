import numpy as np
import pytest

from pmgrad.csmc import SweepConfig, forward_pass
from pmgrad.oracle import (
    block_matrix,
    condition,
    dense_joint_gaussian,
    dense_prior,
    enumerate_backward,
    exact_marginal_proposal_logpdf,
    ffbs_sample,
    kalman_smoother,
)
from pmgrad.gauss import block_inv_params, block_det, mvn_logpdf
from pmgrad.strategies import build_kernel

from .conftest import gaussian_obs_model, random_affine


def test_kalman_matches_dense_conditioning(rng):
    T, D = 4, 2
    for _ in range(5):
        dyn = random_affine(rng, T, D)
        y = rng.standard_normal((T, D))
        R = np.broadcast_to(np.eye(D), (T, D, D))
        mean, cov = dense_joint_gaussian(dyn, R)
        m, S = condition(mean, cov, np.arange(T * D), np.arange(T * D, 2 * T * D), y.reshape(-1))
        sm = kalman_smoother(dyn, y)
        np.testing.assert_allclose(sm.means.reshape(-1), m, atol=1e-9)
        for t in range(T):
            np.testing.assert_allclose(sm.covs[t], S[t * D:(t + 1) * D, t * D:(t + 1) * D], atol=1e-9)


def test_dense_prior_cross_covariances(rng):
    dyn = random_affine(rng, 3, 2)
    _, cov = dense_prior(dyn)
    _, sig = dyn.prior_moments()
    F = dyn.affine.F
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)
    np.testing.assert_allclose(cov[2:4, 0:2], F[1] @ sig[0], atol=1e-12)
    np.testing.assert_allclose(cov[4:6, 0:2], F[2] @ F[1] @ sig[0], atol=1e-12)


def test_uninformative_observations_recover_prior(rng):
    dyn = random_affine(rng, 3, 2)
    sm = kalman_smoother(dyn, rng.standard_normal((3, 2)), np.eye(2) * 1e12)
    mu, sig = dyn.prior_moments()
    np.testing.assert_allclose(sm.means, mu, atol=1e-6)
    np.testing.assert_allclose(sm.covs, sig, atol=1e-6)


def test_ffbs_moments(rng):
    dyn = random_affine(rng, 3, 2)
    y = rng.standard_normal((3, 2))
    draws = ffbs_sample(dyn, y, rng, size=100_000)
    sm = kalman_smoother(dyn, y)
    se = np.sqrt(np.diagonal(sm.covs, axis1=1, axis2=2) / 100_000)
    assert np.all(np.abs(draws.mean(0) - sm.means) < 5 * se)


def test_marginal_oracle_single_proposal(rng):
    # N = 1: the other particle is a single Gaussian draw
    d = 2
    v, phi = rng.standard_normal((2, d)), rng.standard_normal((2, d))
    H, Dm, E = np.eye(d) * 0.4, np.eye(d) * 0.3, np.eye(d) * 0.2
    x = rng.standard_normal((2, d))
    got = exact_marginal_proposal_logpdf(v, H, Dm, E, phi, 0, x)
    expected = mvn_logpdf(x[1], v[1] + H @ (x[0] + phi[0]), Dm + H @ E @ H.T)
    assert got == pytest.approx(float(expected), rel=1e-12)


def test_marginal_oracle_block_route(rng):
    # the same density evaluated through the block determinant and inverse
    d, P = 2, 4
    v, phi, x = (rng.standard_normal((P, d)) for _ in range(3))
    H, Dm, E = np.eye(d) * 0.7, np.diag([0.3, 0.5]), np.eye(d) * 0.2
    n = 1
    others = [m for m in range(P) if m != n]
    r = np.concatenate([x[m] - v[m] - H @ (x[n] + phi[n]) for m in others])
    Fi, Gi = block_inv_params(Dm, H @ E @ H.T, P - 1)
    quad = r @ block_matrix(Fi, Gi, P - 1) @ r
    logdet = np.log(block_det(Dm, H @ E @ H.T, P - 1))
    expected = -0.5 * (quad + logdet + len(r) * np.log(2 * np.pi))
    assert exact_marginal_proposal_logpdf(v, H, Dm, E, phi, n, x) == pytest.approx(expected, rel=1e-10)


def test_enumeration_degenerate_and_normalized(rng):
    dyn = random_affine(rng, 3, 1)
    model = gaussian_obs_model(dyn, rng.standard_normal((3, 1)))
    k = build_kernel("csmc", model, dyn)
    cfg = SweepConfig(N=2, step_sizes=np.ones(3))
    state = forward_pass(model, k.strategy, cfg, np.zeros((1, 3, 1)), rng)
    law = enumerate_backward(state, k.strategy, 0)
    assert sum(law.values()) == pytest.approx(1.0)
    assert len(law) == 9
