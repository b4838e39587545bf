import time

import numpy as np
import pytest

from pmgrad.gauss import SingularMatrixError
from pmgrad.model import AffineDynamics, GaussianDynamics, ModelError
from pmgrad.oracle import dense_twisted_conditional
from pmgrad.twist import twisted_params_general, twisted_params_invertible

from .conftest import random_affine


@pytest.mark.parametrize("kind", ["identity", "prior_cov"])
def test_twisted_params_against_dense(kind):
    rng = np.random.default_rng(11)
    T, D = 4, 2
    for _ in range(10):
        dyn = random_affine(rng, T, D)
        delta = rng.uniform(0.1, 2.0, T)
        u = rng.standard_normal((T, D))
        gen = twisted_params_general(dyn, delta, u, kind)
        inv = twisted_params_invertible(dyn, delta, u, kind)
        V = np.broadcast_to(np.eye(D), (T, D, D)) if kind == "identity" else dyn.affine.C
        R = 0.5 * delta[:, None, None] * V
        for t in range(1, T + 1):
            F, b, S = dense_twisted_conditional(dyn, R, t, u)
            for tp in (gen, inv):
                np.testing.assert_allclose(tp.F[t - 1], F, atol=1e-7)
                np.testing.assert_allclose(tp.b[t - 1], b, atol=1e-7)
                np.testing.assert_allclose(tp.Sigma[t - 1], S, atol=1e-7)


def test_batched_matches_unbatched(rng):
    dyn = random_affine(rng, 5, 3)
    delta = rng.uniform(0.1, 1.0, (4, 5))
    u = rng.standard_normal((4, 5, 3))
    batch = twisted_params_general(dyn, delta, u)
    for i in range(4):
        one = twisted_params_general(dyn, delta[i], u[i])
        np.testing.assert_allclose(batch.b[i], one.b, atol=1e-12)
        np.testing.assert_allclose(batch.Sigma[i], one.Sigma, atol=1e-12)


def test_first_step_has_no_slope(rng):
    dyn = random_affine(rng, 3, 2)
    tp = twisted_params_general(dyn, np.ones(3), rng.standard_normal((3, 2)))
    assert np.all(tp.F[0] == 0)


def test_singular_noise_is_not_a_valid_dynamics():
    T, D = 3, 2
    C = np.broadcast_to(np.eye(D), (T, D, D)).copy()
    C[1] = np.diag([1.0, 0.0])
    with pytest.raises(ModelError):
        GaussianDynamics.from_affine(np.broadcast_to(np.eye(D), (T, D, D)), np.zeros((T, D)), C)


def test_invertible_route_rejects_ill_conditioned(rng):
    T, D = 3, 2
    C = np.broadcast_to(np.eye(D), (T, D, D)).copy()
    C[1] = np.diag([1.0, 1e-16])
    F = np.broadcast_to(np.eye(D), (T, D, D))
    # Bypass the constructor, which would refuse the near-singular C_2.
    dyn = GaussianDynamics.__new__(GaussianDynamics)
    dyn.horizon, dyn.dim, dyn.affine = T, D, AffineDynamics(F.copy(), np.zeros((T, D)), C)
    with pytest.raises(SingularMatrixError):
        twisted_params_invertible(dyn, np.ones(T), np.zeros((T, D)))
    tp = twisted_params_general(dyn, np.ones(T), np.zeros((T, D)))
    assert np.all(np.isfinite(tp.Sigma))


def test_cost_linear_in_horizon(rng):
    D = 2
    Ts = [64, 128, 256, 512]
    times = []
    for T in Ts:
        dyn = random_affine(rng, T, D)
        u = rng.standard_normal((T, D))
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            twisted_params_general(dyn, np.ones(T), u)
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    slope = np.polyfit(np.log(Ts), np.log(times), 1)[0]
    assert 0.75 <= slope <= 1.25
