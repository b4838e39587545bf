import numpy as np
import pytest

from pmgrad.model import GaussianDynamics, _gaussian_model, make_lgssm, make_stochvol, simulate_lgssm


def random_spd(rng, d, scale=1.0, jitter=0.3):
    a = rng.standard_normal((d, d))
    return scale * (a @ a.T / d + jitter * np.eye(d))


def random_affine(rng, T, D, contract=0.9):
    F = np.stack([contract * np.linalg.qr(rng.standard_normal((D, D)))[0] for _ in range(T)])
    b = rng.standard_normal((T, D))
    C = np.stack([random_spd(rng, D) for _ in range(T)])
    return GaussianDynamics.from_affine(F, b, C)


def gaussian_obs_model(dyn, y, r=1.0):
    """Affine prior with y_t = x_t + N(0, r I)."""
    D = dyn.dim

    def log_g(t, xp, x):
        d = y[t - 1] - x
        return -0.5 * (np.sum(d * d, axis=-1) / r + D * np.log(2 * np.pi * r))

    def grad_g(t, xp, x):
        return (y[t - 1] - x) / r

    def zeros(t, xp, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    return _gaussian_model(dyn, log_g, grad_g, zeros)


@pytest.fixture
def rng():
    return np.random.default_rng(20261019)


@pytest.fixture
def lgssm_small():
    _, y = simulate_lgssm(2, 3, 1.0, seed=1)
    model, dyn = make_lgssm(2, 3, 1.0, y)
    return model, dyn, y


@pytest.fixture
def stochvol_small():
    rng = np.random.default_rng(5)
    y = rng.standard_normal((3, 2))
    model, dyn = make_stochvol(2, 3, 0.9, 0.25, 0.7, y)
    return model, dyn, y
