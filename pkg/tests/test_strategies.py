import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmgrad import oracle
from pmgrad.csmc import SweepConfig, forward_pass, run_sweep
from pmgrad.model import Decomposition, GaussianDynamics, ModelError, grad_smoothing, log_target, make_stochvol, model_with_fd_gradients
from pmgrad.oracle import dense_prior, exact_marginal_proposal_logpdf
from pmgrad.strategies import (
    ALL_STRATEGIES,
    build_kernel,
    flatten_to_path_space,
    joint_prior,
)

from .conftest import gaussian_obs_model, random_affine


def _stochvol(T, D, seed, tau=0.7):
    rng = np.random.default_rng(seed)
    return make_stochvol(D, T, 0.9, 0.25, tau, rng.standard_normal((T, D)))


MARGINALS = {"p-mala": "mala", "p-mgrad": "mgrad", "p-pcnl": "pcnl"}


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    N=st.integers(1, 3),
    D=st.integers(1, 2),
    name=st.sampled_from(sorted(MARGINALS)),
)
def test_h_factor_is_marginal_density_ratio(seed, N, D, name):
    assert h_factor_error(seed, N, D, name) <= 1e-8


def h_factor_error(seed, N, D, name):
    """Largest gap between engine log H differences and the dense marginal density."""
    rng = np.random.default_rng(seed)
    T, P = 2, N + 1
    dyn = random_affine(rng, T, D)
    model = gaussian_obs_model(dyn, rng.standard_normal((T, D)), r=0.5)
    k = build_kernel(name, model, dyn)
    delta = rng.uniform(0.2, 2.0, (1, T))
    ctx = k.strategy.begin_sweep(rng.standard_normal((1, T, D)), delta, P, rng)
    x = rng.standard_normal((1, P, D))
    x_prev = rng.standard_normal((1, P, D))
    log_h, phi, v = k.strategy.marginal_terms(2, x, x_prev, ctx)
    h = 0.5 * delta[0, 1]
    C = dyn.affine.C[1]
    eye = np.eye(D)
    if name == "p-mala":
        H, Dm, E = eye, h * eye, h * eye
    elif name == "p-mgrad":
        A = np.linalg.solve(C + h * eye, C)
        H, Dm, E = A, h * A, h * eye
    else:
        beta = 2.0 / (2.0 + delta[0, 1])
        H, Dm, E = beta * eye, (1 - beta) * C, h * C
    exact = np.array([exact_marginal_proposal_logpdf(v[0], H, Dm, E, phi[0], n, x[0]) for n in range(P)])
    return float(np.max(np.abs((log_h[0] - log_h[0, 0]) - (exact - exact[0]))))


def _alpha_closed_form(name, model, dyn, x0, x1, u, delta):
    if name == "csmc":
        return oracle.log_alpha_imh(model, x0, x1)
    if name == "p-rwm":
        return oracle.log_alpha_rwm(model, x0, x1)
    if name == "p-amala":
        return oracle.log_alpha_amala(model, x0, x1, u, delta)
    if name == "p-mala":
        return oracle.log_alpha_mala(model, x0, x1, delta)
    if name == "p-agrad":
        return oracle.log_alpha_agrad(model, dyn, x0, x1, u, delta)
    if name == "p-mgrad":
        return oracle.log_alpha_mgrad(model, dyn, x0, x1, delta)
    if name == "p-apcnl":
        return oracle.log_alpha_apcnl(model, dyn, x0, x1, u, delta)
    return oracle.log_alpha_pcnl(model, dyn, x0, x1, delta)


def single_step_log_alpha(kernel, model, ref, delta, rng):
    """(engine log ratio, state) of one T = N = 1 forward pass."""
    cfg = SweepConfig(N=1, step_sizes=np.array([delta]))
    state = forward_pass(model, kernel.strategy, cfg, ref[None, None], rng)
    k = int(state.ref_slots[0][0])
    lw = state.log_weights[0][0]
    return lw[1 - k] - lw[k], state.particles[0][0, 1 - k], state


REDUCTIONS = ["csmc", "p-rwm", "p-amala", "p-mala", "p-agrad", "p-mgrad", "p-apcnl", "p-pcnl"]


@pytest.mark.parametrize("name", REDUCTIONS)
def test_single_step_reduces_to_classical_acceptance(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    model, dyn = _stochvol(1, 2, 3)
    kernel = build_kernel(name, model, dyn)
    for _ in range(20):
        x0 = rng.standard_normal(2)
        delta = rng.uniform(0.1, 2.0)
        got, x1, state = single_step_log_alpha(kernel, model, x0, delta, rng)
        u = None if state.ctx.u is None else state.ctx.u[0, 0]
        assert got == pytest.approx(_alpha_closed_form(name, model, dyn, x0, x1, u, delta), abs=1e-10)


def _transcript(name, model, dyn, seed, kappa=1, sweeps=5):
    k = build_kernel(name, model, dyn, kappa=kappa)
    rng = np.random.default_rng(seed)
    ref = np.zeros((3, model.horizon, model.dim))
    out = []
    for _ in range(sweeps):
        ref = run_sweep(model, dyn, k.strategy, SweepConfig(N=4, step_sizes=np.full(model.horizon, 0.4)), ref, rng).states
        out.append(ref)
    return np.array(out)


def test_agrad_plus_coincides_when_potential_ignores_past():
    model, dyn = _stochvol(4, 2, 8)
    np.testing.assert_allclose(_transcript("p-agrad+", model, dyn, 1), _transcript("p-agrad", model, dyn, 1), atol=1e-12)


@pytest.mark.parametrize("name", ["p-amala", "p-mala", "p-amala+"])
def test_zero_kappa_reduces_to_rwm(name):
    model, dyn = _stochvol(4, 2, 9)
    np.testing.assert_allclose(
        _transcript(name, model, dyn, 2, kappa=0), _transcript("p-rwm", model, dyn, 2), atol=1e-12
    )


def test_twisted_at_single_step_matches_agrad_weights(rng):
    model, dyn = _stochvol(1, 2, 4)
    ref = rng.standard_normal((1, 1, 2))
    delta = np.array([[0.7]])
    x = rng.standard_normal((1, 5, 2))
    w = {}
    for name in ("p-agrad", "tp-agrad", "p-apcnl", "tp-apcnl"):
        k = build_kernel(name, model, dyn)
        ctx = k.strategy.begin_sweep(ref, delta, 5, np.random.default_rng(0))
        w[name] = k.strategy.log_weights(1, x, None, None, ctx)
    np.testing.assert_allclose(w["tp-agrad"], w["p-agrad"], atol=1e-10)
    np.testing.assert_allclose(w["tp-apcnl"], w["p-apcnl"], atol=1e-10)


def test_gain_mutation_is_bayes_update(rng):
    # N(x; m, C) N(u; x, (delta/2) I) normalized over x
    model, dyn = _stochvol(2, 2, 5)
    k = build_kernel("p-agrad", model, dyn)
    delta = 0.9
    ctx = k.strategy.begin_sweep(rng.standard_normal((1, 2, 2)), np.full((1, 2), delta), 3, rng)
    x_prev = rng.standard_normal((1, 3, 2))
    mean, fac = k.strategy._mutation(2, x_prev, ctx)
    m, C, u = dyn.mean(2, x_prev[0]), dyn.cov(2, None), ctx.u[0, 1]
    R = 0.5 * delta * np.eye(2)
    post_cov = np.linalg.inv(np.linalg.inv(C) + np.linalg.inv(R))
    post_mean = (post_cov @ (np.linalg.solve(C, m.T) + np.linalg.solve(R, u)[:, None])).T
    np.testing.assert_allclose(mean[0], post_mean, atol=1e-9)
    np.testing.assert_allclose(fac.sqrt[0, 0] @ fac.sqrt[0, 0].T, post_cov, atol=1e-9)


@pytest.mark.parametrize("name,expected", [("p-rwm", "delta"), ("p-apcnl", "pcn")])
def test_single_proposal_marginal_covariance(name, expected):
    rng = np.random.default_rng(12)
    model, dyn = _stochvol(1, 2, 6)
    k = build_kernel(name, model, dyn, kappa=0)
    delta = 0.8
    M = 200_000
    ref = np.zeros((M, 1, 2))
    ctx = k.strategy.begin_sweep(ref, np.full((M, 1), delta), 2, rng)
    x = k.strategy.propose(1, None, ctx, rng)[:, 0]
    C = dyn.cov(1, None)
    beta = 2 / (2 + delta)
    target = delta * np.eye(2) if expected == "delta" else (1 - beta**2) * C
    emp = np.cov(x.T)
    assert np.max(np.abs(emp - target)) < 5 * np.sqrt(2.0 / M) * np.abs(target).max() + 1e-3
    mom = k.strategy.proposal_moments(1, None, ctx)
    np.testing.assert_allclose(mom[1][0, 0], target, atol=1e-12)


def test_interpolation_limits():
    D, T = 2, 1
    y = np.array([[0.3, -1.0]])
    delta = np.array([[0.8]])
    ref = np.array([[[0.5, 0.2]]])
    for lam, other in ((1e-6, "csmc"), (1e6, "p-mala")):
        dyn = GaussianDynamics.from_affine(np.zeros((T, D, D)), np.full((T, D), 0.7), lam * np.eye(D)[None])
        model = gaussian_obs_model(dyn, y)
        mom = {}
        for name in ("p-mgrad", other):
            k = build_kernel(name, model, dyn)
            ctx = k.strategy.begin_sweep(ref, delta, 4, np.random.default_rng(0))
            mom[name] = k.strategy.proposal_moments(1, None, ctx)
        for a, b in zip(mom["p-mgrad"], mom[other]):
            assert np.max(np.abs(a - b)) <= 1e-4 * np.max(np.abs(b))


def test_requirement_errors():
    D, T = 2, 3

    def mean_fn(t, xp):
        return np.zeros(D) if xp is None else 0.5 * xp

    def cov_fn(t, xp):
        if xp is None:
            return np.eye(D)
        return np.eye(D) * (1.0 + np.sum(xp**2, -1))[..., None, None]

    dyn = GaussianDynamics(T, D, mean_fn, cov_fn)

    def log_q(t, xp, x):
        m, c = mean_fn(t, xp), cov_fn(t, xp)[..., 0, 0]
        return -0.5 * np.sum((x - m) ** 2, -1) / c - 0.5 * D * np.log(2 * np.pi * c) - 0.5 * np.sum(x**2, -1)

    with pytest.raises(ModelError, match="decomposition"):
        build_kernel("p-agrad", model_with_fd_gradients(T, D, log_q), dyn)

    def log_m(t, xp, x):
        return log_q(t, xp, x) + 0.5 * np.sum(x**2, -1)

    def sample_m(t, xp, rng, shape=()):
        m = np.broadcast_to(mean_fn(t, xp), tuple(shape) + (D,))
        c = cov_fn(t, xp)[..., 0, 0]
        return m + np.sqrt(c)[..., None] * rng.standard_normal(m.shape)

    dec = Decomposition(log_m, sample_m, lambda t, xp, x: -0.5 * np.sum(x**2, -1),
                        lambda t, xp, x: -x, lambda t, xp, x: np.zeros_like(x))
    model = model_with_fd_gradients(T, D, log_q, dec)
    build_kernel("p-agrad", model, dyn)
    with pytest.raises(ModelError):
        build_kernel("p-mgrad", model, dyn)
    with pytest.raises(ModelError):
        build_kernel("tp-agrad", model, dyn)
    with pytest.raises(ModelError):
        build_kernel("p-agrad", model, None)
    with pytest.raises(KeyError):
        build_kernel("p-hmc", model, dyn)


def test_path_space_flattening(rng):
    model, dyn = _stochvol(3, 2, 7)
    flat, flat_dyn = flatten_to_path_space(model, dyn)
    x = rng.standard_normal((4, 3, 2))
    np.testing.assert_allclose(flat.log_q(1, None, x.reshape(4, 6)), log_target(model, x), rtol=1e-12)
    g = flat.grad_log_q_wrt_x(1, None, x.reshape(4, 6)).reshape(4, 3, 2)
    for t in range(1, 4):
        prev = x[:, t - 2] if t > 1 else None
        nxt = x[:, t] if t < 3 else None
        np.testing.assert_allclose(g[:, t - 1], grad_smoothing(model, t, prev, x[:, t - 1], nxt), atol=1e-12)
    mean, cov = dense_prior(dyn)
    jm, jc = joint_prior(dyn)
    np.testing.assert_allclose(jc, cov, atol=1e-12)
    np.testing.assert_allclose(flat_dyn.cov(1, None), cov, atol=1e-12)


def test_every_named_strategy_builds():
    model, dyn = _stochvol(3, 2, 1)
    for name in ALL_STRATEGIES:
        k = build_kernel(name, model, dyn)
        out = run_sweep(k.model, k.dynamics, k.strategy, SweepConfig(N=2, step_sizes=np.full(k.model.horizon, 0.3)),
                        k.to_engine(np.zeros((1, 3, 2))), np.random.default_rng(0))
        assert np.all(np.isfinite(out.states))
