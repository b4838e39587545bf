"""Brute-force references for testing.

These favor transparency over speed: dense covariance matrices, explicit
inverses, loops over index paths. Densities come from scipy rather than the
package's own Gaussian helpers so that both sides of a comparison are
computed independently.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.stats import multivariate_normal

from .model import FeynmanKacModel, GaussianDynamics


def _mvn(x, mean, cov) -> float:
    return float(multivariate_normal(mean=np.asarray(mean, float), cov=np.asarray(cov, float)).logpdf(x))


# Linear-Gaussian smoothing.


@dataclass
class SmootherResult:
    means: np.ndarray  # (T, D)
    covs: np.ndarray  # (T, D, D)
    filt_means: np.ndarray
    filt_covs: np.ndarray
    pred_means: np.ndarray
    pred_covs: np.ndarray


def kalman_smoother(
    dyn: GaussianDynamics, observations: np.ndarray, obs_cov: np.ndarray | None = None
) -> SmootherResult:
    """Smoothing moments for y_t = x_t + N(0, R_t) under affine dynamics.

    ``obs_cov`` defaults to the identity at every t (the LGSSM benchmark).
    """
    aff = dyn.affine
    T, D = dyn.horizon, dyn.dim
    y = np.asarray(observations, float)
    R = np.broadcast_to(np.eye(D) if obs_cov is None else obs_cov, (T, D, D))
    mp, Pp = np.zeros((T, D)), np.zeros((T, D, D))
    mf, Pf = np.zeros((T, D)), np.zeros((T, D, D))
    for t in range(T):
        if t == 0:
            m, P = aff.b[0].copy(), aff.C[0].copy()
        else:
            m = aff.F[t] @ mf[t - 1] + aff.b[t]
            P = aff.F[t] @ Pf[t - 1] @ aff.F[t].T + aff.C[t]
        mp[t], Pp[t] = m, P
        K = P @ np.linalg.inv(P + R[t])
        mf[t] = m + K @ (y[t] - m)
        Pf[t] = (np.eye(D) - K) @ P
    ms, Ps = mf.copy(), Pf.copy()
    for t in range(T - 2, -1, -1):
        J = Pf[t] @ aff.F[t + 1].T @ np.linalg.inv(Pp[t + 1])
        ms[t] = mf[t] + J @ (ms[t + 1] - mp[t + 1])
        Ps[t] = Pf[t] + J @ (Ps[t + 1] - Pp[t + 1]) @ J.T
    return SmootherResult(ms, Ps, mf, Pf, mp, Pp)


def ffbs_sample(
    dyn: GaussianDynamics,
    observations: np.ndarray,
    rng: np.random.Generator,
    size: int = 1,
    obs_cov: np.ndarray | None = None,
) -> np.ndarray:
    """Exact posterior paths (size, T, D) by forward filtering, backward sampling."""
    aff = dyn.affine
    sm = kalman_smoother(dyn, observations, obs_cov)
    T, D = dyn.horizon, dyn.dim
    out = np.zeros((size, T, D))
    out[:, T - 1] = rng.multivariate_normal(sm.filt_means[T - 1], sm.filt_covs[T - 1], size=size)
    for t in range(T - 2, -1, -1):
        Pf, F = sm.filt_covs[t], aff.F[t + 1]
        J = Pf @ F.T @ np.linalg.inv(sm.pred_covs[t + 1])
        cov = Pf - J @ F @ Pf
        L = np.linalg.cholesky(0.5 * (cov + cov.T))
        mean = sm.filt_means[t] + (out[:, t + 1] - sm.pred_means[t + 1]) @ J.T
        out[:, t] = mean + rng.standard_normal((size, D)) @ L.T
    return out


# Dense joint Gaussians.


def dense_prior(dyn: GaussianDynamics) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of x_{1:T} from x = (I - F_blk)^{-1} (b + e)."""
    aff = dyn.affine
    T, D = dyn.horizon, dyn.dim
    Fblk = np.zeros((T * D, T * D))
    for t in range(1, T):
        Fblk[t * D:(t + 1) * D, (t - 1) * D:t * D] = aff.F[t]
    lam = np.linalg.inv(np.eye(T * D) - Fblk)
    noise = np.zeros((T * D, T * D))
    for t in range(T):
        noise[t * D:(t + 1) * D, t * D:(t + 1) * D] = aff.C[t]
    return lam @ aff.b.reshape(-1), lam @ noise @ lam.T


def dense_joint_gaussian(dyn: GaussianDynamics, obs_cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Joint law of (x_{1:T}, u_{1:T}) with u_t = x_t + N(0, obs_cov[t]); size 2TD."""
    T, D = dyn.horizon, dyn.dim
    mx, Sx = dense_prior(dyn)
    R = np.zeros((T * D, T * D))
    for t in range(T):
        R[t * D:(t + 1) * D, t * D:(t + 1) * D] = obs_cov[t]
    mean = np.concatenate([mx, mx])
    cov = np.block([[Sx, Sx], [Sx, Sx + R]])
    return mean, cov


def condition(mean, cov, keep, given, values) -> tuple[np.ndarray, np.ndarray]:
    """Moments of the ``keep`` coordinates given ``given`` coordinates equal ``values``."""
    keep, given = np.asarray(keep), np.asarray(given)
    Skg = cov[np.ix_(keep, given)]
    Sgg_inv = np.linalg.inv(cov[np.ix_(given, given)])
    m = mean[keep] + Skg @ Sgg_inv @ (np.asarray(values) - mean[given])
    S = cov[np.ix_(keep, keep)] - Skg @ Sgg_inv @ Skg.T
    return m, S


def dense_twisted_conditional(
    dyn: GaussianDynamics, obs_cov: np.ndarray, t: int, u: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(F', b', Sigma') of x_t | x_{t-1}, u_{t:T} by conditioning the dense joint.

    The conditional mean is affine in x_{t-1}; its slope and offset are read
    off the conditioning formula.
    """
    T, D = dyn.horizon, dyn.dim
    mean, cov = dense_joint_gaussian(dyn, obs_cov)
    xi = lambda s: list(range((s - 1) * D, s * D))  # noqa: E731
    ui = lambda s: list(range(T * D + (s - 1) * D, T * D + s * D))  # noqa: E731
    keep = xi(t)
    given_u = sum((ui(s) for s in range(t, T + 1)), [])
    given = (xi(t - 1) if t > 1 else []) + given_u
    Skg = cov[np.ix_(keep, given)]
    gain = Skg @ np.linalg.inv(cov[np.ix_(given, given)])
    S = cov[np.ix_(keep, keep)] - gain @ Skg.T
    nx = D if t > 1 else 0
    Fp = gain[:, :nx] if t > 1 else np.zeros((D, D))
    u_vals = u[t - 1:].reshape(-1)
    b = mean[keep] - gain @ mean[given] + gain[:, nx:] @ u_vals
    return Fp, b, S


# Marginal proposals.


def block_matrix(a: np.ndarray, b: np.ndarray, n: int) -> np.ndarray:
    """Dense M_N(A, B) = I_N (x) A + 1_{NxN} (x) B."""
    return np.kron(np.eye(n), a) + np.kron(np.ones((n, n)), b)


def exact_marginal_proposal_logpdf(
    v: np.ndarray, H: np.ndarray, Dm: np.ndarray, E: np.ndarray, phi: np.ndarray, n: int, particles: np.ndarray
) -> float:
    """log q_{-n}(x_{-n} | x_n) with u integrated out.

    Proposal: u ~ N(x_n + phi_n, E) and x_m ~ N(v_m + H u, Dm) for m != n,
    so x_{-n} is Gaussian with mean v_m + H (x_n + phi_n) and covariance
    I (x) Dm + 1 1^T (x) H E H^T.
    """
    P, D = particles.shape
    others = [m for m in range(P) if m != n]
    if not others:
        return 0.0
    mean = np.concatenate([v[m] + H @ (particles[n] + phi[n]) for m in others])
    cov = block_matrix(Dm, H @ E @ H.T, len(others))
    return _mvn(particles[others].reshape(-1), mean, cov)


# Backward-sampling enumeration.


def enumerate_backward(state, strategy, l_T: int, chain: int = 0) -> dict[tuple[int, ...], float]:
    """Exact law of l_{1:T} given l_T, by looping over every index path."""
    T = state.horizon
    P = state.particles[0].shape[1]
    logW = [state.log_weights[t][chain] - np.logaddexp.reduce(state.log_weights[t][chain]) for t in range(T)]

    def x(t, i):
        return state.particles[t - 1][chain:chain + 1, i:i + 1]

    def lin(t, i):
        lp = state.lineage_prev[t - 1]
        return None if lp is None else lp[chain:chain + 1, i:i + 1]

    def factor(t, l):
        """log Q'_t(lineage ending at index l[t-1]) along the chosen path."""
        i1 = l[t - 2]
        if strategy.markov_order == 2:
            x2 = lin(t - 1, i1) if t - 1 > 1 else None
            if t - 1 > 1 and l[t - 3] is not None:
                x2 = x(t - 2, l[t - 3])
            return float(strategy.log_q_back(t, x2, x(t - 1, i1), x(t, l[t - 1]), state.ctx)[0, 0])
        return float(strategy.log_q_back(t, None, x(t - 1, i1), x(t, l[t - 1]), state.ctx)[0, 0])

    def step_logp(t, i, l):
        """log P(l_t = i | later indices) for t < T."""
        def score(j):
            path = list(l)
            path[t - 1] = j
            s = logW[t - 1][j]
            if strategy.markov_order == 2:
                x2 = lin(t, j)
                s += float(strategy.log_q_back(t + 1, x2, x(t, j), x(t + 1, path[t]), state.ctx)[0, 0])
                if t + 2 <= T:
                    s += float(
                        strategy.log_q_back(t + 2, x(t, j), x(t + 1, path[t]), x(t + 2, path[t + 1]), state.ctx)[0, 0]
                    )
            else:
                s += float(strategy.log_q_back(t + 1, None, x(t, j), x(t + 1, path[t]), state.ctx)[0, 0])
            return s

        scores = np.array([score(j) for j in range(P)])
        return scores[i] - np.logaddexp.reduce(scores)

    out: dict[tuple[int, ...], float] = {}
    for head in itertools.product(range(P), repeat=T - 1):
        l = list(head) + [l_T]
        lp = 0.0
        for t in range(T - 1, 0, -1):
            lp += step_logp(t, l[t - 1], l)
        out[tuple(l)] = float(np.exp(lp))
    return out


# Closed-form acceptance ratios at T = N = 1 (log scale).


def log_alpha_imh(model: FeynmanKacModel, x0, x1) -> float:
    g = model.decomposition.log_g
    return float(g(1, None, x1) - g(1, None, x0))


def log_alpha_rwm(model: FeynmanKacModel, x0, x1) -> float:
    return float(model.log_q(1, None, x1) - model.log_q(1, None, x0))


def log_alpha_amala(model, x0, x1, u, delta) -> float:
    s = delta / 2
    D = len(x0)
    I = np.eye(D)
    grad = lambda x: model.grad_log_q_wrt_x(1, None, x)  # noqa: E731
    num = model.log_q(1, None, x1) + _mvn(u, x1 + s * grad(x1), s * I) + _mvn(x0, u, s * I)
    den = model.log_q(1, None, x0) + _mvn(u, x0 + s * grad(x0), s * I) + _mvn(x1, u, s * I)
    return float(num - den)


def log_alpha_mala(model, x0, x1, delta) -> float:
    s = delta / 2
    I = np.eye(len(x0))
    grad = lambda x: model.grad_log_q_wrt_x(1, None, x)  # noqa: E731
    num = model.log_q(1, None, x1) + _mvn(x0, x1 + s * grad(x1), delta * I)
    den = model.log_q(1, None, x0) + _mvn(x1, x0 + s * grad(x0), delta * I)
    return float(num - den)


def _prior_at_1(dyn: GaussianDynamics):
    return dyn.mean(1, None), dyn.cov(1, None)


def log_alpha_agrad(model, dyn, x0, x1, u, delta) -> float:
    s = delta / 2
    m, C = _prior_at_1(dyn)
    I = np.eye(len(x0))
    A = np.linalg.inv(C + s * I) @ C
    gg = lambda x: model.decomposition.grad_log_g_wrt_x(1, None, x)  # noqa: E731
    prop_mean = (I - A) @ m + A @ u
    num = model.log_q(1, None, x1) + _mvn(u, x1 + s * gg(x1), s * I) + _mvn(x0, prop_mean, s * A)
    den = model.log_q(1, None, x0) + _mvn(u, x0 + s * gg(x0), s * I) + _mvn(x1, prop_mean, s * A)
    return float(num - den)


def log_alpha_mgrad(model, dyn, x0, x1, delta) -> float:
    s = delta / 2
    m, C = _prior_at_1(dyn)
    I = np.eye(len(x0))
    A = np.linalg.inv(C + s * I) @ C
    Bcov = s * (A @ A + A)
    gg = lambda x: model.decomposition.grad_log_g_wrt_x(1, None, x)  # noqa: E731
    mean_from = lambda x: (I - A) @ m + A @ (x + s * gg(x))  # noqa: E731
    num = model.log_q(1, None, x1) + _mvn(x0, mean_from(x1), Bcov)
    den = model.log_q(1, None, x0) + _mvn(x1, mean_from(x0), Bcov)
    return float(num - den)


def log_alpha_apcnl(model, dyn, x0, x1, u, delta) -> float:
    s = delta / 2
    beta = 2.0 / (2.0 + delta)
    m, C = _prior_at_1(dyn)
    gg = lambda x: model.decomposition.grad_log_g_wrt_x(1, None, x)  # noqa: E731
    prop_mean = (1 - beta) * m + beta * u
    num = model.log_q(1, None, x1) + _mvn(u, x1 + s * C @ gg(x1), s * C) + _mvn(x0, prop_mean, (1 - beta) * C)
    den = model.log_q(1, None, x0) + _mvn(u, x0 + s * C @ gg(x0), s * C) + _mvn(x1, prop_mean, (1 - beta) * C)
    return float(num - den)


def log_alpha_pcnl(model, dyn, x0, x1, delta) -> float:
    s = delta / 2
    beta = 2.0 / (2.0 + delta)
    m, C = _prior_at_1(dyn)
    gg = lambda x: model.decomposition.grad_log_g_wrt_x(1, None, x)  # noqa: E731
    mean_from = lambda x: (1 - beta) * m + beta * (x + s * C @ gg(x))  # noqa: E731
    cov = (1 - beta**2) * C
    num = model.log_q(1, None, x1) + _mvn(x0, mean_from(x1), cov)
    den = model.log_q(1, None, x0) + _mvn(x1, mean_from(x0), cov)
    return float(num - den)
