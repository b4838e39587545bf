"""Twisted mutation kernels for affine Gaussian dynamics.

Given pseudo-observations u_t | x_t ~ N(x_t, (delta_t/2) V_t), the twisted
kernel at time t is the exact conditional

    p(x_t | x_{t-1}, u_{t:T}) = N(x_t; F'_t x_{t-1} + b'_t, Sigma'_t),

with F'_1 = 0. Two recursions compute it in O(T D^3): the general one runs a
Kalman filter on the time-reversed prior and never inverts C_t; the
invertible one combines a forward filter with a Rauch-Tung-Striebel pass.

Inputs ``delta`` ``(..., T)`` and ``u`` ``(..., T, D)`` may carry leading
batch axes, which are propagated to the outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gauss import SingularMatrixError, matvec, symmetrize
from .model import GaussianDynamics

OBS_COV_KINDS = ("identity", "prior_cov")


@dataclass(frozen=True)
class TwistedParams:
    F: np.ndarray  # (..., T, D, D); F[..., 0, :, :] is zero
    b: np.ndarray  # (..., T, D)
    Sigma: np.ndarray  # (..., T, D, D)


def _obs_cov(dyn: GaussianDynamics, delta: np.ndarray, kind: str) -> np.ndarray:
    """R_t = (delta_t / 2) V_t shaped ``(..., T, D, D)``."""
    aff = dyn._require_affine()
    half = 0.5 * np.asarray(delta, dtype=float)[..., None, None]
    if kind == "identity":
        return half * np.eye(dyn.dim)
    if kind == "prior_cov":
        return half * aff.C
    raise ValueError(f"unknown observation covariance kind {kind!r}")


def _solve_right(a: np.ndarray, s: np.ndarray) -> np.ndarray:
    """a @ inv(s) for symmetric s."""
    return np.swapaxes(np.linalg.solve(s, np.swapaxes(a, -1, -2)), -1, -2)


def time_reversal(dyn: GaussianDynamics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward kernels p(x_t | x_{t+1}) = N(Fr_t x_{t+1} + br_t, Cr_t), t = 1..T-1.

    Index t - 1 of each returned array holds time t; the last entry is unused.
    """
    aff = dyn._require_affine()
    mu, sig = dyn.prior_moments()
    T, D = mu.shape
    Fr = np.zeros((T, D, D))
    br = np.zeros((T, D))
    Cr = np.zeros((T, D, D))
    for i in range(T - 1):
        try:
            if np.linalg.cond(sig[i + 1]) > 1e14:
                raise np.linalg.LinAlgError
            Fr[i] = _solve_right(sig[i] @ aff.F[i + 1].T, sig[i + 1])
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError(f"prior covariance at t={i + 2} is singular") from exc
        br[i] = mu[i] - Fr[i] @ mu[i + 1]
        Cr[i] = symmetrize(sig[i] - Fr[i] @ aff.F[i + 1] @ sig[i])
    return Fr, br, Cr


def _kalman_update(m, P, y, R):
    S = P + R
    K = _solve_right(P, S)
    m = m + matvec(K, y - m)
    P = symmetrize(P - K @ P)
    return m, P


def twisted_params_general(
    dyn: GaussianDynamics, delta: np.ndarray, u: np.ndarray, obs_cov_kind: str = "identity"
) -> TwistedParams:
    """Twisted parameters through a filter run backward on the reversed prior."""
    delta = np.asarray(delta, dtype=float)
    u = np.asarray(u, dtype=float)
    T, D = dyn.horizon, dyn.dim
    R = np.broadcast_to(_obs_cov(dyn, delta, obs_cov_kind), u.shape[:-1] + (D, D))
    batch = u.shape[:-2]
    mu, sig = dyn.prior_moments()
    Fr, br, Cr = time_reversal(dyn)

    mf = np.zeros(batch + (T, D))
    Pf = np.zeros(batch + (T, D, D))
    m = np.broadcast_to(mu[T - 1], batch + (D,))
    P = np.broadcast_to(sig[T - 1], batch + (D, D))
    for i in range(T - 1, -1, -1):
        m, P = _kalman_update(m, P, u[..., i, :], R[..., i, :, :])
        mf[..., i, :], Pf[..., i, :, :] = m, P
        if i > 0:
            m = matvec(Fr[i - 1], m) + br[i - 1]
            P = Fr[i - 1] @ P @ Fr[i - 1].T + Cr[i - 1]

    F = np.zeros(batch + (T, D, D))
    b = np.zeros(batch + (T, D))
    S = np.zeros(batch + (T, D, D))
    b[..., 0, :], S[..., 0, :, :] = mf[..., 0, :], Pf[..., 0, :, :]
    for i in range(1, T):
        # x_{t-1} acts as an observation of x_t through the reversed kernel.
        Fb, bb, Cb = Fr[i - 1], br[i - 1], Cr[i - 1]
        m, P = mf[..., i, :], Pf[..., i, :, :]
        innov = Fb @ P @ Fb.T + Cb
        K = _solve_right(P @ Fb.T, innov)
        F[..., i, :, :] = K
        b[..., i, :] = m - matvec(K, matvec(Fb, m) + bb)
        S[..., i, :, :] = symmetrize(P - K @ Fb @ P)
    return TwistedParams(F, b, S)


def kalman_filter_rts(
    dyn: GaussianDynamics, u: np.ndarray, R: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Forward filter and RTS smoother for u_t = x_t + noise(R_t).

    Returns predictive means/covariances (mu_{t|t-1}, Sigma_{t|t-1}) and smoothed
    ones (mu_{t|T}, Sigma_{t|T}).
    """
    aff = dyn._require_affine()
    T, D = dyn.horizon, dyn.dim
    batch = u.shape[:-2]
    mp = np.zeros(batch + (T, D))
    Pp = np.zeros(batch + (T, D, D))
    mf = np.zeros(batch + (T, D))
    Pf = np.zeros(batch + (T, D, D))
    m = np.broadcast_to(aff.b[0], batch + (D,))
    P = np.broadcast_to(aff.C[0], batch + (D, D))
    for i in range(T):
        if i > 0:
            m = matvec(aff.F[i], m) + aff.b[i]
            P = aff.F[i] @ P @ aff.F[i].T + aff.C[i]
        mp[..., i, :], Pp[..., i, :, :] = m, P
        m, P = _kalman_update(m, P, u[..., i, :], R[..., i, :, :])
        mf[..., i, :], Pf[..., i, :, :] = m, P
    ms = mf.copy()
    Ps = Pf.copy()
    for i in range(T - 2, -1, -1):
        J = _solve_right(Pf[..., i, :, :] @ aff.F[i + 1].T, Pp[..., i + 1, :, :])
        ms[..., i, :] = mf[..., i, :] + matvec(J, ms[..., i + 1, :] - mp[..., i + 1, :])
        Ps[..., i, :, :] = symmetrize(
            Pf[..., i, :, :] + J @ (Ps[..., i + 1, :, :] - Pp[..., i + 1, :, :]) @ np.swapaxes(J, -1, -2)
        )
    return mp, Pp, ms, Ps


def twisted_params_invertible(
    dyn: GaussianDynamics, delta: np.ndarray, u: np.ndarray, obs_cov_kind: str = "identity"
) -> TwistedParams:
    """Twisted parameters from filtering and smoothing moments; needs every C_t invertible."""
    aff = dyn._require_affine()
    delta = np.asarray(delta, dtype=float)
    u = np.asarray(u, dtype=float)
    T, D = dyn.horizon, dyn.dim
    for t in range(T):
        if np.linalg.cond(aff.C[t]) > 1e14:
            raise SingularMatrixError(f"C_{t + 1} is singular")
    R = np.broadcast_to(_obs_cov(dyn, delta, obs_cov_kind), u.shape[:-1] + (D, D))
    mp, Pp, ms, Ps = kalman_filter_rts(dyn, u, R)
    eye = np.eye(D)
    C_inv = np.linalg.solve(aff.C, eye)
    Ps_inv = np.linalg.solve(Ps, eye)
    Pp_inv = np.linalg.solve(Pp, eye)
    prec = symmetrize(C_inv + Ps_inv - Pp_inv)
    S = symmetrize(np.linalg.solve(prec, np.broadcast_to(eye, prec.shape)))
    F = S @ C_inv @ aff.F
    F[..., 0, :, :] = 0.0
    rhs = matvec(C_inv, aff.b) + matvec(Ps_inv, ms) - matvec(Pp_inv, mp)
    b = matvec(S, rhs)
    return TwistedParams(F, b, S)
