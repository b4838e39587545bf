"""Feynman-Kac targets and the two benchmark state-space models.

A model is a sequence of positive factors Q_t(x_{t-1}, x_t) = M_t * G_t on
R^D for t = 1..T. The target is pi_T(x_{1:T}) proportional to prod_t Q_t.

Time indices are 1-based in every public signature. At t = 1 the previous
state is ``None`` and must not be read. All callables broadcast over leading
axes, so ``x`` may be a single state ``(D,)`` or a stack ``(..., D)``.

Observations may carry a leading chain axis ``(B, T, D)`` so that B
independent datasets are sampled side by side; states passed to such a model
must then be shaped ``(B, n, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .gauss import LOG_2PI, SpdMatrix, SpectralCache, matvec

LogFn = Callable[[int, Optional[np.ndarray], np.ndarray], np.ndarray]
GradFn = Callable[[int, Optional[np.ndarray], np.ndarray], np.ndarray]
SampleFn = Callable[[int, Optional[np.ndarray], np.random.Generator, tuple], np.ndarray]


class ModelError(ValueError):
    """Invalid model configuration, or a strategy asking for missing structure."""


class ModelEvaluationError(FloatingPointError):
    """A model returned a non-finite value."""

    def __init__(self, t: int, what: str):
        super().__init__(f"non-finite {what} at t={t}")
        self.t = t


@dataclass(frozen=True)
class Decomposition:
    """Factorization Q_t = M_t * G_t into a samplable mutation and a potential."""

    log_m: LogFn
    sample_m: SampleFn
    log_g: LogFn
    grad_log_g_wrt_x: GradFn
    grad_log_g_wrt_xprev: GradFn


@dataclass(frozen=True)
class FeynmanKacModel:
    horizon: int
    dim: int
    log_q: LogFn
    grad_log_q_wrt_x: GradFn
    grad_log_q_wrt_xprev: GradFn
    decomposition: Decomposition | None = None
    finite_difference: bool = False

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.dim < 1:
            raise ModelError("horizon and dim must be positive")

    def require_decomposition(self) -> Decomposition:
        if self.decomposition is None:
            raise ModelError("this operation needs a model with a mutation/potential decomposition")
        return self.decomposition


@dataclass(frozen=True)
class AffineDynamics:
    """m_t(x) = F_t x + b_t with constant covariances C_t; F_1 is ignored."""

    F: np.ndarray  # (T, D, D)
    b: np.ndarray  # (T, D)
    C: np.ndarray  # (T, D, D)


class GaussianDynamics:
    """Conditionally Gaussian mutation kernels M_t = N(m_t(x_{t-1}), C_t(x_{t-1})).

    ``mean_fn(t, x_prev)`` returns ``(..., D)``. ``cov_fn(t, x_prev)`` returns
    ``(..., D, D)``, or ``(D, D)`` when ``constant_cov`` holds. Factors of
    constant covariances are cached at construction.
    """

    def __init__(
        self,
        horizon: int,
        dim: int,
        mean_fn: Callable[[int, Optional[np.ndarray]], np.ndarray],
        cov_fn: Callable[[int, Optional[np.ndarray]], np.ndarray],
        constant_cov: bool = False,
        affine: AffineDynamics | None = None,
    ):
        if affine is not None and not constant_cov:
            raise ModelError("affine dynamics require constant covariances")
        self.horizon = horizon
        self.dim = dim
        self.mean_fn = mean_fn
        self.cov_fn = cov_fn
        self.constant_cov = constant_cov
        self.affine = affine
        self._spd: list[SpdMatrix] = []
        self._spectral: list[SpectralCache] = []
        if constant_cov:
            for t in range(1, horizon + 1):
                c = np.asarray(cov_fn(t, None), dtype=float)
                try:
                    self._spd.append(SpdMatrix(c))
                except np.linalg.LinAlgError as exc:
                    raise ModelError(f"C_{t} is not positive definite") from exc
                self._spectral.append(SpectralCache.from_cov(c))

    @classmethod
    def from_affine(cls, F: np.ndarray, b: np.ndarray, C: np.ndarray) -> "GaussianDynamics":
        F = np.asarray(F, dtype=float)
        b = np.asarray(b, dtype=float)
        C = np.asarray(C, dtype=float)
        T, D = b.shape
        F = F.copy()
        F[0] = 0.0
        aff = AffineDynamics(F=F, b=b, C=C)

        def mean_fn(t: int, x_prev: np.ndarray | None) -> np.ndarray:
            if t == 1 or x_prev is None:
                return aff.b[0]
            return matvec(aff.F[t - 1], x_prev) + aff.b[t - 1]

        def cov_fn(t: int, x_prev: np.ndarray | None = None) -> np.ndarray:
            return aff.C[t - 1]

        return cls(T, D, mean_fn, cov_fn, constant_cov=True, affine=aff)

    def cov_spd(self, t: int) -> SpdMatrix:
        if not self.constant_cov:
            raise ModelError("covariance depends on the previous state")
        return self._spd[t - 1]

    def spectral(self, t: int) -> SpectralCache:
        if not self.constant_cov:
            raise ModelError("covariance depends on the previous state")
        return self._spectral[t - 1]

    def cov(self, t: int, x_prev: np.ndarray | None) -> np.ndarray:
        if self.constant_cov:
            return self._spd[t - 1].cov
        return np.asarray(self.cov_fn(t, x_prev if t > 1 else None), dtype=float)

    def mean(self, t: int, x_prev: np.ndarray | None) -> np.ndarray:
        return np.asarray(self.mean_fn(t, x_prev if t > 1 else None), dtype=float)

    def prior_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Marginal means mu_t and covariances Sigma_t of the affine prior."""
        aff = self._require_affine()
        T, D = aff.b.shape
        mu = np.zeros((T, D))
        sig = np.zeros((T, D, D))
        mu[0], sig[0] = aff.b[0], aff.C[0]
        for i in range(1, T):
            mu[i] = aff.F[i] @ mu[i - 1] + aff.b[i]
            sig[i] = aff.F[i] @ sig[i - 1] @ aff.F[i].T + aff.C[i]
        return mu, sig

    def _require_affine(self) -> AffineDynamics:
        if self.affine is None:
            raise ModelError("this operation needs affine dynamics m_t(x) = F_t x + b_t")
        return self.affine


# Derived quantities.


def log_target(model: FeynmanKacModel, states: np.ndarray) -> np.ndarray:
    """Unnormalized log pi_T for paths shaped ``(..., T, D)``."""
    states = np.asarray(states, dtype=float)
    if states.shape[-2:] != (model.horizon, model.dim):
        raise ValueError(f"expected trailing shape {(model.horizon, model.dim)}, got {states.shape}")
    total = 0.0
    for t in range(1, model.horizon + 1):
        xp = states[..., t - 2, :] if t > 1 else None
        val = model.log_q(t, xp, states[..., t - 1, :])
        if not np.all(np.isfinite(val)):
            raise ModelEvaluationError(t, "log Q")
        total = total + val
    return np.asarray(total)


def grad_filter(model: FeynmanKacModel, t: int, x_prev: np.ndarray | None, x: np.ndarray) -> np.ndarray:
    """Gradient of log pi_t with respect to its last state, i.e. of log Q_t in x_t."""
    return model.grad_log_q_wrt_x(t, x_prev if t > 1 else None, x)


def grad_smoothing(
    model: FeynmanKacModel,
    t: int,
    x_prev: np.ndarray | None,
    x: np.ndarray,
    x_next: np.ndarray | None,
) -> np.ndarray:
    """Gradient of log pi_T in x_t: d/dx_t [log Q_t + log Q_{t+1}]."""
    g = model.grad_log_q_wrt_x(t, x_prev if t > 1 else None, x)
    if t < model.horizon:
        g = g + model.grad_log_q_wrt_xprev(t + 1, x, x_next)
    return g


def grad_potential_smoothing(
    model: FeynmanKacModel,
    t: int,
    x_prev: np.ndarray | None,
    x: np.ndarray,
    x_next: np.ndarray | None,
) -> np.ndarray:
    """d/dx_t [log G_t + log G_{t+1}], the potential-only analogue of grad_smoothing."""
    dec = model.require_decomposition()
    g = dec.grad_log_g_wrt_x(t, x_prev if t > 1 else None, x)
    if t < model.horizon:
        g = g + dec.grad_log_g_wrt_xprev(t + 1, x, x_next)
    return g


def fd_gradient(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function along the last axis of x."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for d in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[d] = eps
        out[..., d] = (f(x + e) - f(x - e)) / (2 * eps)
    return out


def model_with_fd_gradients(
    horizon: int,
    dim: int,
    log_q: LogFn,
    decomposition: Decomposition | None = None,
    eps: float = 1e-5,
) -> FeynmanKacModel:
    """Build a model whose gradients come from central finite differences.

    Slower than analytic gradients and accurate to roughly 1e-5.
    """

    def gx(t, xp, x):
        return fd_gradient(lambda z: log_q(t, xp, z), x, eps)

    def gxp(t, xp, x):
        if t == 1 or xp is None:
            return np.zeros_like(np.asarray(x, dtype=float))
        return fd_gradient(lambda z: log_q(t, z, x), xp, eps)

    return FeynmanKacModel(horizon, dim, log_q, gx, gxp, decomposition, finite_difference=True)


# Built-in models.


def _obs_array(observations: np.ndarray, T: int, D: int) -> np.ndarray:
    y = np.asarray(observations, dtype=float)
    if y.shape[-2:] != (T, D) or y.ndim not in (2, 3):
        raise ModelError(f"observations must be shaped (T, D) or (B, T, D) with T={T}, D={D}")
    return y


def _y_at(y: np.ndarray, t: int) -> np.ndarray:
    if y.ndim == 2:
        return y[t - 1]
    return y[:, t - 1, None, :]


def _gaussian_model(
    dyn: GaussianDynamics,
    log_g: LogFn,
    grad_log_g_wrt_x: GradFn,
    grad_log_g_wrt_xprev: GradFn,
) -> FeynmanKacModel:
    """Assemble Q_t = N(x_t; F_t x_{t-1} + b_t, C_t) G_t from affine dynamics."""
    aff = dyn.affine
    assert aff is not None
    T, D = dyn.horizon, dyn.dim
    prec = [dyn.cov_spd(t).precision for t in range(1, T + 1)]

    def resid(t, xp, x):
        return np.asarray(x, dtype=float) - dyn.mean(t, xp)

    def log_m(t, xp, x):
        return _spd_logpdf(dyn.cov_spd(t), resid(t, xp, x))

    def sample_m(t, xp, rng, shape=()):
        mean = dyn.mean(t, xp)
        shape = tuple(shape) if xp is None else np.shape(xp)[:-1]
        z = rng.standard_normal(shape + (D,))
        return mean + matvec(dyn.cov_spd(t).chol, z)

    def grad_m_x(t, xp, x):
        return -matvec(prec[t - 1], resid(t, xp, x))

    def grad_m_xp(t, xp, x):
        if t == 1 or xp is None:
            return np.zeros_like(np.asarray(x, dtype=float))
        return matvec(aff.F[t - 1].T @ prec[t - 1], resid(t, xp, x))

    def log_q(t, xp, x):
        return log_m(t, xp, x) + log_g(t, xp, x)

    def grad_q_x(t, xp, x):
        return grad_m_x(t, xp, x) + grad_log_g_wrt_x(t, xp, x)

    def grad_q_xp(t, xp, x):
        return grad_m_xp(t, xp, x) + grad_log_g_wrt_xprev(t, xp, x)

    dec = Decomposition(log_m, sample_m, log_g, grad_log_g_wrt_x, grad_log_g_wrt_xprev)
    return FeynmanKacModel(T, D, log_q, grad_q_x, grad_q_xp, dec)


def _spd_logpdf(cov: SpdMatrix, diff: np.ndarray) -> np.ndarray:
    return -0.5 * (cov.quad(diff) + cov.logdet + cov.dim * LOG_2PI)


def _zeros_like_x(t, xp, x):
    return np.zeros_like(np.asarray(x, dtype=float))


def make_lgssm(
    D: int, T: int, lambda_scale: float, observations: np.ndarray
) -> tuple[FeynmanKacModel, GaussianDynamics]:
    """Random walk M_t = N(x_{t-1}, lambda I), M_1 = N(0, lambda I), G_t = N(y_t; x_t, I)."""
    if lambda_scale <= 0:
        raise ModelError("lambda_scale must be positive")
    y = _obs_array(observations, T, D)
    eye = np.eye(D)
    dyn = GaussianDynamics.from_affine(
        F=np.broadcast_to(eye, (T, D, D)),
        b=np.zeros((T, D)),
        C=np.broadcast_to(lambda_scale * eye, (T, D, D)),
    )

    def log_g(t, xp, x):
        r = _y_at(y, t) - x
        return -0.5 * (np.sum(r * r, axis=-1) + D * LOG_2PI)

    def grad_g_x(t, xp, x):
        return _y_at(y, t) - x

    return _gaussian_model(dyn, log_g, grad_g_x, _zeros_like_x), dyn


def stochvol_cov(D: int, rho: float, tau: float) -> np.ndarray:
    """Equicorrelated innovation covariance: tau on the diagonal, tau * rho elsewhere."""
    return tau * ((1.0 - rho) * np.eye(D) + rho * np.ones((D, D)))


def make_stochvol(
    D: int, T: int, phi: float, rho: float, tau: float, observations: np.ndarray
) -> tuple[FeynmanKacModel, GaussianDynamics]:
    """Multivariate stochastic volatility with y_t ~ N(0, diag(exp x_t))."""
    if not abs(phi) < 1:
        raise ModelError("need |phi| < 1")
    if not abs(rho) < 1:
        raise ModelError("need |rho| < 1")
    if tau <= 0:
        raise ModelError("tau must be positive")
    c = stochvol_cov(D, rho, tau)
    if np.min(np.linalg.eigvalsh(c)) <= 0:
        raise ModelError(f"innovation covariance not positive definite (rho={rho}, D={D})")
    y = _obs_array(observations, T, D)
    F = np.broadcast_to(phi * np.eye(D), (T, D, D))
    C = np.broadcast_to(c, (T, D, D)).copy()
    C[0] = c / (1.0 - phi**2)
    dyn = GaussianDynamics.from_affine(F=F, b=np.zeros((T, D)), C=C)

    def log_g(t, xp, x):
        y2 = _y_at(y, t) ** 2
        return -0.5 * np.sum(LOG_2PI + x + y2 * np.exp(-x), axis=-1)

    def grad_g_x(t, xp, x):
        y2 = _y_at(y, t) ** 2
        return -0.5 * (1.0 - y2 * np.exp(-x))

    return _gaussian_model(dyn, log_g, grad_g_x, _zeros_like_x), dyn


# Data simulation.


def simulate_states(dyn: GaussianDynamics, rng: np.random.Generator) -> np.ndarray:
    x = np.zeros((dyn.horizon, dyn.dim))
    for t in range(1, dyn.horizon + 1):
        xp = x[t - 2] if t > 1 else None
        cov = SpdMatrix(dyn.cov(t, xp))
        x[t - 1] = dyn.mean(t, xp) + cov.chol @ rng.standard_normal(dyn.dim)
    return x


def simulate_lgssm(D: int, T: int, lambda_scale: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw (x_{1:T}, y_{1:T}) from the random-walk model."""
    rng = np.random.default_rng(seed)
    _, dyn = make_lgssm(D, T, lambda_scale, np.zeros((T, D)))
    x = simulate_states(dyn, rng)
    return x, x + rng.standard_normal((T, D))


def simulate_stochvol(
    D: int, T: int, phi: float, rho: float, tau: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (x_{1:T}, y_{1:T}) from the stochastic volatility model."""
    rng = np.random.default_rng(seed)
    _, dyn = make_stochvol(D, T, phi, rho, tau, np.zeros((T, D)))
    x = simulate_states(dyn, rng)
    return x, np.exp(0.5 * x) * rng.standard_normal((T, D))
