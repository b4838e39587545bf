"""Dense Gaussian kernels and structured-matrix identities.

Everything here broadcasts over leading axes: a covariance of shape
``(..., D, D)`` pairs with vectors of shape ``(..., D)``. The sweep engine
relies on this to evaluate all particles of all chains in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

_SYM_TOL = 1e-8


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a matrix that must be inverted is numerically singular."""


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Batched ``m @ v`` for matrices ``(..., D, D)`` and vectors ``(..., D)``."""
    return np.einsum("...ij,...j->...i", m, v)


@dataclass(frozen=True, eq=False)
class SpdMatrix:
    """A (possibly batched) symmetric positive-definite matrix with cached factors.

    ``chol`` is the lower Cholesky factor and ``chol_inv`` its inverse, so that
    ``x^T C^{-1} x = |chol_inv @ x|^2``. Inputs are symmetrized first; an
    asymmetry beyond round-off is treated as a caller bug.
    """

    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)
    chol_inv: np.ndarray = field(init=False, repr=False)
    logdet: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        c = np.asarray(self.cov, dtype=float)
        if c.ndim < 2 or c.shape[-1] != c.shape[-2]:
            raise ValueError(f"expected square matrices, got shape {c.shape}")
        scale = max(1.0, float(np.max(np.abs(c)))) if c.size else 1.0
        if c.size and np.max(np.abs(c - np.swapaxes(c, -1, -2))) > _SYM_TOL * scale:
            raise ValueError("covariance is not symmetric")
        c = symmetrize(c)
        try:
            chol = np.linalg.cholesky(c)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("covariance is not positive definite") from exc
        eye = np.broadcast_to(np.eye(c.shape[-1]), c.shape)
        chol_inv = np.linalg.solve(chol, eye)
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
        object.__setattr__(self, "cov", c)
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "chol_inv", chol_inv)
        object.__setattr__(self, "logdet", logdet)

    @property
    def dim(self) -> int:
        return self.cov.shape[-1]

    @property
    def precision(self) -> np.ndarray:
        return np.swapaxes(self.chol_inv, -1, -2) @ self.chol_inv

    def whiten(self, v: np.ndarray) -> np.ndarray:
        return matvec(self.chol_inv, v)

    def quad(self, v: np.ndarray) -> np.ndarray:
        """``v^T C^{-1} v`` along the last axis."""
        z = self.whiten(v)
        return np.sum(z * z, axis=-1)


def as_spd(cov: np.ndarray | SpdMatrix) -> SpdMatrix:
    return cov if isinstance(cov, SpdMatrix) else SpdMatrix(np.asarray(cov, dtype=float))


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray | SpdMatrix) -> np.ndarray:
    """Log density of N(mean, cov) at x, broadcasting over leading axes."""
    cov = as_spd(cov)
    diff = np.asarray(x, dtype=float) - mean
    return -0.5 * (cov.quad(diff) + cov.logdet + cov.dim * LOG_2PI)


def mvn_sample(
    mean: np.ndarray,
    cov: np.ndarray | SpdMatrix,
    rng: np.random.Generator,
    size: tuple[int, ...] | None = None,
) -> np.ndarray:
    """Draw from N(mean, cov). ``size`` defaults to the broadcast shape of the inputs."""
    cov = as_spd(cov)
    mean = np.asarray(mean, dtype=float)
    if size is None:
        size = np.broadcast_shapes(mean.shape, cov.cov.shape[:-1])
    z = rng.standard_normal(size)
    return mean + matvec(cov.chol, z)


def iso_logpdf(x: np.ndarray, mean: np.ndarray, var: np.ndarray | float) -> np.ndarray:
    """Log density of N(mean, var * I); ``var`` broadcasts against ``x[..., 0]``."""
    diff = x - mean
    d = diff.shape[-1]
    var = np.asarray(var, dtype=float)
    return -0.5 * (np.sum(diff * diff, axis=-1) / var + d * np.log(2.0 * np.pi * var))


# Block matrices M_N(A, B) = I_N (x) A + 1_{NxN} (x) B.


def block_det(a: np.ndarray, b: np.ndarray, n: int) -> float:
    """Determinant of M_N(A, B) without forming the ND x ND matrix."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if n < 1:
        raise ValueError("n must be positive")
    return float(np.linalg.det(a) ** (n - 1) * np.linalg.det(a + n * b))


def block_inv_params(a: np.ndarray, b: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (F, G) with M_N(F, G) equal to the inverse of M_N(A, B)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    eye = np.eye(a.shape[-1])
    try:
        a_inv = _checked_solve(a, eye)
        s_inv = _checked_solve(a + n * b, eye)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("A or A + N B is singular") from exc
    return a_inv, -s_inv @ b @ a_inv


def _checked_solve(m: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if np.linalg.cond(m) > 1e14:
        raise np.linalg.LinAlgError("ill-conditioned matrix")
    return np.linalg.solve(m, rhs)


# Gain matrices.


@dataclass(frozen=True, eq=False)
class SpectralCache:
    """Eigendecomposition of a fixed covariance, C = U diag(lam) U^T.

    Once built, the gain matrix for any step size costs O(D^2) per entry
    instead of a fresh solve.
    """

    vectors: np.ndarray
    values: np.ndarray

    @classmethod
    def from_cov(cls, c: np.ndarray) -> "SpectralCache":
        lam, u = np.linalg.eigh(symmetrize(np.asarray(c, dtype=float)))
        if np.any(lam <= 0):
            raise np.linalg.LinAlgError("covariance is not positive definite")
        return cls(vectors=u, values=lam)

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T

    def gain_eigenvalues(self, delta: np.ndarray | float) -> np.ndarray:
        delta = np.asarray(delta, dtype=float)[..., None]
        return 2.0 * self.values / (2.0 * self.values + delta)

    def from_eigenvalues(self, ev: np.ndarray) -> np.ndarray:
        """U diag(ev) U^T, batched over the leading axes of ``ev``."""
        return np.einsum("ij,...j,kj->...ik", self.vectors, ev, self.vectors)

    def gain(self, delta: np.ndarray | float) -> np.ndarray:
        return self.from_eigenvalues(self.gain_eigenvalues(delta))


def gain_matrix(
    c: np.ndarray | SpdMatrix,
    delta: float | np.ndarray,
    spectral: SpectralCache | None = None,
) -> np.ndarray:
    """A = (C + (delta/2) I)^{-1} C.

    With a spectral cache this is U diag(2 lam / (2 lam + delta)) U^T.
    """
    if np.any(np.asarray(delta) <= 0):
        raise ValueError("delta must be positive")
    if spectral is not None:
        return spectral.gain(delta)
    cm = c.cov if isinstance(c, SpdMatrix) else np.asarray(c, dtype=float)
    d = cm.shape[-1]
    half = 0.5 * np.asarray(delta, dtype=float)[..., None, None]
    return np.linalg.solve(cm + half * np.eye(d), cm)


def marginal_proposal_cov(a: np.ndarray, delta: float | np.ndarray) -> np.ndarray:
    """Covariance (delta/2)(A^2 + A) of one proposal once the auxiliary draw is integrated out."""
    half = 0.5 * np.asarray(delta, dtype=float)[..., None, None]
    return half * (a @ a + a)


@dataclass(frozen=True, eq=False)
class CovFactor:
    """Square root S with C = S S^T, its inverse and log det C.

    Unlike SpdMatrix the root need not be triangular, which lets covariances
    sharing an eigenbasis skip a Cholesky factorization. Arrays broadcast over
    leading axes.
    """

    sqrt: np.ndarray
    white: np.ndarray
    logdet: np.ndarray

    @classmethod
    def from_cov(cls, c: np.ndarray) -> "CovFactor":
        c = symmetrize(np.asarray(c, dtype=float))
        chol = np.linalg.cholesky(c)
        eye = np.broadcast_to(np.eye(c.shape[-1]), c.shape)
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
        return cls(chol, np.linalg.solve(chol, eye), logdet)

    @classmethod
    def from_eigen(cls, vectors: np.ndarray, values: np.ndarray) -> "CovFactor":
        """C = U diag(values) U^T with ``values`` shaped ``(..., D)``."""
        root = np.sqrt(values)
        return cls(
            vectors * root[..., None, :],
            np.swapaxes(vectors, -1, -2) / root[..., :, None],
            np.sum(np.log(values), axis=-1),
        )

    @classmethod
    def scaled(cls, spd: SpdMatrix, scale: np.ndarray | float) -> "CovFactor":
        """Factor of ``scale * C`` given a factored C; ``scale`` broadcasts over leading axes."""
        scale = np.asarray(scale, dtype=float)
        root = np.sqrt(scale)[..., None, None]
        return cls(root * spd.chol, spd.chol_inv / root, spd.logdet + spd.dim * np.log(scale))

    @property
    def dim(self) -> int:
        return self.sqrt.shape[-1]

    def sample(self, mean: np.ndarray, z: np.ndarray) -> np.ndarray:
        return mean + matvec(self.sqrt, z)

    def quad(self, v: np.ndarray) -> np.ndarray:
        w = matvec(self.white, v)
        return np.sum(w * w, axis=-1)

    def logpdf(self, x: np.ndarray, mean: np.ndarray) -> np.ndarray:
        return -0.5 * (self.quad(x - mean) + self.logdet + self.dim * LOG_2PI)

    def index(self, key) -> "CovFactor":
        return CovFactor(self.sqrt[key], self.white[key], self.logdet[key])
