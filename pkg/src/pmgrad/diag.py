"""Chain diagnostics.

ESS follows the rank-normalized recipe: pool all draws, replace them by
normal scores of their ranks, split every chain in half and estimate the
integrated autocorrelation time from multi-chain autocovariances, truncated
by Geyer's initial monotone sequence rule. Autocovariances are direct sums;
at the chain lengths used here that is fast enough and avoids padding
artefacts.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from .model import FeynmanKacModel, log_target


class EssReport(NamedTuple):
    ess: float
    degenerate: bool


def _split(chains: np.ndarray) -> np.ndarray:
    J, K = chains.shape
    half = K // 2
    return np.concatenate([chains[:, :half], chains[:, K - half :]], axis=0)


def _rank_normalize(chains: np.ndarray) -> np.ndarray:
    ranks = rankdata(chains, method="average").reshape(chains.shape)
    return ndtri((ranks - 0.375) / (chains.size + 0.25))


def _autocov(x: np.ndarray, lag: int) -> np.ndarray:
    """Biased autocovariance at ``lag`` for every row of a centred array."""
    K = x.shape[-1]
    return np.sum(x[..., : K - lag] * x[..., lag:], axis=-1) / K


def _ess_raw(chains: np.ndarray) -> float:
    J, K = chains.shape
    centred = chains - chains.mean(axis=1, keepdims=True)
    acov0 = _autocov(centred, 0)
    mean_var = acov0.mean() * K / (K - 1.0)
    var_plus = mean_var * (K - 1.0) / K
    if J > 1:
        var_plus += chains.mean(axis=1).var(ddof=1)

    def rho(lag: int) -> float:
        return 1.0 - (mean_var - _autocov(centred, lag).mean()) / var_plus

    # Pairwise sums Gamma_m = rho_{2m} + rho_{2m+1}, kept while positive.
    pairs = []
    even = 1.0
    odd = rho(1)
    lag = 1
    while even + odd > 0.0:
        pairs.append(even + odd)
        if lag + 2 >= K:
            break
        even = rho(lag + 1)
        odd = rho(lag + 2)
        lag += 2
    pairs = np.minimum.accumulate(np.array(pairs))
    tau = -1.0 + 2.0 * pairs.sum()
    total = J * K
    tau = max(tau, 1.0 / np.log10(total))
    return float(total / tau)


def ess_report(chains: np.ndarray, split: bool = True) -> EssReport:
    """Rank-normalized multi-chain ESS of ``chains`` shaped ``(J, K)``."""
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2:
        raise ValueError("chains must be a (J, K) array")
    J, K = chains.shape
    if J < 2 or K < 8:
        raise ValueError("need at least 2 chains of 8 draws")
    if not np.all(np.isfinite(chains)):
        raise ValueError("chains contain non-finite values")
    if np.ptp(chains) == 0.0:
        return EssReport(float(J * K), True)
    z = _rank_normalize(_split(chains) if split else chains)
    if np.any(np.ptp(z, axis=1) == 0.0) and np.ptp(z.mean(axis=1)) == 0.0:
        return EssReport(float(J * K), True)
    return EssReport(_ess_raw(z), False)


def ess_rank_normalized(chains: np.ndarray, split: bool = True) -> float:
    return ess_report(chains, split).ess


def ess_by_coordinate(samples: np.ndarray, stuck_as_zero: bool = False) -> np.ndarray:
    """ESS of every trailing coordinate of ``samples`` shaped ``(J, K, ...)``.

    A coordinate that never moves is reported as J*K by ``ess_report``; with
    ``stuck_as_zero`` it counts as 0 instead, which is the honest figure when
    the target itself is not degenerate.
    """
    samples = np.asarray(samples, dtype=float)
    flat = samples.reshape(samples.shape[:2] + (-1,))
    reports = [ess_report(flat[:, :, i]) for i in range(flat.shape[-1])]
    out = np.array([0.0 if (r.degenerate and stuck_as_zero) else r.ess for r in reports])
    return out.reshape(samples.shape[2:])


def summarize(values: np.ndarray) -> dict[str, float]:
    values = np.ravel(values)
    return {"min": float(values.min()), "med": float(np.median(values)), "max": float(values.max())}


def autocorrelation(series: np.ndarray, max_lag: int) -> np.ndarray:
    """Sample autocorrelation at lags ``0..max_lag``; a constant series gives ``[1, 0, ...]``."""
    x = np.asarray(series, dtype=float)
    x = x - x.mean()
    max_lag = min(int(max_lag), x.size - 1)
    out = np.zeros(max_lag + 1)
    out[0] = 1.0
    c0 = _autocov(x, 0)
    if c0 == 0.0:
        return out
    for lag in range(1, max_lag + 1):
        out[lag] = _autocov(x, lag) / c0
    return out


def energy_trace(model: FeynmanKacModel, samples: np.ndarray) -> np.ndarray:
    """log pi_T (up to a constant) of every path in ``samples`` shaped ``(..., T, D)``."""
    return log_target(model, np.asarray(samples, dtype=float))


def acceptance_by_time(accept_flags: np.ndarray) -> np.ndarray:
    """Per-time-step acceptance rate from indicators shaped ``(..., K, T)``."""
    flags = np.asarray(accept_flags, dtype=float)
    return flags.reshape(-1, flags.shape[-1]).mean(axis=0)
