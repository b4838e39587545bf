"""Step-size calibration towards a target per-time-step acceptance rate.

The acceptance history is a rolling window of the last W sweeps. After each
sweep the window mean alpha_t is compared with the target alpha*; outside a
dead zone of half-width sigma the step size moves additively,

    delta_t += max(k^gamma rho, rho_min) (alpha_t - alpha*) / alpha*,

and is floored at 1e-12. In global mode a single step size shared by all
time steps follows the time-averaged acceptance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import time

import numpy as np

from .csmc import SweepConfig, run_sweep
from .strategies import Kernel

DELTA_FLOOR = 1e-12


@dataclass
class AdaptationSettings:
    target: float = 0.75
    sigma: float = 0.05
    window: int = 100
    rho: float = 0.5
    rho_min: float = 1e-3
    gamma: float = -0.5
    delta0: float = 1e-2
    iterations: int = 10_000


@dataclass
class AdaptationState:
    """Per-chain adaptation state; ``delta`` is ``(B, T)``."""

    settings: AdaptationSettings
    delta: np.ndarray
    mode: str = "per_time_step"
    k: int = 0
    history: np.ndarray = field(init=False)
    filled: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("per_time_step", "global"):
            raise ValueError(f"unknown adaptation mode {self.mode!r}")
        self.delta = np.array(self.delta, dtype=float)
        self.history = np.zeros((self.settings.window,) + self.delta.shape, dtype=bool)

    @classmethod
    def start(cls, settings: AdaptationSettings, chains: int, horizon: int, mode: str = "per_time_step"):
        return cls(settings, np.full((chains, horizon), settings.delta0), mode)

    def window_rates(self) -> np.ndarray:
        n = max(1, min(self.filled, self.settings.window))
        return self.history[:n].mean(axis=0)


def adapt_step(state: AdaptationState, accept_flags: np.ndarray) -> np.ndarray:
    """Record one sweep's acceptance indicators and update the step sizes."""
    s = state.settings
    acc = np.broadcast_to(np.asarray(accept_flags, dtype=bool), state.delta.shape)
    state.k += 1
    state.history = np.roll(state.history, 1, axis=0)
    state.history[0] = acc
    state.filled = min(state.filled + 1, s.window)
    alpha = state.window_rates()
    if state.mode == "global":
        alpha = np.broadcast_to(alpha.mean(axis=-1, keepdims=True), alpha.shape)
    rate = max(state.k**s.gamma * s.rho, s.rho_min)
    move = np.abs(alpha - s.target) >= s.sigma
    step = rate * (alpha - s.target) / s.target
    state.delta = np.maximum(np.where(move, state.delta + step, state.delta), DELTA_FLOOR)
    return state.delta


@dataclass
class ChainOutput:
    samples: np.ndarray  # (B, K, T, D), post-burn-in draws
    accept: np.ndarray  # (B, K, T'), T' = 1 for path-space kernels
    energy: np.ndarray  # (B, K)
    delta_trace: np.ndarray  # (n_calibration, B, T)
    delta: np.ndarray  # (B, T), frozen step sizes
    seconds: float  # sampling-phase wall time


def run_calibrated_chain(
    kernel: Kernel,
    config: SweepConfig,
    init: np.ndarray,
    iters: int,
    rng: np.random.Generator,
    settings: AdaptationSettings | None = None,
    burn_in: int = 0,
    keep_samples: bool = True,
    thin: int = 1,
    shared: bool = False,
    calibrate: bool | None = None,
) -> ChainOutput:
    """Calibrate step sizes, freeze them, then run ``burn_in + iters`` sweeps.

    ``init`` is ``(B, T, D)`` in the original (not path-space) coordinates.
    Kernels without a step size, or ``calibrate=False``, run the same number
    of sweeps as plain warm-up at ``config.step_sizes``. With ``shared`` only the first chain is calibrated and every
    chain then starts from its final state with its step sizes.
    """
    settings = settings or AdaptationSettings()
    B, T, D = init.shape
    ref = kernel.to_engine(np.array(init, dtype=float))
    if shared:
        ref = ref[:1]
    Te = ref.shape[1]
    mode = "global" if kernel.global_step else "per_time_step"
    trace = []
    if calibrate is None:
        calibrate = kernel.calibrates
    if calibrate:
        st = AdaptationState.start(settings, ref.shape[0], Te, mode)
        for _ in range(settings.iterations):
            res = run_sweep(kernel.model, kernel.dynamics, kernel.strategy, config, ref, rng, st.delta)
            ref = res.states
            adapt_step(st, res.accept)
            trace.append(st.delta.copy())
        delta = st.delta
    else:
        delta = np.broadcast_to(np.asarray(config.step_sizes, dtype=float), (ref.shape[0], Te)).copy()
        for _ in range(settings.iterations):
            ref = run_sweep(kernel.model, kernel.dynamics, kernel.strategy, config, ref, rng, delta).states
    if shared:
        ref = np.repeat(ref, B, axis=0)
        delta = np.repeat(delta, B, axis=0)

    for _ in range(burn_in):
        ref = run_sweep(kernel.model, kernel.dynamics, kernel.strategy, config, ref, rng, delta).states

    n_keep = iters // thin if keep_samples else 0
    samples = np.zeros((B, n_keep, T, D))
    accept = np.zeros((B, iters, Te), dtype=bool)
    energy = np.zeros((B, iters))
    start = time.monotonic()
    for i in range(iters):
        res = run_sweep(kernel.model, kernel.dynamics, kernel.strategy, config, ref, rng, delta)
        ref = res.states
        accept[:, i] = res.accept
        energy[:, i] = res.energy
        if i % thin == 0 and i // thin < n_keep:
            samples[:, i // thin] = kernel.from_engine(ref, T, D)
    seconds = time.monotonic() - start
    trace_arr = np.array(trace) if trace else np.zeros((0,) + delta.shape[:1] + (Te,))
    return ChainOutput(samples, accept, energy, trace_arr, delta, seconds)
