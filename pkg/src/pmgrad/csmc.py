"""Conditional SMC sweep engine shared by every kernel strategy.

A sweep embeds the current path (the reference) into a particle system,
runs the conditional particle filter forward and draws a new path backward.
Strategies plug in the proposal, the weights and the backward factor; the
engine owns slot selection, resampling, forced-move selection and the
backward pass.

Arrays carry a leading chain axis ``B`` so that independent chains are
advanced together: particles at one time step are ``(B, P, D)`` with
``P = N + 1``. RNG draws happen in a fixed order: auxiliary variables for
all t, then per time step the reference slots, the ancestors and the
proposals, and finally the final-index and backward draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .model import FeynmanKacModel, GaussianDynamics, log_target

RESAMPLING_SCHEMES = ("multinomial", "killing")
BACKWARD_MODES = ("backward_sampling", "ancestor_tracing")


class SweepError(FloatingPointError):
    def __init__(self, t: int, n: int, msg: str = "NaN log-weight"):
        super().__init__(f"{msg} at t={t}, particle {n}")
        self.t = t
        self.n = n


@dataclass
class SweepConfig:
    N: int
    step_sizes: np.ndarray
    kappa: int = 1
    resampling_scheme: str = "multinomial"
    backward: str = "backward_sampling"
    forced_move: bool = True
    seed: int | None = None

    def __post_init__(self) -> None:
        self.step_sizes = np.asarray(self.step_sizes, dtype=float)
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if np.any(self.step_sizes <= 0):
            raise ValueError("step sizes must be positive")
        if self.kappa not in (0, 1):
            raise ValueError("kappa must be 0 or 1")
        if self.resampling_scheme not in RESAMPLING_SCHEMES:
            raise ValueError(f"unknown resampling scheme {self.resampling_scheme!r}")
        if self.backward not in BACKWARD_MODES:
            raise ValueError(f"unknown backward mode {self.backward!r}")


class KernelStrategy(Protocol):
    """What the engine needs from a named algorithm.

    ``begin_sweep`` draws the auxiliary variables from the reference path and
    returns a per-sweep context. The remaining methods are evaluated for all
    particles at once. ``log_q_back(t, x2, x1, x0, ctx)`` returns log Q'_t at
    the lineage (x_{t-2}, x_{t-1}, x_t); ``x2`` is only read when
    ``markov_order == 2``.
    """

    name: str
    markov_order: int

    def begin_sweep(
        self, ref: np.ndarray, delta: np.ndarray, n_particles: int, rng: np.random.Generator
    ) -> object: ...

    def propose(self, t: int, x_prev: np.ndarray | None, ctx: object, rng: np.random.Generator) -> np.ndarray: ...

    def log_weights(
        self, t: int, x: np.ndarray, x_prev: np.ndarray | None, x_prev2: np.ndarray | None, ctx: object
    ) -> np.ndarray: ...

    def log_q_back(
        self, t: int, x2: np.ndarray | None, x1: np.ndarray, x0: np.ndarray, ctx: object
    ) -> np.ndarray: ...


@dataclass
class ParticleSweepState:
    """Forward-pass output. Lists are indexed by t - 1."""

    particles: list[np.ndarray] = field(default_factory=list)  # (B, P, D)
    ancestors: list[np.ndarray] = field(default_factory=list)  # (B, P); entry 0 unused
    lineage_prev: list[np.ndarray | None] = field(default_factory=list)  # x_{t-1}^{(n)}
    lineage_prev2: list[np.ndarray | None] = field(default_factory=list)  # x_{t-2}^{(n)}
    ref_slots: list[np.ndarray] = field(default_factory=list)  # (B,)
    log_weights: list[np.ndarray] = field(default_factory=list)  # (B, P), unnormalized
    ctx: object = None

    @property
    def horizon(self) -> int:
        return len(self.particles)

    def normalized(self, t: int) -> np.ndarray:
        return normalize_log_weights(self.log_weights[t - 1])


@dataclass
class SweepResult:
    states: np.ndarray  # (B, T, D)
    accept: np.ndarray  # (B, T) bool
    energy: np.ndarray  # (B,)


def normalize_log_weights(logw: np.ndarray) -> np.ndarray:
    m = np.max(logw, axis=-1, keepdims=True)
    w = np.exp(logw - m)
    return w / np.sum(w, axis=-1, keepdims=True)


def _categorical_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Draw one index per uniform in ``u`` (shape ``(B, M)``) from row ``b`` of ``probs``."""
    cdf = np.cumsum(probs, axis=-1)
    cdf /= cdf[..., -1:]
    return np.sum(u[..., :, None] > cdf[..., None, :-1], axis=-1)


def conditional_resample(
    weights: np.ndarray,
    k: np.ndarray,
    k_prev: np.ndarray,
    scheme: str,
    rng: np.random.Generator,
) -> np.ndarray:
    """Ancestor indices for all slots; slot ``k`` is pinned to ``k_prev``.

    ``weights`` is ``(B, P)`` and normalized. Under killing, slot n keeps its
    own index with probability W^n / max_m W^m and redraws from W otherwise.
    """
    B, P = weights.shape
    redraw = _categorical_rows(weights, rng.random((B, P)))
    if scheme == "multinomial":
        anc = redraw
    elif scheme == "killing":
        keep = rng.random((B, P)) < weights / np.max(weights, axis=-1, keepdims=True)
        anc = np.where(keep, np.arange(P)[None, :], redraw)
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    anc[np.arange(B), k] = k_prev
    return anc


def killing_slot_probs(weights: np.ndarray, k_prev: np.ndarray) -> np.ndarray:
    """P(slot j descends from k_prev) under killing, normalized over j.

    This is the law of the reference slot once the reference ancestor is
    fixed; under multinomial resampling it is uniform.
    """
    B, P = weights.shape
    rows = np.arange(B)
    w_max = np.max(weights, axis=-1, keepdims=True)
    # every entry carries a factor W^{k_prev}; dividing it out avoids 0/0
    # when that weight underflows
    p = 1.0 - weights / w_max
    p[rows, k_prev] += 1.0 / w_max[:, 0]
    return p / np.sum(p, axis=-1, keepdims=True)


def forced_move_select(
    weights: np.ndarray, k: np.ndarray, rng: np.random.Generator, forced_move: bool = True
) -> np.ndarray:
    """Final-time index l_T for each chain.

    With the forced move a candidate i != k is drawn with probability
    W^i / (1 - W^k) and accepted with probability min{1, (1 - W^k)/(1 - W^i)}.
    """
    B, P = weights.shape
    rows = np.arange(B)
    if not forced_move:
        return _categorical_rows(weights, rng.random((B, 1)))[:, 0]
    others = weights.copy()
    others[rows, k] = 0.0
    u_pick, u_acc = rng.random(B), rng.random(B)
    rest = np.sum(others, axis=-1)
    degenerate = rest <= 1e-300
    others[degenerate] = 1.0
    others[rows, k] = 0.0
    cand = _categorical_rows(others, u_pick[:, None])[:, 0]
    w_k = weights[rows, k]
    w_i = weights[rows, cand]
    # 1 - W^k and 1 - W^i as sums of the remaining weights, which keeps
    # precision when one weight is close to 1.
    not_i = rest - w_i + w_k
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(not_i > 0, rest / not_i, np.inf)
    accept = (u_acc < np.minimum(1.0, ratio)) & ~degenerate
    return np.where(accept, cand, k)


def forward_pass(
    model: FeynmanKacModel,
    strategy: KernelStrategy,
    config: SweepConfig,
    ref: np.ndarray,
    rng: np.random.Generator,
    delta: np.ndarray | None = None,
) -> ParticleSweepState:
    """Run the conditional particle filter with ``ref`` shaped ``(B, T, D)``."""
    B, T, D = ref.shape
    P = config.N + 1
    rows = np.arange(B)
    if delta is None:
        delta = config.step_sizes
    delta = np.broadcast_to(np.asarray(delta, dtype=float), (B, T))
    state = ParticleSweepState()
    state.ctx = strategy.begin_sweep(ref, delta, P, rng)
    prev_w = None
    for t in range(1, T + 1):
        if t == 1 or config.resampling_scheme == "multinomial":
            k = rng.integers(P, size=B)
        else:
            slot_p = killing_slot_probs(prev_w, state.ref_slots[-1])
            k = _categorical_rows(slot_p, rng.random((B, 1)))[:, 0]
        if t == 1:
            anc = np.zeros((B, P), dtype=int)
            x_prev = x_prev2 = None
        else:
            anc = conditional_resample(prev_w, k, state.ref_slots[-1], config.resampling_scheme, rng)
            x_prev = np.take_along_axis(state.particles[-1], anc[..., None], axis=1)
            x_prev2 = None
            if t > 2 and strategy.markov_order == 2:
                x_prev2 = np.take_along_axis(state.lineage_prev[-1], anc[..., None], axis=1)
        x = strategy.propose(t, x_prev, state.ctx, rng)
        x[rows, k] = ref[:, t - 1]
        logw = np.asarray(strategy.log_weights(t, x, x_prev, x_prev2, state.ctx), dtype=float)
        bad = np.isnan(logw) | np.isposinf(logw)
        bad[rows, k] |= np.isneginf(logw[rows, k])
        if np.any(bad):
            _, n = np.argwhere(bad)[0]
            raise SweepError(t, int(n))
        state.particles.append(x)
        state.ancestors.append(anc)
        state.lineage_prev.append(x_prev)
        state.lineage_prev2.append(x_prev2)
        state.ref_slots.append(k)
        state.log_weights.append(logw)
        prev_w = normalize_log_weights(logw)
    return state


def ancestor_trace(state: ParticleSweepState, l_T: np.ndarray) -> np.ndarray:
    """Follow ancestors back from l_T: l_t = a_t^{l_{t+1}}."""
    T = state.horizon
    B = l_T.shape[0]
    rows = np.arange(B)
    l = np.zeros((B, T), dtype=int)
    l[:, T - 1] = l_T
    for t in range(T - 1, 0, -1):
        l[:, t - 1] = state.ancestors[t][rows, l[:, t]]
    return l


def backward_sample_first_order(
    state: ParticleSweepState, strategy: KernelStrategy, l_T: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draw l_t with probability proportional to W_t^i Q'_{t+1}(x_t^i, x_{t+1}^{l_{t+1}})."""
    T = state.horizon
    B = l_T.shape[0]
    rows = np.arange(B)
    l = np.zeros((B, T), dtype=int)
    l[:, T - 1] = l_T
    for t in range(T - 1, 0, -1):
        x_next = state.particles[t][rows, l[:, t]][:, None, :]
        logp = state.log_weights[t - 1] + strategy.log_q_back(
            t + 1, None, state.particles[t - 1], x_next, state.ctx
        )
        l[:, t - 1] = _categorical_rows(normalize_log_weights(logp), rng.random((B, 1)))[:, 0]
    return l


def backward_sample_second_order(
    state: ParticleSweepState, strategy: KernelStrategy, l_T: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Backward pass for potentials reading two past states.

    l_t is drawn proportional to
    W_t^i Q'_{t+1}(x_{t-1}^{(i)}, x_t^i, x_{t+1}^{l}) Q'_{t+2}(x_t^i, x_{t+1}^{l}, x_{t+2}^{l}),
    with Q'_{T+1} = 1.
    """
    T = state.horizon
    B = l_T.shape[0]
    rows = np.arange(B)
    l = np.zeros((B, T), dtype=int)
    l[:, T - 1] = l_T
    for t in range(T - 1, 0, -1):
        x_t = state.particles[t - 1]
        x_next = state.particles[t][rows, l[:, t]][:, None, :]
        logp = state.log_weights[t - 1] + strategy.log_q_back(
            t + 1, state.lineage_prev[t - 1], x_t, x_next, state.ctx
        )
        if t + 2 <= T:
            x_next2 = state.particles[t + 1][rows, l[:, t + 1]][:, None, :]
            logp = logp + strategy.log_q_back(t + 2, x_t, x_next, x_next2, state.ctx)
        l[:, t - 1] = _categorical_rows(normalize_log_weights(logp), rng.random((B, 1)))[:, 0]
    return l


def select_path(
    state: ParticleSweepState,
    strategy: KernelStrategy,
    config: SweepConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Pick output indices l_{1:T} and return (l, states shaped (B, T, D))."""
    T = state.horizon
    l_T = forced_move_select(state.normalized(T), state.ref_slots[-1], rng, config.forced_move)
    if config.backward == "ancestor_tracing":
        l = ancestor_trace(state, l_T)
    elif strategy.markov_order == 2:
        l = backward_sample_second_order(state, strategy, l_T, rng)
    else:
        l = backward_sample_first_order(state, strategy, l_T, rng)
    B = l.shape[0]
    rows = np.arange(B)
    out = np.stack([state.particles[t][rows, l[:, t]] for t in range(T)], axis=1)
    return l, out


def run_sweep(
    model: FeynmanKacModel,
    dynamics: GaussianDynamics | None,
    strategy: KernelStrategy,
    config: SweepConfig,
    ref_traj: np.ndarray,
    rng: np.random.Generator,
    delta: np.ndarray | None = None,
) -> SweepResult:
    """One application of the strategy's Markov kernel.

    ``ref_traj`` is ``(T, D)`` or a batch ``(B, T, D)``; outputs match.
    ``dynamics`` is accepted for signature symmetry; strategies already hold it.
    """
    ref = np.asarray(ref_traj, dtype=float)
    single = ref.ndim == 2
    if single:
        ref = ref[None]
    if not np.all(np.isfinite(ref)):
        raise ValueError("reference path must be finite")
    state = forward_pass(model, strategy, config, ref, rng, delta)
    l, new = select_path(state, strategy, config, rng)
    k = np.stack(state.ref_slots, axis=1)
    accept = (l != k) | np.any(new != ref, axis=-1)
    energy = log_target(model, new[:, None])[:, 0]
    if single:
        return SweepResult(new[0], accept[0], energy[0])
    return SweepResult(new, accept, energy)
