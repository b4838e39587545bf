"""Named conditional-SMC kernels.

Every algorithm is an instance of one generic auxiliary-variable scheme:

* an auxiliary variable u_t ~ N(x_t + phi_t, E_t) is drawn around the
  reference path, with phi_t a (possibly preconditioned) gradient step;
* particles are proposed from a mutation M'_t(x_t | x_{t-1}, u_t);
* weights are Q~_t / M'_t, where Q~_t = Q_t N(u_t; x_t + phi_t, E_t) is the
  extended-target factor, optionally carrying a correction that upgrades the
  gradient at t-1 to the smoothing gradient (the "+" variants);
* the marginal variants integrate u_t out and weight by Q_t H_t instead.

``StrategySpec`` names the components; ``ParticleStrategy`` executes them.
``build_kernel`` maps CLI names to fully configured kernels, including the
path-space baselines that run a T = 1 kernel on the flattened model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from types import SimpleNamespace
from typing import Callable

import numpy as np

from .gauss import CovFactor, iso_logpdf, matvec
from .model import (
    Decomposition,
    FeynmanKacModel,
    GaussianDynamics,
    ModelError,
    grad_smoothing,
    log_target,
)
from .twist import twisted_params_general, twisted_params_invertible

GRADIENTS = ("none", "filter", "smoothing", "potential", "potential_smoothing")
MUTATIONS = ("bootstrap", "iso", "gain", "pcn", "twisted")


@dataclass(frozen=True)
class StrategySpec:
    name: str
    gradient: str = "none"
    aux: str = "iso"  # "iso": E = (delta/2) I; "prior": E = (delta/2) C_t(x_{t-1})
    mutation: str = "iso"
    marginal: str | None = None  # "mala", "mgrad" or "pcnl"
    preconditioner: str = "C"  # for prior-scaled aux: "C" or "truncated"
    window: int = 1
    twisted_algorithm: str = "general"

    @property
    def markov_order(self) -> int:
        return 2 if self.gradient in ("smoothing", "potential_smoothing") else 1

    @property
    def needs_gaussian_dynamics(self) -> bool:
        return self.mutation in ("gain", "pcn", "twisted") or self.aux == "prior"

    @property
    def needs_constant_cov(self) -> bool:
        return self.marginal in ("mgrad", "pcnl") or self.needs_affine

    @property
    def needs_affine(self) -> bool:
        return self.mutation == "twisted" or (self.aux == "prior" and self.preconditioner == "truncated")


# Marginal weight factors. Arguments broadcast over leading axes.


def mala_log_h(x: np.ndarray, xbar: np.ndarray, phi: np.ndarray, delta, N: int) -> np.ndarray:
    """log H = (1/delta)[2 phi^T (xbar - x) - N/(N+1) phi^T phi]."""
    delta = np.asarray(delta, dtype=float)
    return (2.0 * np.sum(phi * (xbar - x), axis=-1) - N / (N + 1.0) * np.sum(phi * phi, axis=-1)) / delta


def mgrad_matrices(a: np.ndarray, delta, N: int) -> tuple[np.ndarray, np.ndarray]:
    """(G, P) with G = (2/delta)(I + N A)^{-1} and P = ((delta/2) A)^{-1} + G."""
    d = a.shape[-1]
    half = 0.5 * np.asarray(delta, dtype=float)[..., None, None]
    eye = np.eye(d)
    G = np.linalg.solve(eye + N * a, np.broadcast_to(eye, a.shape)) / half
    P = np.linalg.solve(half * a, np.broadcast_to(eye, a.shape)) + G
    return G, P


def mgrad_log_h(x, v, xbar, vbar, phi, a, G, P, N: int) -> np.ndarray:
    r = x - v
    z = x + phi
    Gz = matvec(G, z)
    return (
        0.5 * np.sum(r * matvec(P, r), axis=-1)
        - 0.5 * N * np.sum(z * matvec(a, Gz), axis=-1)
        - np.sum(r * Gz, axis=-1)
        + (N + 1) * np.sum((xbar - vbar) * matvec(G, v + phi), axis=-1)
    )


def pcnl_matrix(c_inv: np.ndarray, delta, N: int) -> np.ndarray:
    """G = beta / ((1 - beta)(1 + N beta)) C^{-1} with beta = 2 / (2 + delta)."""
    delta = np.asarray(delta, dtype=float)[..., None, None]
    beta = 2.0 / (2.0 + delta)
    return beta / ((1.0 - beta) * (1.0 + N * beta)) * c_inv


def pcnl_log_h(x, v, xbar, vbar, phi, G, beta, N: int) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    r = x - v
    z = x + phi
    Gr = matvec(G, r)
    Gz = matvec(G, z)
    return (
        0.5 * (1.0 / beta + N + 1) * np.sum(r * Gr, axis=-1)
        - 0.5 * N * beta * np.sum(z * Gz, axis=-1)
        + (N + 1) * np.sum((xbar - vbar) * matvec(G, v + phi), axis=-1)
        - np.sum(r * Gz, axis=-1)
    )


def truncated_preconditioner(dyn: GaussianDynamics, window: int) -> np.ndarray:
    """Sum of prior cross-covariances Sigma_{s,t} over |s - t| <= window, per t."""
    aff = dyn._require_affine()
    _, sig = dyn.prior_moments()
    T, D = dyn.horizon, dyn.dim
    out = np.zeros((T, D, D))
    for t in range(T):
        acc = sig[t].copy()
        cross = sig[t]
        for s in range(t + 1, min(T, t + window + 1)):
            cross = aff.F[s] @ cross
            acc += cross
        cross = sig[t]
        for s in range(t - 1, max(-1, t - window - 1), -1):
            # Sigma_{s,t} = Sigma_{t,s}^T with Sigma_{t,s} = F_t ... F_{s+1} Sigma_s.
            chain = sig[s]
            for r in range(s + 1, t + 1):
                chain = aff.F[r] @ chain
            acc += chain.T
        out[t] = acc
    return out


class ParticleStrategy:
    """Executes a ``StrategySpec`` on a model (see the module docstring)."""

    def __init__(
        self,
        spec: StrategySpec,
        model: FeynmanKacModel,
        dynamics: GaussianDynamics | None = None,
        kappa: int = 1,
    ):
        self.spec = spec
        self.name = spec.name
        self.markov_order = spec.markov_order
        self.model = model
        self.dyn = dynamics
        self.kappa = kappa
        self._check_requirements()
        self.dec: Decomposition | None = model.decomposition
        if spec.gradient in ("potential", "potential_smoothing") or spec.mutation == "bootstrap":
            self.dec = model.require_decomposition()
        self._cache_key: bytes | None = None
        self._cache: SimpleNamespace | None = None
        self._ctilde = None
        if spec.aux == "prior" and spec.preconditioner == "truncated":
            self._ctilde = truncated_preconditioner(dynamics, spec.window)
        self._const = dynamics is not None and dynamics.constant_cov
        if self._const:
            T = model.horizon
            self._c = np.stack([dynamics.cov_spd(t).cov for t in range(1, T + 1)])
            self._c_inv = np.stack([dynamics.cov_spd(t).precision for t in range(1, T + 1)])

    def _check_requirements(self) -> None:
        spec, dyn = self.spec, self.dyn
        if spec.needs_gaussian_dynamics and dyn is None:
            raise ModelError(f"{spec.name} requires conditionally Gaussian dynamics")
        if spec.needs_constant_cov and not dyn.constant_cov:
            raise ModelError(f"{spec.name} requires a covariance C_t that does not depend on x_(t-1)")
        if spec.needs_affine and dyn.affine is None:
            raise ModelError(f"{spec.name} requires affine dynamics m_t(x) = F_t x + b_t")
        if dyn is not None and (dyn.horizon, dyn.dim) != (self.model.horizon, self.model.dim):
            raise ModelError("dynamics and model disagree on (T, D)")

    # Gradients and the auxiliary density.

    def _grad_filter(self, t, x1, x0):
        if self.spec.gradient in ("filter", "smoothing"):
            return self.model.grad_log_q_wrt_x(t, x1, x0)
        return self.dec.grad_log_g_wrt_x(t, x1, x0)

    def _grad_cross(self, t, x1, x0):
        """Gradient of the time-t factor in x_{t-1}."""
        if self.spec.gradient in ("filter", "smoothing"):
            return self.model.grad_log_q_wrt_xprev(t, x1, x0)
        return self.dec.grad_log_g_wrt_xprev(t, x1, x0)

    def _precondition(self, t, x1, g):
        if self.spec.aux == "iso":
            return g
        if self._ctilde is not None:
            return matvec(self._ctilde[t - 1], g)
        if self._const:
            return matvec(self._c[t - 1], g)
        return matvec(self.dyn.cov(t, x1), g)

    def _phi(self, t, x1, g, ctx):
        """kappa (delta_t / 2) P_t g."""
        return self.kappa * ctx.half[:, t - 1, None, None] * self._precondition(t, x1, g)

    def _aux_factor(self, t, x1, ctx) -> CovFactor:
        """Factor of E_t = (delta_t/2) C_t(x_{t-1}); only used for prior-scaled aux."""
        if self._const:
            return ctx.aux_factor[t - 1]
        return CovFactor.from_cov(ctx.half[:, t - 1, None, None, None] * self.dyn.cov(t, x1))

    def _aux_quad(self, t, diff, x1, ctx):
        """(u - mean)^T E_t^{-1} (u - mean) and log det E_t."""
        if self.spec.aux == "iso":
            h = ctx.half[:, t - 1, None]
            return np.sum(diff * diff, axis=-1) / h, diff.shape[-1] * np.log(h)
        f = self._aux_factor(t, x1, ctx)
        return f.quad(diff), f.logdet

    def _aux_logpdf(self, t, mean, x1, ctx):
        diff = ctx.u[:, t - 1, None, :] - mean
        q, ld = self._aux_quad(t, diff, x1, ctx)
        return -0.5 * (q + ld + diff.shape[-1] * np.log(2 * np.pi))

    # Per-sweep setup.

    def begin_sweep(
        self, ref: np.ndarray, delta: np.ndarray, n_particles: int, rng: np.random.Generator
    ) -> SimpleNamespace:
        B, T, D = ref.shape
        delta = np.broadcast_to(np.asarray(delta, dtype=float), (B, T))
        ctx = SimpleNamespace(**vars(self._step_cache(delta)))
        ctx.ref = ref
        ctx.P = n_particles
        ctx.u = self._sample_aux(ref, ctx, rng)
        if self.spec.mutation == "twisted":
            self._twist(ctx)
        return ctx

    def _step_cache(self, delta: np.ndarray) -> SimpleNamespace:
        key = delta.tobytes() + bytes(str(delta.shape), "ascii")
        if key == self._cache_key:
            return self._cache
        ctx = SimpleNamespace(delta=delta, half=0.5 * delta)
        B, T = delta.shape
        spec, dyn = self.spec, self.dyn
        if self._const and spec.aux == "prior":
            ctx.aux_factor = [
                CovFactor.scaled(dyn.cov_spd(t), ctx.half[:, t - 1, None]) for t in range(1, T + 1)
            ]
        if self._const and spec.mutation == "gain":
            ctx.gain = []
            ctx.mut_factor = []
            for t in range(1, T + 1):
                sc = dyn.spectral(t)
                ev = sc.gain_eigenvalues(delta[:, t - 1])  # (B, D)
                ctx.gain.append(sc.from_eigenvalues(ev)[:, None])
                ctx.mut_factor.append(CovFactor.from_eigen(sc.vectors, (ctx.half[:, t - 1, None] * ev)[:, None]))
        if spec.mutation == "pcn":
            ctx.beta = 2.0 / (2.0 + delta)
            if self._const:
                ctx.mut_factor = [
                    CovFactor.scaled(dyn.cov_spd(t), (1.0 - ctx.beta[:, t - 1])[:, None]) for t in range(1, T + 1)
                ]
        self._cache_key, self._cache = key, ctx
        return ctx

    def _ref_phi(self, t, ref, ctx):
        """phi_t evaluated along the reference path, shaped (B, 1, D)."""
        x1 = ref[:, t - 2, None, :] if t > 1 else None
        x0 = ref[:, t - 1, None, :]
        g = self._grad_filter(t, x1, x0)
        if self.spec.markov_order == 2 and t < self.model.horizon:
            g = g + self._grad_cross(t + 1, x0, ref[:, t, None, :])
        return self._phi(t, x1, np.broadcast_to(g, x0.shape), ctx)

    def _sample_aux(self, ref, ctx, rng):
        B, T, D = ref.shape
        z = rng.standard_normal((B, T, D))
        if self.spec.mutation == "bootstrap":
            return None
        u = np.empty((B, T, D))
        for t in range(1, T + 1):
            x1 = ref[:, t - 2, None, :] if t > 1 else None
            mean = ref[:, t - 1, None, :]
            if self.spec.gradient != "none":
                mean = mean + self._ref_phi(t, ref, ctx)
            if self.spec.aux == "iso":
                u[:, t - 1] = (mean + np.sqrt(ctx.half[:, t - 1, None, None]) * z[:, t - 1, None, :])[:, 0]
            else:
                u[:, t - 1] = self._aux_factor(t, x1, ctx).sample(mean, z[:, t - 1, None, :])[:, 0]
        return u

    def _twist(self, ctx):
        kind = "identity" if self.spec.aux == "iso" else "prior_cov"
        fn = twisted_params_general if self.spec.twisted_algorithm == "general" else twisted_params_invertible
        tp = fn(self.dyn, ctx.delta, ctx.u, kind)
        ctx.twist = tp
        ctx.twist_factor = CovFactor.from_cov(tp.Sigma)  # (B, T, D, D)

    # Mutation.

    def _gain_parts(self, t, x_prev, ctx):
        """(A, covariance factor) of the gain mutation, per chain or per particle."""
        if self._const:
            return ctx.gain[t - 1], ctx.mut_factor[t - 1]
        C = self.dyn.cov(t, x_prev)
        h = ctx.half[:, t - 1, None, None, None] if C.ndim == 4 else ctx.half[:, t - 1, None, None]
        A = np.linalg.solve(C + h * np.eye(C.shape[-1]), C)
        return A, CovFactor.from_cov(h * A)

    def _pcn_factor(self, t, x_prev, ctx):
        if self._const:
            return ctx.mut_factor[t - 1]
        C = self.dyn.cov(t, x_prev)
        scale = (1.0 - ctx.beta[:, t - 1]).reshape((-1,) + (1,) * (C.ndim - 2))
        return CovFactor.from_cov(scale * C)

    def _mutation(self, t, x_prev, ctx):
        """Mean and covariance description of M'_t(. | x_prev, u_t)."""
        mut = self.spec.mutation
        u = ctx.u[:, t - 1, None, :]
        if mut == "iso":
            return u, ctx.half[:, t - 1, None]
        if mut == "gain":
            m = self.dyn.mean(t, x_prev)
            A, f = self._gain_parts(t, x_prev, ctx)
            return m + matvec(A, u - m), f
        if mut == "pcn":
            m = self.dyn.mean(t, x_prev)
            beta = ctx.beta[:, t - 1, None, None]
            return beta * u + (1.0 - beta) * m, self._pcn_factor(t, x_prev, ctx)
        if mut == "twisted":
            tp = ctx.twist
            mean = tp.b[:, t - 1, None, :]
            if t > 1:
                mean = mean + matvec(tp.F[:, t - 1, None], x_prev)
            return mean, ctx.twist_factor.index((slice(None), t - 1, None))
        raise ValueError(mut)

    def propose(self, t, x_prev, ctx, rng):
        B, T, D = ctx.ref.shape
        P = ctx.P
        if self.spec.mutation == "bootstrap":
            return np.array(
                np.broadcast_to(self.dec.sample_m(t, x_prev, rng, (B, P)), (B, P, D)), dtype=float
            )
        z = rng.standard_normal((B, P, D))
        mean, cov = self._mutation(t, x_prev, ctx)
        if isinstance(cov, CovFactor):
            x = cov.sample(mean, z)
        else:
            x = mean + np.sqrt(cov)[..., None] * z
        return np.array(np.broadcast_to(x, (B, P, D)))

    def _log_mutation(self, t, x_prev, x, ctx):
        mean, cov = self._mutation(t, x_prev, ctx)
        if isinstance(cov, CovFactor):
            return cov.logpdf(x, mean)
        return iso_logpdf(x, mean, cov)

    # Weights.

    def log_qtilde(self, t, x2, x1, x0, ctx):
        """log of the extended-target factor at lineage (x_{t-2}, x_{t-1}, x_t)."""
        out = self.model.log_q(t, x1, x0)
        if self.spec.mutation == "bootstrap":
            return out
        mean = x0
        if self.spec.gradient != "none":
            g_t = self._grad_filter(t, x1, x0)
            mean = x0 + self._phi(t, x1, g_t, ctx)
        out = out + self._aux_logpdf(t, mean, x1, ctx)
        if self.spec.markov_order == 2 and t > 1:
            # Swap the filter gradient at t-1 for the smoothing gradient.
            x_pp = x2 if t > 2 else None
            gf = self._grad_filter(t - 1, x_pp, x1)
            gs = gf + self._grad_cross(t, x1, x0)
            u_prev = ctx.u[:, t - 2, None, :]
            d_s = u_prev - x1 - self._phi(t - 1, x_pp, gs, ctx)
            d_f = u_prev - x1 - self._phi(t - 1, x_pp, np.broadcast_to(gf, d_s.shape), ctx)
            q_s, _ = self._aux_quad(t - 1, d_s, x_pp, ctx)
            q_f, _ = self._aux_quad(t - 1, d_f, x_pp, ctx)
            out = out - 0.5 * (q_s - q_f)
        return out

    def log_weights(self, t, x, x_prev, x_prev2, ctx):
        spec = self.spec
        if spec.mutation == "bootstrap":
            return np.broadcast_to(self.dec.log_g(t, x_prev, x), x.shape[:-1])
        if spec.marginal is not None:
            return self._marginal_log_weights(t, x, x_prev, ctx)
        lw = self.log_qtilde(t, x_prev2, x_prev, x, ctx) - self._log_mutation(t, x_prev, x, ctx)
        return np.broadcast_to(lw, x.shape[:-1])

    def log_q_back(self, t, x2, x1, x0, ctx):
        if self.spec.mutation == "bootstrap" or self.spec.marginal is not None:
            return self.model.log_q(t, x1, x0)
        return self.log_qtilde(t, x2, x1, x0, ctx)

    def marginal_terms(self, t, x, x_prev, ctx):
        """(log H, phi, v) for the marginal variants; exposed for testing."""
        spec = self.spec
        N = x.shape[1] - 1
        g = np.broadcast_to(self._grad_filter(t, x_prev, x), x.shape)
        phi = self._phi(t, x_prev, g, ctx)
        xbar = np.mean(x, axis=1, keepdims=True)
        if spec.marginal == "mala":
            return mala_log_h(x, xbar, phi, ctx.delta[:, t - 1, None], N), phi, np.zeros_like(x)
        m = np.broadcast_to(self.dyn.mean(t, x_prev), x.shape)
        if spec.marginal == "mgrad":
            A = ctx.gain[t - 1]
            G, Pm = mgrad_matrices(A, ctx.delta[:, t - 1, None], N)
            v = m - matvec(A, m)
            vbar = np.mean(v, axis=1, keepdims=True)
            return mgrad_log_h(x, v, xbar, vbar, phi, A, G, Pm, N), phi, v
        if spec.marginal == "pcnl":
            beta = ctx.beta[:, t - 1, None]
            G = pcnl_matrix(self._c_inv[t - 1], ctx.delta[:, t - 1, None], N)
            v = (1.0 - beta[..., None]) * m
            vbar = np.mean(v, axis=1, keepdims=True)
            return pcnl_log_h(x, v, xbar, vbar, phi, G, beta, N), phi, v
        raise ValueError(spec.marginal)

    def proposal_moments(self, t, x_prev, ctx):
        """Mean and covariance of one proposed particle with u_t integrated out.

        ``x_prev`` holds the resampled ancestors ``(B, P, D)`` (ignored at
        t = 1). Returns arrays shaped ``(B, P, D)`` and ``(B, P, D, D)``.
        """
        spec = self.spec
        B, T, D = ctx.ref.shape
        P = ctx.P if x_prev is None else x_prev.shape[1]
        xp = None if t == 1 else x_prev
        eye = np.eye(D)
        if spec.mutation == "bootstrap":
            mean = np.broadcast_to(self.dyn.mean(t, xp), (B, P, D))
            return mean, np.broadcast_to(self.dyn.cov(t, xp), (B, P, D, D))
        if spec.mutation == "twisted":
            raise ValueError("twisted proposals have no per-slot marginal in closed form")
        centre = ctx.ref[:, t - 1, None, :]
        if spec.gradient != "none":
            centre = centre + self._ref_phi(t, ctx.ref, ctx)
        h = ctx.half[:, t - 1, None, None, None]
        if spec.mutation == "iso":
            return np.broadcast_to(centre, (B, P, D)), np.broadcast_to(2.0 * h * eye, (B, P, D, D))
        m = np.broadcast_to(self.dyn.mean(t, xp), (B, P, D))
        C = np.broadcast_to(self.dyn.cov(t, xp), (B, P, D, D))
        E = h * (eye if spec.aux == "iso" else C)
        if spec.mutation == "gain":
            A = np.linalg.solve(C + h * eye, C)
            At = np.swapaxes(A, -1, -2)
            return m + matvec(A, centre - m), h * A + A @ E @ At
        beta = ctx.beta[:, t - 1, None, None, None]
        return (1.0 - beta[..., 0]) * m + beta[..., 0] * centre, (1.0 - beta) * C + beta**2 * E

    def _marginal_log_weights(self, t, x, x_prev, ctx):
        log_h, _, _ = self.marginal_terms(t, x, x_prev, ctx)
        return self.model.log_q(t, x_prev, x) + log_h


# Constructors, one per named algorithm.


def csmc_bootstrap(model: FeynmanKacModel, dynamics=None, kappa: int = 1, **_) -> ParticleStrategy:
    return ParticleStrategy(StrategySpec("csmc", mutation="bootstrap"), model, dynamics, kappa)


def particle_rwm(model, dynamics=None, kappa: int = 1, **_) -> ParticleStrategy:
    return ParticleStrategy(StrategySpec("p-rwm"), model, dynamics, kappa)


def particle_amala(model, dynamics=None, kappa: int = 1, **_) -> ParticleStrategy:
    return ParticleStrategy(StrategySpec("p-amala", gradient="filter"), model, dynamics, kappa)


def particle_mala(model, dynamics=None, kappa: int = 1, **_) -> ParticleStrategy:
    return ParticleStrategy(StrategySpec("p-mala", gradient="filter", marginal="mala"), model, dynamics, kappa)


def particle_amala_plus(model, dynamics=None, kappa: int = 1, **_) -> ParticleStrategy:
    return ParticleStrategy(StrategySpec("p-amala+", gradient="smoothing"), model, dynamics, kappa)


def particle_agrad(model, dynamics, kappa: int = 1, **_) -> ParticleStrategy:
    spec = StrategySpec("p-agrad", gradient="potential", mutation="gain")
    return ParticleStrategy(spec, model, dynamics, kappa)


def particle_mgrad(model, dynamics, kappa: int = 1, **_) -> ParticleStrategy:
    spec = StrategySpec("p-mgrad", gradient="potential", mutation="gain", marginal="mgrad")
    return ParticleStrategy(spec, model, dynamics, kappa)


def particle_agrad_plus(model, dynamics, kappa: int = 1, **_) -> ParticleStrategy:
    spec = StrategySpec("p-agrad+", gradient="potential_smoothing", mutation="gain")
    return ParticleStrategy(spec, model, dynamics, kappa)


def twisted_particle_agrad(
    model, dynamics, kappa: int = 1, plus: bool = False, twisted_algorithm: str = "general", **_
) -> ParticleStrategy:
    spec = StrategySpec(
        "tp-agrad+" if plus else "tp-agrad",
        gradient="potential_smoothing" if plus else "potential",
        mutation="twisted",
        twisted_algorithm=twisted_algorithm,
    )
    return ParticleStrategy(spec, model, dynamics, kappa)


def _pcnl_spec(name, gradient, mutation, marginal=None, preconditioner="C", window=1, **extra):
    return StrategySpec(
        name,
        gradient=gradient,
        aux="prior",
        mutation=mutation,
        marginal=marginal,
        preconditioner=preconditioner,
        window=window,
        **extra,
    )


def particle_apcnl(model, dynamics, kappa: int = 1, preconditioner: str = "C", window: int = 1, **_):
    spec = _pcnl_spec("p-apcnl", "potential", "pcn", preconditioner=preconditioner, window=window)
    return ParticleStrategy(spec, model, dynamics, kappa)


def particle_pcnl(model, dynamics, kappa: int = 1, preconditioner: str = "C", window: int = 1, **_):
    spec = _pcnl_spec("p-pcnl", "potential", "pcn", "pcnl", preconditioner, window)
    return ParticleStrategy(spec, model, dynamics, kappa)


def particle_apcnl_plus(model, dynamics, kappa: int = 1, preconditioner: str = "C", window: int = 1, **_):
    spec = _pcnl_spec("p-apcnl+", "potential_smoothing", "pcn", preconditioner=preconditioner, window=window)
    return ParticleStrategy(spec, model, dynamics, kappa)


def twisted_particle_apcnl(
    model,
    dynamics,
    kappa: int = 1,
    plus: bool = False,
    preconditioner: str = "C",
    window: int = 1,
    twisted_algorithm: str = "general",
    **_,
):
    spec = _pcnl_spec(
        "tp-apcnl+" if plus else "tp-apcnl",
        "potential_smoothing" if plus else "potential",
        "twisted",
        preconditioner=preconditioner,
        window=window,
        twisted_algorithm=twisted_algorithm,
    )
    return ParticleStrategy(spec, model, dynamics, kappa)


# Path space.


def joint_prior(dyn: GaussianDynamics) -> tuple[np.ndarray, np.ndarray]:
    """Mean (T*D,) and covariance (T*D, T*D) of the affine prior over x_{1:T}."""
    aff = dyn._require_affine()
    mu, sig = dyn.prior_moments()
    T, D = mu.shape
    cov = np.zeros((T * D, T * D))
    for t in range(T):
        cov[t * D:(t + 1) * D, t * D:(t + 1) * D] = sig[t]
        cross = sig[t]
        for s in range(t + 1, T):
            cross = aff.F[s] @ cross  # Cov(x_s, x_t)
            cov[s * D:(s + 1) * D, t * D:(t + 1) * D] = cross
            cov[t * D:(t + 1) * D, s * D:(s + 1) * D] = cross.T
    return mu.reshape(-1), cov


def flatten_to_path_space(
    model: FeynmanKacModel, dynamics: GaussianDynamics | None = None
) -> tuple[FeynmanKacModel, GaussianDynamics | None]:
    """Single-step model on R^{T D} whose only factor is pi_T itself."""
    T, D = model.horizon, model.dim

    def unflat(z):
        z = np.asarray(z, dtype=float)
        return z.reshape(z.shape[:-1] + (T, D))

    def log_q(t, xp, z):
        return log_target(model, unflat(z))

    def grad_q(t, xp, z):
        x = unflat(z)
        gs = [
            grad_smoothing(
                model, s, x[..., s - 2, :] if s > 1 else None, x[..., s - 1, :], x[..., s, :] if s < T else None
            )
            for s in range(1, T + 1)
        ]
        gs = np.broadcast_arrays(*gs)
        return np.stack(gs, axis=-2).reshape(z.shape[:-1] + (T * D,))

    def zeros(t, xp, z):
        return np.zeros_like(np.asarray(z, dtype=float))

    dec = None
    if model.decomposition is not None:
        src = model.decomposition

        def log_g(t, xp, z):
            x = unflat(z)
            return sum(src.log_g(s, x[..., s - 2, :] if s > 1 else None, x[..., s - 1, :]) for s in range(1, T + 1))

        def log_m(t, xp, z):
            x = unflat(z)
            return sum(src.log_m(s, x[..., s - 2, :] if s > 1 else None, x[..., s - 1, :]) for s in range(1, T + 1))

        def grad_g(t, xp, z):
            x = unflat(z)
            out = []
            for s in range(1, T + 1):
                g = src.grad_log_g_wrt_x(s, x[..., s - 2, :] if s > 1 else None, x[..., s - 1, :])
                if s < T:
                    g = g + src.grad_log_g_wrt_xprev(s + 1, x[..., s - 1, :], x[..., s, :])
                out.append(g)
            out = np.broadcast_arrays(*out)
            return np.stack(out, axis=-2).reshape(z.shape[:-1] + (T * D,))

        def sample_m(t, xp, rng, shape=()):
            xs = []
            prev = None
            for s in range(1, T + 1):
                prev = src.sample_m(s, prev, rng, shape)
                xs.append(prev)
            return np.stack(xs, axis=-2).reshape(tuple(shape) + (T * D,))

        dec = Decomposition(log_m, sample_m, log_g, grad_g, zeros)

    flat = FeynmanKacModel(1, T * D, log_q, grad_q, zeros, dec, model.finite_difference)
    flat_dyn = None
    if dynamics is not None and dynamics.affine is not None:
        mean, cov = joint_prior(dynamics)
        flat_dyn = GaussianDynamics.from_affine(
            F=np.zeros((1, T * D, T * D)), b=mean[None], C=cov[None]
        )
    return flat, flat_dyn


# Registry.

CONSTRUCTORS: dict[str, Callable[..., ParticleStrategy]] = {
    "csmc": csmc_bootstrap,
    "p-rwm": particle_rwm,
    "p-amala": particle_amala,
    "p-mala": particle_mala,
    "p-amala+": particle_amala_plus,
    "p-agrad": particle_agrad,
    "p-mgrad": particle_mgrad,
    "p-agrad+": particle_agrad_plus,
    "tp-agrad": lambda m, d, **kw: twisted_particle_agrad(m, d, plus=False, **kw),
    "tp-agrad+": lambda m, d, **kw: twisted_particle_agrad(m, d, plus=True, **kw),
    "p-apcnl": particle_apcnl,
    "p-pcnl": particle_pcnl,
    "p-apcnl+": particle_apcnl_plus,
    "tp-apcnl": lambda m, d, **kw: twisted_particle_apcnl(m, d, plus=False, **kw),
    "tp-apcnl+": lambda m, d, **kw: twisted_particle_apcnl(m, d, plus=True, **kw),
}

PATH_SPACE = {"mala1": "p-mala", "amala1": "p-amala", "agrad1": "p-agrad", "rwm1": "p-rwm", "imh1": "csmc"}

PARTICLE_STRATEGIES = tuple(CONSTRUCTORS)
ALL_STRATEGIES = PARTICLE_STRATEGIES + tuple(PATH_SPACE)
TWISTED = ("tp-agrad", "tp-agrad+", "tp-apcnl", "tp-apcnl+")


@dataclass
class Kernel:
    """A strategy bound to the model it runs on.

    Path-space kernels run on the flattened model; ``to_engine`` and
    ``from_engine`` convert between (B, T, D) paths and what the engine sees.
    """

    name: str
    model: FeynmanKacModel
    dynamics: GaussianDynamics | None
    strategy: ParticleStrategy
    path_space: bool = False
    horizon: int = field(init=False)
    dim: int = field(init=False)

    def __post_init__(self) -> None:
        self.horizon = self.model.horizon
        self.dim = self.model.dim

    def to_engine(self, paths: np.ndarray) -> np.ndarray:
        if not self.path_space:
            return paths
        return paths.reshape(paths.shape[:-2] + (1, -1))

    def from_engine(self, paths: np.ndarray, T: int, D: int) -> np.ndarray:
        if not self.path_space:
            return paths
        return paths.reshape(paths.shape[:-2] + (T, D))

    @property
    def calibrates(self) -> bool:
        return self.name not in ("csmc", "imh1")

    @property
    def global_step(self) -> bool:
        return self.name in TWISTED


def build_kernel(
    name: str,
    model: FeynmanKacModel,
    dynamics: GaussianDynamics | None = None,
    kappa: int = 1,
    **options,
) -> Kernel:
    """Construct the named kernel; raises ``ModelError`` when requirements are unmet."""
    if name in CONSTRUCTORS:
        strat = CONSTRUCTORS[name](model, dynamics, kappa=kappa, **options)
        return Kernel(name, model, dynamics, strat)
    if name in PATH_SPACE:
        flat, flat_dyn = flatten_to_path_space(model, dynamics)
        strat = CONSTRUCTORS[PATH_SPACE[name]](flat, flat_dyn, kappa=kappa, **options)
        strat.spec = replace(strat.spec, name=name)
        strat.name = name
        return Kernel(name, flat, flat_dyn, strat, path_space=True)
    raise KeyError(f"unknown strategy {name!r}; choose from {', '.join(ALL_STRATEGIES)}")
