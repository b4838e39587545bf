"""Multi-chain experiment runner.

An experiment is a grid of cells (one per value of the swept model
parameter) times strategies. Each (cell, strategy) job owns a random stream
derived from the run seed and its grid position alone, so results do not
depend on how many worker processes execute the grid. Chains inside a job
advance together in one batched sweep.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import multiprocessing
from pathlib import Path

import numpy as np

from .adapt import AdaptationSettings, run_calibrated_chain
from .config import ExperimentConfig, ModelSection
from .csmc import SweepConfig, SweepError
from .diag import acceptance_by_time, ess_by_coordinate, ess_rank_normalized, summarize
from .model import (
    FeynmanKacModel,
    GaussianDynamics,
    ModelEvaluationError,
    make_lgssm,
    make_stochvol,
    simulate_lgssm,
    simulate_states,
    simulate_stochvol,
)
from .strategies import build_kernel

TABLE_COLUMNS = {
    "ess": ("strategy", "tau", "stat", "ess", "ess_per_sec"),
    "ess_time": ("strategy", "tau", "quantity", "ess"),
    "acceptance": ("strategy", "tau", "t", "rate"),
    "energy": ("strategy", "tau", "chain", "iter", "energy"),
    "delta": ("strategy", "tau", "chain", "iter", "t", "delta"),
    "timing": ("strategy", "tau", "seconds", "seconds_per_iter"),
}


class ExperimentError(RuntimeError):
    """One or more jobs failed; ``failures`` maps job labels to messages."""

    def __init__(self, failures: dict[str, str], result: "ExperimentResult"):
        self.failures = failures
        self.result = result
        first = next(iter(failures.items()))
        super().__init__(f"{len(failures)} job(s) failed, first {first[0]}: {first[1]}")


@dataclass
class ExperimentResult:
    tables: dict[str, list[tuple]] = field(default_factory=lambda: {k: [] for k in TABLE_COLUMNS})

    def extend(self, other: "ExperimentResult") -> None:
        for k, rows in other.tables.items():
            self.tables[k].extend(rows)


def fig1_step_size(name: str, horizon: int, dim: int) -> float:
    """Fixed step sizes used for the dimension and horizon sweeps."""
    if name == "rwm1":
        return 1.0 / (horizon * dim)
    if name == "p-rwm":
        return 1.0 / dim
    if name in ("mala1", "amala1", "agrad1"):
        return (horizon * dim) ** (-1.0 / 3.0)
    return dim ** (-1.0 / 3.0)


def cell_values(cfg: ModelSection) -> list[float | None]:
    return list(cfg.tau) if cfg.name == "stochvol" else [None]


def _seed_int(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


def simulate_data(cfg: ModelSection, tau: float | None, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """States and observations, each ``(T, D)``."""
    if cfg.name == "lgssm":
        return simulate_lgssm(cfg.dim, cfg.horizon, cfg.lambda_, seed)
    return simulate_stochvol(cfg.dim, cfg.horizon, cfg.phi, cfg.rho, tau, seed)


def load_observations(path: str | Path, horizon: int, dim: int) -> np.ndarray:
    y = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if y.shape != (horizon, dim):
        raise ValueError(f"observations in {path} have shape {y.shape}, expected {(horizon, dim)}")
    return y


def write_matrix_csv(path: str | Path, data: np.ndarray, prefix: str) -> None:
    header = ",".join(f"{prefix}{i + 1}" for i in range(data.shape[1]))
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def build_model(
    cfg: ModelSection, tau: float | None, observations: np.ndarray
) -> tuple[FeynmanKacModel, GaussianDynamics]:
    if cfg.name == "lgssm":
        return make_lgssm(cfg.dim, cfg.horizon, cfg.lambda_, observations)
    return make_stochvol(cfg.dim, cfg.horizon, cfg.phi, cfg.rho, tau, observations)


def cell_observations(cfg: ExperimentConfig, cell: int) -> np.ndarray:
    m = cfg.model
    if m.observations:
        return load_observations(m.observations, m.horizon, m.dim)
    data_seed = cfg.run.data_seed if cfg.run.data_seed is not None else cfg.run.seed
    return simulate_data(m, cell_values(m)[cell], _seed_int(data_seed, 0, cell))[1]


def validate(cfg: ExperimentConfig) -> None:
    """Build every kernel once so that requirement mismatches surface before any sampling."""
    m = cfg.model
    y = np.zeros((m.horizon, m.dim))
    for tau in cell_values(m):
        model, dyn = build_model(m, tau, y)
        for name in cfg.run.strategies:
            build_kernel(name, model, dyn, kappa=cfg.run.kappa)


def run_job(cfg: ExperimentConfig, cell: int, index: int) -> ExperimentResult:
    """Run all chains of one strategy on one cell and tabulate the outputs."""
    m, r, out = cfg.model, cfg.run, cfg.output
    tau = cell_values(m)[cell]
    name = r.strategies[index]
    model, dyn = build_model(m, tau, cell_observations(cfg, cell))
    kernel = build_kernel(name, model, dyn, kappa=r.kappa)
    rng = np.random.default_rng(np.random.SeedSequence(r.seed, spawn_key=(1, cell, index)))

    settings = AdaptationSettings(**cfg.adapt.model_dump())
    calibrate = r.step_size == "calibrate" and kernel.calibrates
    if r.step_size == "calibrate":
        fixed = settings.delta0
    elif r.step_size == "fig1":
        fixed = fig1_step_size(name, m.horizon, m.dim)
    else:
        fixed = float(r.step_size)
    sweep = SweepConfig(
        N=r.particles - 1,
        step_sizes=np.full(kernel.to_engine(np.zeros((m.horizon, m.dim))).shape[0], fixed),
        kappa=r.kappa,
        resampling_scheme=r.resampling,
        backward=r.backward,
    )
    init = np.stack([simulate_states(dyn, rng) for _ in range(r.chains)])
    chain = run_calibrated_chain(
        kernel,
        sweep,
        init,
        r.iterations,
        rng,
        settings,
        burn_in=r.burn_in,
        shared=r.shared_calibration and r.chains > 1,
        calibrate=calibrate,
    )
    return tabulate(name, tau, chain, out.energy_every, out.delta_every)


def tabulate(name, tau, chain, energy_every: int = 1, delta_every: int = 100) -> ExperimentResult:
    res = ExperimentResult()
    tcol = "" if tau is None else tau
    B, K, T, D = chain.samples.shape
    if B >= 2 and K >= 8:
        per_coord = ess_by_coordinate(chain.samples, stuck_as_zero=True)
        energy_ess = ess_rank_normalized(chain.energy)
        for stat, value in summarize(per_coord).items():
            res.tables["ess"].append((name, tcol, stat, value, value / max(chain.seconds, 1e-12)))
        for t in range(T):
            res.tables["ess_time"].append((name, tcol, f"x[{t + 1},1]", float(per_coord[t, 0])))
        res.tables["ess_time"].append((name, tcol, "energy", energy_ess))
    rates = acceptance_by_time(chain.accept)
    rates = np.broadcast_to(rates, (T,)) if rates.size == 1 else rates
    for t, rate in enumerate(rates):
        res.tables["acceptance"].append((name, tcol, t + 1, float(rate)))
    for b in range(B):
        for i in range(0, K, energy_every):
            res.tables["energy"].append((name, tcol, b, i, float(chain.energy[b, i])))
    n = chain.delta_trace.shape[0]
    keep = sorted(set(range(delta_every - 1, n, delta_every)) | ({n - 1} if n else set()))
    for i in keep:
        for b in range(chain.delta_trace.shape[1]):
            for t, d in enumerate(chain.delta_trace[i, b]):
                res.tables["delta"].append((name, tcol, b, i + 1, t + 1, float(d)))
    res.tables["timing"].append((name, tcol, chain.seconds, chain.seconds / K))
    return res


def _job_entry(args):
    cfg_json, cell, index = args
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    try:
        return run_job(cfg, cell, index), None
    except (SweepError, ModelEvaluationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """Run the full grid; raises ``ExperimentError`` if any job fails."""
    validate(cfg)
    jobs = [(c, i) for c in range(len(cell_values(cfg.model))) for i in range(len(cfg.run.strategies))]
    payload = [(cfg.model_dump_json(by_alias=True), c, i) for c, i in jobs]
    if threads > 1 and len(jobs) > 1:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=threads, mp_context=ctx) as pool:
            outcomes = list(pool.map(_job_entry, payload))
    else:
        outcomes = [_job_entry(p) for p in payload]
    result = ExperimentResult()
    failures = {}
    for (c, i), (part, err) in zip(jobs, outcomes):
        if err is not None:
            failures[f"{cfg.run.strategies[i]}@cell{c}"] = err
        else:
            result.extend(part)
    if failures:
        raise ExperimentError(failures, result)
    return result


def write_tables(result: ExperimentResult, out: str | Path) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, cols in TABLE_COLUMNS.items():
        path = out / f"{name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in result.tables[name]:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        written.append(path)
    return written


def write_simulated_data(cfg: ExperimentConfig, out: str | Path, seed: int | None = None) -> list[Path]:
    """Simulate one dataset per cell and write ``states*.csv`` and ``observations*.csv``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.run.seed if seed is None else seed
    values = cell_values(cfg.model)
    written = []
    for c, tau in enumerate(values):
        x, y = simulate_data(cfg.model, tau, _seed_int(seed, 0, c))
        suffix = "" if len(values) == 1 else f"_tau{tau:g}"
        for stem, data, prefix in (("states", x, "x"), ("observations", y, "y")):
            path = out / f"{stem}{suffix}.csv"
            write_matrix_csv(path, data, prefix)
            written.append(path)
    return written
