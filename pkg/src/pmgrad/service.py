"""HTTP front end for the experiment runner.

Runs are synchronous: the request blocks until every chain has finished and
the response carries the output tables. Start it with ``pmgrad --serve``.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .config import ExperimentConfig, ModelSection
from .experiment import TABLE_COLUMNS, ExperimentError, run_experiment, simulate_data
from .model import ModelError
from .strategies import ALL_STRATEGIES

app = FastAPI(title="pmgrad", version=__version__)


class RunRequest(BaseModel):
    config: ExperimentConfig
    threads: int = Field(1, ge=1)


class Table(BaseModel):
    columns: list[str]
    rows: list[list[str | float | int]]


class RunResponse(BaseModel):
    tables: dict[str, Table]
    failures: dict[str, str] = Field(default_factory=dict)


class SimulateRequest(BaseModel):
    model: ModelSection
    tau: float | None = None
    seed: int = Field(0, ge=0)


class SimulateResponse(BaseModel):
    states: list[list[float]]
    observations: list[list[float]]


def _tables(result) -> dict[str, Table]:
    return {
        k: Table(columns=list(TABLE_COLUMNS[k]), rows=[list(r) for r in rows]) for k, rows in result.tables.items()
    }


@app.get("/strategies")
def strategies() -> list[str]:
    return list(ALL_STRATEGIES)


@app.post("/simulate", response_model=SimulateResponse)
def simulate(req: SimulateRequest) -> SimulateResponse:
    tau = req.tau if req.tau is not None else (req.model.tau[0] if req.model.name == "stochvol" else None)
    try:
        x, y = simulate_data(req.model, tau, req.seed)
    except ModelError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    return SimulateResponse(states=x.tolist(), observations=y.tolist())


@app.post("/runs", response_model=RunResponse)
def run(req: RunRequest) -> RunResponse:
    try:
        result = run_experiment(req.config, threads=req.threads)
    except (ModelError, KeyError) as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    except ExperimentError as exc:
        return RunResponse(tables=_tables(exc.result), failures=exc.failures)
    return RunResponse(tables=_tables(result))
