"""Experiment configuration.

Files are plain INI: ``[section]`` headers followed by ``key = value`` lines,
``;`` or ``#`` comments, lists written comma separated. Nothing is evaluated.
Every key can be overridden from the environment as
``PMGRAD_<SECTION>__<KEY>`` (upper case, double underscore), for example
``PMGRAD_ADAPT__RHO_MIN=0.01``.
"""

from __future__ import annotations

import configparser
import os
from pathlib import Path
from typing import Literal, Mapping

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .strategies import ALL_STRATEGIES

ENV_PREFIX = "PMGRAD_"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    name: Literal["lgssm", "stochvol"] = "lgssm"
    dim: int = Field(2, ge=1)
    horizon: int = Field(8, ge=1)
    lambda_: float = Field(1.0, gt=0, alias="lambda")
    phi: float = 0.9
    rho: float = 0.25
    tau: list[float] = Field(default_factory=lambda: [1.0])
    observations: str | None = None

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @field_validator("tau", mode="before")
    @classmethod
    def _listify(cls, v):
        return _split_list(v, float)


class RunSection(_Section):
    strategies: list[str] = Field(default_factory=lambda: ["p-mala"])
    particles: int = Field(16, ge=2)
    chains: int = Field(4, ge=1)
    iterations: int = Field(1000, ge=1)
    burn_in: int = Field(0, ge=0)
    kappa: int = Field(1, ge=0, le=1)
    resampling: Literal["multinomial", "killing"] = "killing"
    backward: Literal["backward_sampling", "ancestor_tracing"] = "backward_sampling"
    step_size: str = "calibrate"
    shared_calibration: bool = True
    seed: int = Field(0, ge=0)
    data_seed: int | None = None

    @field_validator("strategies", mode="before")
    @classmethod
    def _check_names(cls, v):
        names = _split_list(v, str)
        bad = [n for n in names if n not in ALL_STRATEGIES]
        if bad:
            raise ValueError(f"unknown strategy {bad[0]!r}; choose from {', '.join(ALL_STRATEGIES)}")
        return names

    @field_validator("step_size")
    @classmethod
    def _check_step(cls, v):
        if v not in ("calibrate", "fig1"):
            try:
                if float(v) <= 0:
                    raise ValueError
            except ValueError:
                raise ValueError("step_size must be 'calibrate', 'fig1' or a positive number") from None
        return v


class AdaptSection(_Section):
    target: float = Field(0.75, gt=0, lt=1)
    sigma: float = Field(0.05, ge=0)
    window: int = Field(100, ge=1)
    rho: float = Field(0.5, gt=0)
    rho_min: float = Field(1e-3, ge=0)
    gamma: float = -0.5
    delta0: float = Field(1e-2, gt=0)
    iterations: int = Field(1000, ge=0)


class OutputSection(_Section):
    energy_every: int = Field(1, ge=1)
    delta_every: int = Field(100, ge=1)


class ExperimentConfig(_Section):
    model: ModelSection = Field(default_factory=ModelSection)
    run: RunSection = Field(default_factory=RunSection)
    adapt: AdaptSection = Field(default_factory=AdaptSection)
    output: OutputSection = Field(default_factory=OutputSection)


def _split_list(v, kind):
    if isinstance(v, str):
        return [kind(p.strip()) for p in v.split(",") if p.strip()]
    if isinstance(v, (int, float)) and kind is float:
        return [float(v)]
    return v


def parse_config_text(text: str, env: Mapping[str, str] | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    raw: dict[str, dict[str, str]] = {s: dict(parser[s]) for s in parser.sections()}
    unknown = set(raw) - set(ExperimentConfig.model_fields)
    if unknown:
        raise ValueError(f"unknown config section [{sorted(unknown)[0]}]")
    env = os.environ if env is None else env
    for key, value in env.items():
        if not key.startswith(ENV_PREFIX) or "__" not in key:
            continue
        section, _, name = key[len(ENV_PREFIX) :].partition("__")
        raw.setdefault(section.lower(), {})[name.lower()] = value
    return ExperimentConfig.model_validate(raw)


def load_config(path: str | Path, env: Mapping[str, str] | None = None) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(), env)
