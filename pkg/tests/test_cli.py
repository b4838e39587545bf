import csv
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from pmgrad.cli import main
from pmgrad.config import load_config, parse_config_text
from pmgrad.experiment import TABLE_COLUMNS
from pmgrad.service import app
from pmgrad.strategies import ALL_STRATEGIES

SMALL = """
[model]
name = stochvol
dim = 2
horizon = 4
tau = 0.5, 2   ; two cells

[run]
strategies = csmc, p-mala, tp-agrad
particles = 4
chains = 2
iterations = 20
burn_in = 2
seed = 11

[adapt]
iterations = 10
window = 5
"""

WALL_CLOCK = {"ess": "ess_per_sec", "timing": None}


def _write(tmp_path, text=SMALL):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return path


def _read(path: Path):
    with path.open() as fh:
        return list(csv.reader(fh))


def _stable(out: Path, name: str):
    rows = _read(out / f"{name}.csv")
    if name not in WALL_CLOCK:
        return rows
    if WALL_CLOCK[name] is None:
        return rows[:1]
    drop = rows[0].index(WALL_CLOCK[name])
    return [r[:drop] + r[drop + 1 :] for r in rows]


def test_config_parsing_and_defaults(tmp_path):
    cfg = load_config(_write(tmp_path), env={})
    assert cfg.model.tau == [0.5, 2.0]
    assert cfg.run.strategies == ["csmc", "p-mala", "tp-agrad"]
    assert cfg.adapt.target == 0.75 and cfg.adapt.window == 5
    assert cfg.run.resampling == "killing"


def test_environment_overrides_file(tmp_path):
    cfg = load_config(_write(tmp_path), env={"PMGRAD_ADAPT__RHO_MIN": "0.01", "PMGRAD_RUN__SEED": "5"})
    assert cfg.adapt.rho_min == 0.01 and cfg.run.seed == 5


@pytest.mark.parametrize(
    "text",
    [
        "[run]\nstrategies = p-hmc\n",
        "[run]\nparticles = 1\n",
        "[run]\nstep_size = fast\n",
        "[bogus]\nx = 1\n",
        "[model]\nunknown_key = 3\n",
    ],
)
def test_bad_configs_are_rejected(text):
    with pytest.raises(ValueError):
        parse_config_text(text, env={})


def test_list_strategies(capsys):
    assert main(["--list-strategies"]) == 0
    assert capsys.readouterr().out.split() == list(ALL_STRATEGIES)


def test_missing_arguments_exit_2(tmp_path):
    assert main([]) == 2
    assert main(["--config", str(_write(tmp_path, "[run]\nstrategies = nope\n")), "--out", str(tmp_path)]) == 2


def test_invalid_model_and_thread_count_exit_2(tmp_path):
    assert main(["--config", str(_write(tmp_path, "[model]\ndim = 0\n")), "--out", str(tmp_path / "o")]) == 2
    assert main(["--config", str(_write(tmp_path)), "--out", str(tmp_path / "o"), "--threads", "0"]) == 2


def test_simulate_writes_one_dataset_per_cell(tmp_path):
    out = tmp_path / "data"
    assert main(["--config", str(_write(tmp_path)), "--out", str(out), "--simulate"]) == 0
    for tau in ("0.5", "2"):
        y = np.loadtxt(out / f"observations_tau{tau}.csv", delimiter=",", skiprows=1, ndmin=2)
        x = np.loadtxt(out / f"states_tau{tau}.csv", delimiter=",", skiprows=1, ndmin=2)
        assert y.shape == x.shape == (4, 2)
    assert _read(out / "observations_tau2.csv")[0] == ["y1", "y2"]


def test_observations_file_round_trip(tmp_path):
    data = tmp_path / "data"
    text = SMALL.replace("tau = 0.5, 2   ; two cells", "tau = 1")
    main(["--config", str(_write(tmp_path, text)), "--out", str(data), "--simulate"])
    with_file = text.replace("[run]", f"observations = {data / 'observations.csv'}\n\n[run]")
    assert main(["--config", str(_write(tmp_path, with_file)), "--out", str(tmp_path / "r")]) == 0
    bad = with_file.replace("horizon = 4", "horizon = 3")
    assert main(["--config", str(_write(tmp_path, bad)), "--out", str(tmp_path / "s")]) == 2


def test_outputs_do_not_depend_on_thread_count(tmp_path):
    cfg = _write(tmp_path)
    assert main(["--config", str(cfg), "--out", str(tmp_path / "a"), "--threads", "1"]) == 0
    assert main(["--config", str(cfg), "--out", str(tmp_path / "b"), "--threads", "3"]) == 0
    for name, cols in TABLE_COLUMNS.items():
        assert _read(tmp_path / "a" / f"{name}.csv")[0] == list(cols)
        assert _stable(tmp_path / "a", name) == _stable(tmp_path / "b", name)
    ess = _read(tmp_path / "a" / "ess.csv")
    assert {r[2] for r in ess[1:]} == {"min", "med", "max"}
    assert len(_read(tmp_path / "a" / "acceptance.csv")) == 1 + 2 * 3 * 4


def test_seed_flag_changes_draws(tmp_path):
    cfg = _write(tmp_path)
    main(["--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "12"])
    assert _read(tmp_path / "a" / "energy.csv") != _read(tmp_path / "b" / "energy.csv")


def test_service_endpoints():
    client = TestClient(app)
    assert client.get("/strategies").json() == list(ALL_STRATEGIES)
    sim = client.post("/simulate", json={"model": {"name": "lgssm", "dim": 3, "horizon": 5}, "seed": 2}).json()
    assert np.array(sim["states"]).shape == (5, 3)
    cfg = parse_config_text(SMALL, env={}).model_dump(mode="json", by_alias=True)
    body = client.post("/runs", json={"config": cfg}).json()
    assert set(body["tables"]) == set(TABLE_COLUMNS)
    assert body["failures"] == {}
    assert body["tables"]["ess"]["columns"] == list(TABLE_COLUMNS["ess"])
    bad = dict(cfg, run=dict(cfg["run"], strategies=["p-hmc"]))
    assert client.post("/runs", json={"config": bad}).status_code == 422
