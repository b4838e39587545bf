"""Command line entry point.

    pmgrad --config run.ini --out results/ [--seed S] [--threads N]
    pmgrad --config run.ini --out data/ --simulate
    pmgrad --list-strategies
    pmgrad --serve [--host H] [--port P]

With ``--server URL`` the run is submitted to a running service instead of
executed locally; the CSV files are written the same way.
"""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .experiment import ExperimentError, ExperimentResult, run_experiment, write_simulated_data, write_tables
from .model import ModelError
from .strategies import ALL_STRATEGIES


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmgrad", description="Particle MCMC experiments on state-space models.")
    p.add_argument("--config", metavar="PATH", help="INI experiment configuration")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, metavar="U64", help="overrides run.seed")
    p.add_argument("--threads", type=int, default=1, metavar="N", help="worker processes (default 1)")
    p.add_argument("--list-strategies", action="store_true", help="print strategy names and exit")
    p.add_argument("--simulate", action="store_true", help="only simulate data and write it to --out")
    p.add_argument("--server", metavar="URL", help="submit the run to a service at URL")
    p.add_argument("--serve", action="store_true", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return p


def _remote(url: str, cfg, threads: int) -> ExperimentResult:
    import httpx

    resp = httpx.post(
        url.rstrip("/") + "/runs",
        json={"config": cfg.model_dump(mode="json", by_alias=True), "threads": threads},
        timeout=None,
    )
    if resp.status_code == 422:
        raise ModelError(resp.json().get("detail"))
    resp.raise_for_status()
    body = resp.json()
    result = ExperimentResult()
    for name, table in body["tables"].items():
        result.tables[name] = [tuple(r) for r in table["rows"]]
    if body.get("failures"):
        raise ExperimentError(body["failures"], result)
    return result


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.list_strategies:
        print("\n".join(ALL_STRATEGIES))
        return 0
    if args.serve:
        import uvicorn

        uvicorn.run("pmgrad.service:app", host=args.host, port=args.port)
        return 0
    if not args.config or not args.out:
        print("pmgrad: --config and --out are required", file=sys.stderr)
        return 2
    if args.threads < 1:
        print("pmgrad: --threads must be positive", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.run.seed = args.seed
        if args.simulate:
            for path in write_simulated_data(cfg, args.out):
                print(path)
            return 0
        if args.server:
            result = _remote(args.server, cfg, args.threads)
        else:
            result = run_experiment(cfg, threads=args.threads)
    except ExperimentError as exc:
        write_tables(exc.result, args.out)
        print(f"pmgrad: {exc}", file=sys.stderr)
        return 1
    except (ModelError, KeyError, ValueError, OSError) as exc:
        print(f"pmgrad: {exc}", file=sys.stderr)
        return 2
    for path in write_tables(result, args.out):
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
