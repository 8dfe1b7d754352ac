"""Command-line entry point: ``diversefl {run,sweep,bound,capacity}``."""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__, theory
from .config import SWEEP_ALIASES, SWEEPABLE, ExperimentConfig, load_config
from .errors import ConfigError, DomainError
from .orchestrator import rounds_csv, run_experiment, summary_json, trace_dat

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ANOMALY = 3


@dataclass
class RunManifest:
    config_hash: str
    artifacts: Dict[str, str]
    version: str
    seed: int
    duration_s: float
    anomaly: bool = False


def _out_dir(arg: Optional[str]) -> Path:
    return Path(arg or os.environ.get("DIVERSEFL_OUT_DIR") or "diversefl-out")


def _with_seed(cfg: ExperimentConfig, seed: Optional[int]) -> ExperimentConfig:
    return cfg if seed is None else cfg.with_override("seed", seed)


def cmd_run(cfg: ExperimentConfig, out_dir, workers: int = 1, trace: bool = False, quiet: bool = True) -> RunManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    def progress(rec):
        if not quiet:
            acc = "-" if rec.accuracy is None else f"{rec.accuracy:.4f}"
            print(f"round {rec.round}/{cfg.rounds} acc={acc} flagged={rec.flagged}", file=sys.stderr)

    result = run_experiment(cfg, workers=workers, progress=progress)
    artifacts = {"rounds": out / "rounds.csv", "summary": out / "summary.json", "manifest": out / "manifest.json"}
    artifacts["rounds"].write_text(rounds_csv(cfg, result.records))
    artifacts["summary"].write_text(summary_json(result))
    if trace or cfg.trace_similarity or cfg.rule == "diversefl":
        artifacts["trace"] = out / "trace.dat"
        artifacts["trace"].write_text(trace_dat(result.records))
    manifest = RunManifest(
        config_hash=cfg.config_hash(),
        artifacts={k: str(v) for k, v in artifacts.items()},
        version=__version__,
        seed=cfg.seed,
        duration_s=time.perf_counter() - started,
        anomaly=bool(result.summary["anomaly"]),
    )
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    artifacts["manifest"].write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True))
    return manifest


def _coerce(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def cmd_sweep(cfg: ExperimentConfig, axis: str, values: List, out_dir, workers: int = 1) -> List[RunManifest]:
    """One run per value in ``out_dir/<axis>=<value>``, then ``comparison.csv``."""
    field = SWEEP_ALIASES.get(axis, axis)
    if field not in SWEEPABLE:
        raise ConfigError([f"{axis}: not a sweepable field (choose from {', '.join(SWEEPABLE)})"])
    if not values:
        raise ConfigError([f"{axis}: sweep needs at least one value"])
    # validate every point before running any
    points = [(v, cfg.with_override(field, v)) for v in values]
    out = Path(out_dir)
    manifests = []
    rows = []
    for value, point in points:
        m = cmd_run(point, out / f"{axis}={value}", workers)
        manifests.append(m)
        summary = json.loads(Path(m.artifacts["summary"]).read_text())
        rows.append([value, point.rule, summary["final_accuracy"], summary["best_accuracy"],
                     summary["mean_precision"], summary["mean_recall"], summary["no_survivor_rounds"],
                     m.artifacts["rounds"]])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([axis, "rule", "final_accuracy", "best_accuracy", "mean_precision", "mean_recall",
                     "no_survivor_rounds", "rounds_csv"])
    for row in rows:
        writer.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(buf.getvalue())
    return manifests


BOUND_FIELDS = ("mu", "L", "L1", "sigma1", "sigma2", "gamma_1", "gamma_2", "beta", "r", "s", "d", "N",
                "delta_total", "eps3", "alpha")


def bound_grid(raw: dict) -> List[theory.BoundParams]:
    """Cartesian product over fields given as lists; scalars are held fixed."""
    section = raw.get("bound", raw)
    unknown = sorted(set(section) - set(BOUND_FIELDS))
    if unknown:
        raise ConfigError([f"bound.{k}: unknown field" for k in unknown])
    names = list(section)
    axes = [v if isinstance(v, list) else [v] for v in section.values()]
    if any(len(a) == 0 for a in axes):
        raise ConfigError(["bound: empty value list"])
    grid = []
    for combo in itertools.product(*axes):
        try:
            grid.append(theory.BoundParams(**dict(zip(names, combo))))
        except TypeError as exc:
            raise ConfigError([f"bound: {exc}"]) from None
    return grid


def cmd_bound(raw: dict, stream=None) -> List[dict]:
    stream = stream or sys.stdout
    rows = []
    header = f"{'s':>8} {'d':>6} {'Gamma1':>14} {'Gamma2':>14} {'rho':>14} {'asymptote':>14}  status"
    print(header, file=stream)
    for p in bound_grid(raw):
        try:
            ev = p.evaluate()
        except DomainError as exc:
            print(f"{p.s:>8} {p.d:>6}  domain error: {exc}", file=stream)
            rows.append({"params": asdict(p), "error": str(exc)})
            continue
        status = "contractive" if ev["contractive"] else "NON-CONTRACTIVE"
        if ev["notes"]:
            status += " (" + "; ".join(ev["notes"]) + ")"
        print(f"{p.s:>8} {p.d:>6} {ev['gamma1']:>14.6g} {ev['gamma2']:>14.6g} {ev['rho']:>14.6g} "
              f"{ev['asymptote']:>14.6g}  {status}", file=stream)
        rows.append({"params": asdict(p), **ev})
    return rows


def cmd_capacity(client_ms: float, enclave_ms: float, stream=None) -> int:
    stream = stream or sys.stdout
    n = theory.capacity(client_ms, enclave_ms)
    if n == 0:
        warnings.warn("enclave is the bottleneck: it cannot keep up with even one client", stacklevel=2)
    print(n, file=stream)
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diversefl", description="Federated learning simulator with enclave-guided filtering")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="output directory (default $DIVERSEFL_OUT_DIR or ./diversefl-out)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--workers", type=int, default=1, help="threads for client simulation")

    run = sub.add_parser("run", help="run one experiment")
    common(run)
    run.add_argument("--trace", action="store_true", help="always write trace.dat")
    run.add_argument("--verbose", "-v", action="store_true")

    sweep = sub.add_parser("sweep", help="run one experiment per value of a field")
    common(sweep)
    sweep.add_argument("--axis", required=True, help=f"field to vary; aliases {sorted(SWEEP_ALIASES)}")
    sweep.add_argument("--values", nargs="*", default=[], help="values (JSON literals or bare strings)")

    bound = sub.add_parser("bound", help="tabulate the convergence bound over a parameter grid")
    bound.add_argument("--config", required=True, help="JSON document with a 'bound' section")

    cap = sub.add_parser("capacity", help="clients one enclave can serve per round")
    cap.add_argument("--client-ms", type=float, required=True)
    cap.add_argument("--enclave-ms", type=float, required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "capacity":
            cmd_capacity(args.client_ms, args.enclave_ms)
            return EXIT_OK
        if args.command == "bound":
            with open(args.config) as fh:
                cmd_bound(json.load(fh))
            return EXIT_OK
        cfg = _with_seed(load_config(args.config), args.seed)
        out = _out_dir(args.out)
        if args.command == "run":
            manifest = cmd_run(cfg, out, args.workers, args.trace, quiet=not args.verbose)
            print(json.dumps(asdict(manifest), indent=2, sort_keys=True))
            return EXIT_ANOMALY if manifest.anomaly else EXIT_OK
        manifests = cmd_sweep(cfg, args.axis, [_coerce(v) for v in args.values], out, args.workers)
        print(out / "comparison.csv")
        return EXIT_ANOMALY if any(m.anomaly for m in manifests) else EXIT_OK
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (DomainError, json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
