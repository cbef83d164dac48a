"""Command-line entry point.

Commands: search, baseline, oracle, curves, eval-stub. Exit codes are a
stable contract: 0 success, 1 usage/config error, 2 evaluator error. Every
failure is also printed as one structured JSON line on stderr. All
randomness flows from seeds in the config or --seed flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import orchestrator
from .evaluator_iface import EvaluatorError, serve_stub
from .orchestrator import SearchConfig, config_hash
from .sac_agent import AgentConfig
from .surrogate_bench import SurrogateSpec, oracle_enumerate

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_EVALUATOR = 2

OUT_ENV_VAR = "E2NAS_OUT"


class UsageError(Exception):
    pass


def _build_section(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise UsageError(f"unknown {section} config keys: {sorted(unknown)}")
    converted = {
        k: tuple(v) if isinstance(v, list) else v for k, v in data.items()
    }
    try:
        return cls(**converted)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {section} config: {exc}") from exc


def load_config(path) -> SearchConfig:
    """Parse the JSON config file; unknown keys are errors."""
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config root must be a JSON object")
    agent = _build_section(AgentConfig, data.pop("agent", {}), "agent")
    surrogate = _build_section(SurrogateSpec, data.pop("surrogate", {"seed": 0}), "surrogate")
    cfg = _build_section(
        SearchConfig, {**data, "agent": agent, "surrogate": surrogate}, "search"
    )
    return cfg


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    env = os.environ.get(OUT_ENV_VAR)
    return Path(env) if env else Path("runs")


def _apply_overrides(cfg: SearchConfig, args) -> SearchConfig:
    if getattr(args, "evaluator", None):
        cfg.evaluator = args.evaluator
    return cfg


def _write_manifest(out_root: Path, command: str, config_path: str, cfg: SearchConfig,
                    seeds: list[int]) -> None:
    out_root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_path": str(config_path),
        "config_hash": config_hash(cfg),
        "seeds": seeds,
        "output_root": str(out_root),
    }
    with open(out_root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _seed_config(cfg: SearchConfig, seed: int, out_root: Path) -> SearchConfig:
    import copy

    seeded = copy.deepcopy(cfg)
    seeded.seed = seed
    seeded.out_dir = str(out_root / f"seed{seed}")
    return seeded


def _run_one(args_tuple) -> float:
    seeded_cfg, baseline = args_tuple
    run = orchestrator.run_random_baseline if baseline else orchestrator.run_search
    report = run(seeded_cfg)
    return report.best_return


def _cmd_search_or_baseline(args, baseline: bool) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    seeds = args.seed if args.seed else [cfg.seed]
    out_root = _out_root(args)
    _write_manifest(out_root, "baseline" if baseline else "search", args.config, cfg, seeds)
    jobs = [(_seed_config(cfg, s, out_root), baseline) for s in seeds]
    if args.parallel and len(jobs) > 1:
        import concurrent.futures

        with concurrent.futures.ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            bests = list(pool.map(_run_one, jobs))
    else:
        bests = [_run_one(job) for job in jobs]
    for seed, best in zip(seeds, bests):
        print(f"seed {seed}: best_return={best!r}")
    return EXIT_OK


def _cmd_oracle(args) -> int:
    cfg = load_config(args.config)
    alpha = cfg.alpha if args.alpha is None else args.alpha
    report = oracle_enumerate(cfg.surrogate, alpha)
    out_root = _out_root(args)
    out_root.mkdir(parents=True, exist_ok=True)
    out_path = out_root / "oracle.csv"
    report.to_csv(out_path)
    from . import genotype as gt

    top = gt.genotype_from_index(int(report.genotype_indices[0]), cfg.surrogate.max_cells,
                                 cfg.surrogate.max_cells)
    print(f"oracle: {len(report)} genotypes ranked, alpha={alpha}")
    print(f"top-1 objective={report.objectives[0]!r}")
    print(gt.serialize(top))
    print(f"written: {out_path}")
    return EXIT_OK


def _cmd_curves(args) -> int:
    rows = []
    for path in args.reports:
        records = orchestrator.read_report_csv(path)
        snapshot_path = Path(path).parent / "config.snapshot"
        try:
            with open(snapshot_path) as f:
                seed = json.load(f)["config"]["seed"]
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise UsageError(
                f"cannot determine seed for {path}: missing config.snapshot ({exc})"
            ) from exc
        rows.extend((r.iteration, seed, r.best_return) for r in records)
    with open(args.out_file, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iter", "seed", "best_return"])
        for it, seed, best in rows:
            writer.writerow([it, seed, repr(best)])
    print(f"written: {args.out_file} ({len(rows)} rows)")
    return EXIT_OK


def _cmd_eval_stub(args) -> int:
    serve_stub(sys.stdin, sys.stdout, psr_dim=args.psr_dim)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="e2nas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, action="append", help="run seed (repeatable)")
        p.add_argument("--out", help=f"output root (default ${OUT_ENV_VAR} or ./runs)")
        p.add_argument("--evaluator", help="surrogate | external:<endpoint>")
        p.add_argument("--parallel", action="store_true", help="one process per seed")

    add_run_flags(sub.add_parser("search", help="run the RL architecture search"))
    add_run_flags(sub.add_parser("baseline", help="run the uniform random-search baseline"))

    oracle_p = sub.add_parser("oracle", help="exhaustively rank every genotype")
    oracle_p.add_argument("--config", required=True)
    oracle_p.add_argument("--alpha", type=float, default=None, help="override objective alpha")
    oracle_p.add_argument("--out", help="output root")

    curves_p = sub.add_parser("curves", help="merge report CSVs into a tidy curve CSV")
    curves_p.add_argument("reports", nargs="+", help="report.csv paths")
    curves_p.add_argument("--out-file", default="curves.csv")

    stub_p = sub.add_parser("eval-stub", help="serve the echo-stub evaluator on stdio")
    stub_p.add_argument("--psr-dim", type=int, default=64)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; remap to the stable config code
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        if args.command == "search":
            return _cmd_search_or_baseline(args, baseline=False)
        if args.command == "baseline":
            return _cmd_search_or_baseline(args, baseline=True)
        if args.command == "oracle":
            return _cmd_oracle(args)
        if args.command == "curves":
            return _cmd_curves(args)
        if args.command == "eval-stub":
            return _cmd_eval_stub(args)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ValueError, orchestrator.ConfigMismatchError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except EvaluatorError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_EVALUATOR


if __name__ == "__main__":
    sys.exit(main())
