"""Command-line surface: data generation, runs, sweeps, trace replay, reports.

Exit codes: 0 success, 2 configuration fault, 3 data/trace fault,
4 numerical abort. All outputs are plain CSV/JSON/JSONL except checkpoints.
The MOEMIX_OUT environment variable overrides the default output root.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError, MoeMixError, NumericsError
from .gate_stats import distance_summary, normalize_rows, read_gateload_trace
from .scheduler import RoundSignals, SchedulerConfig, make_policy
from .synth_data import (
    default_manifest,
    generate_corpora,
    read_manifest,
    write_corpora,
    write_manifest,
)
from . import trainer
from .trainer import (
    ROUNDS_CSV_FIELDS,
    SCHEMA_VERSION,
    apply_overrides,
    parse_override_value,
    resolve_run_config,
    run_refloss,
    run_sweep,
    run_training,
)


def replay_trace(trace_path: str | Path, scheduler_config: SchedulerConfig) -> list[dict]:
    """Re-run a policy over a recorded gate-load trace, without any model.

    Produces one weight row per (round, dataset) with the same schema as a
    training run's rounds.csv, so replays and real runs plot identically.
    """
    if scheduler_config.policy in ("refloss", "dynamic_sentemb"):
        raise ConfigurationError(
            f"policy {scheduler_config.policy!r} needs signals a gate-load trace "
            "does not carry"
        )
    records = read_gateload_trace(trace_path)
    names = records[0][1].dataset_names
    policy = make_policy(scheduler_config, len(names), [1] * len(names))
    weights = policy.initial()
    rows = []
    for round_index, loads in records:
        distances = distance_summary(normalize_rows(loads))
        signals = RoundSignals(gate_distances=distances.averaged)
        weights, delta = policy.update(weights, signals)
        for i, name in enumerate(names):
            rows.append(
                {
                    "round": round_index,
                    "step": round_index * scheduler_config.interval,
                    "dataset_name": name,
                    "weight": float(weights.w[i]),
                    "delta": float(delta[i]),
                    "policy": policy.name,
                }
            )
    return rows


def write_replay_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROUNDS_CSV_FIELDS)
        for row in rows:
            writer.writerow(
                [
                    row["round"],
                    row["step"],
                    row["dataset_name"],
                    repr(row["weight"]),
                    repr(row["delta"]),
                    row["policy"],
                ]
            )


def build_report(run_dirs: Sequence[str | Path]) -> tuple[list[dict], int]:
    """Consolidate run summaries into one table; never fails on bad runs.

    Returns (rows, warning_count) where each row is a run's key results or a
    placeholder marking the run absent.
    """
    rows = []
    warnings = 0
    for d in run_dirs:
        directory = Path(d)
        summary_path = directory / "summary.json"
        if not summary_path.exists():
            rows.append({"run_dir": str(directory), "status": "absent"})
            warnings += 1
            continue
        try:
            summary = json.loads(summary_path.read_text())
        except json.JSONDecodeError:
            rows.append({"run_dir": str(directory), "status": "unreadable"})
            warnings += 1
            continue
        row = {
            "run_dir": str(directory),
            "status": summary.get("status", "unknown"),
            "run_id": summary.get("run_id"),
            "policy": summary.get("policy"),
            "seed": summary.get("seed"),
            "interval": summary.get("interval"),
            "macro_avg_loss": summary.get("macro_avg_loss"),
            "mean_total_variation": summary.get("oscillation", {}).get(
                "mean_total_variation"
            ),
            "final_per_dataset_losses": summary.get("final_per_dataset_losses"),
            "final_weights": summary.get("final_weights"),
        }
        rows.append(row)
    return rows, warnings


def write_report(rows: Sequence[dict], warnings: int, out_path: str | Path) -> None:
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = {"schema_version": SCHEMA_VERSION, "warnings": warnings, "runs": list(rows)}
    out.with_suffix(".json").write_text(json.dumps(payload, indent=2) + "\n")
    fields = (
        "run_dir",
        "run_id",
        "status",
        "policy",
        "seed",
        "interval",
        "macro_avg_loss",
        "mean_total_variation",
    )
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([row.get(f, "") for f in fields])


def _default_out_root() -> str:
    return os.environ.get("MOEMIX_OUT", "runs")


def _load_raw_config(path: str | None) -> tuple[dict, Path | None]:
    if path is None:
        return trainer.default_run_dict(), None
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text()), p.parent
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {p} is not valid JSON: {exc}") from exc


def _collect_overrides(args: argparse.Namespace) -> dict[str, object]:
    overrides: dict[str, object] = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = parse_override_value(value.strip())
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "policy", None):
        overrides["scheduler.policy"] = args.policy
    if getattr(args, "interval", None) is not None:
        overrides["scheduler.interval"] = args.interval
    if getattr(args, "steps", None) is not None:
        overrides["train.total_steps"] = args.steps
    return overrides


def _resolved_config(args: argparse.Namespace):
    raw, base_dir = _load_raw_config(args.config)
    raw.setdefault("out_dir", _default_out_root())
    raw = apply_overrides(raw, _collect_overrides(args))
    return resolve_run_config(raw, base_dir), raw


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad {what} list {text!r}: {exc}") from exc


def _add_common_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="run config JSON (defaults apply if omitted)")
    parser.add_argument("--out", help="output root (overrides config and MOEMIX_OUT)")
    parser.add_argument("--seed", type=int, help="run seed override")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="dotted-key config override, repeatable (e.g. --set scheduler.eta=5)",
    )
    parser.add_argument("--policy", help="scheduler policy override")
    parser.add_argument("--interval", type=int, help="evaluation interval override")
    parser.add_argument("--steps", type=int, help="total training steps override")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moemix",
        description="Sparse-MoE training lab with dynamic data-mixture scheduling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate corpora from a manifest")
    p.add_argument("--manifest", default="default", help="manifest JSON path or 'default'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the manifest seed")

    p = sub.add_parser("train", help="run one training job")
    _add_common_run_flags(p)

    p = sub.add_parser("refloss", help="two-phase refloss run (uniform then refloss)")
    _add_common_run_flags(p)

    p = sub.add_parser("sweep", help="cross-product of policies x seeds x intervals")
    _add_common_run_flags(p)
    p.add_argument("--policies", required=True, help="comma-separated policy names")
    p.add_argument("--seeds", required=True, help="comma-separated seeds")
    p.add_argument("--intervals", required=True, help="comma-separated intervals")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("replay", help="re-run a policy over a gate-load trace")
    p.add_argument("--trace", required=True, help="gateloads.csv from a run")
    p.add_argument("--config", help="run or scheduler config JSON")
    p.add_argument("--policy", help="scheduler policy override")
    p.add_argument("--interval", type=int, help="evaluation interval override")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("report", help="consolidate run summaries into one table")
    p.add_argument("run_dirs", nargs="+", help="run directories containing summary.json")
    p.add_argument("--out", required=True, help="output path stem (.json/.csv added)")

    return parser


def _cmd_gen_data(args: argparse.Namespace) -> int:
    if args.manifest == "default":
        manifest = default_manifest()
    else:
        manifest = read_manifest(args.manifest)
    if args.seed is not None:
        import dataclasses

        manifest = dataclasses.replace(manifest, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpora = generate_corpora(manifest)
    write_manifest(manifest, out / "manifest.json")
    write_corpora(corpora, out / "corpora.jsonl")
    n_seq = sum(len(t) + len(p) for t, p in corpora.values())
    print(f"wrote {n_seq} sequences across {len(corpora)} domains to {out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config, _ = _resolved_config(args)
    record = run_training(config, progress=print)
    print(f"run {record.run_id} finished: macro loss "
          f"{record.summary['macro_avg_loss']:.4f} -> {record.run_dir}")
    return 0


def _cmd_refloss(args: argparse.Namespace) -> int:
    config, _ = _resolved_config(args)
    record = run_refloss(config)
    print(
        f"refloss {config.run_id}: phase1 macro "
        f"{record.phase1.summary['macro_avg_loss']:.4f}, phase2 macro "
        f"{record.phase2.summary['macro_avg_loss']:.4f} "
        f"({record.total_optimizer_steps} optimizer steps total)"
    )
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    raw, base_dir = _load_raw_config(args.config)
    raw.setdefault("out_dir", _default_out_root())
    raw = apply_overrides(raw, _collect_overrides(args))
    # Resolve once to validate the base config and manifest path handling.
    base = resolve_run_config(raw, base_dir)
    if isinstance(raw.get("data", {}).get("manifest"), str) and raw["data"]["manifest"] != "default":
        raw["data"]["manifest"] = base.manifest.to_dict()
    results = run_sweep(
        raw,
        policies=[p.strip() for p in args.policies.split(",") if p.strip()],
        seeds=_parse_int_list(args.seeds, "seeds"),
        intervals=_parse_int_list(args.intervals, "intervals"),
        out_dir=raw.get("out_dir", _default_out_root()),
        jobs=args.jobs,
    )
    ok = sum(1 for r in results if r.get("status") == "ok")
    print(f"sweep finished: {ok}/{len(results)} cells ok")
    return 0


def _scheduler_from_replay_args(args: argparse.Namespace) -> SchedulerConfig:
    raw: dict = {}
    if args.config:
        loaded, _ = _load_raw_config(args.config)
        raw = loaded.get("scheduler", loaded)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        key = key.removeprefix("scheduler.")
        raw[key] = parse_override_value(value.strip())
    if args.policy:
        raw["policy"] = args.policy
    if args.interval is not None:
        raw["interval"] = args.interval
    defaults = trainer.default_run_dict()["scheduler"]
    merged = dict(defaults, **raw)
    if merged.get("seed") is None:
        merged["seed"] = 0
    if merged.get("initial_weights") is None:
        merged["initial_weights"] = "uniform"
    if isinstance(merged.get("initial_weights"), list):
        merged["initial_weights"] = tuple(merged["initial_weights"])
    if isinstance(merged.get("final_weights"), list):
        merged["final_weights"] = tuple(merged["final_weights"])
    if merged.get("random_noise_scale") is None:
        merged.pop("random_noise_scale", None)
    try:
        return SchedulerConfig(**merged)
    except TypeError as exc:
        raise ConfigurationError(f"unknown scheduler field: {exc}") from exc


def _cmd_replay(args: argparse.Namespace) -> int:
    config = _scheduler_from_replay_args(args)
    rows = replay_trace(args.trace, config)
    write_replay_csv(rows, args.out)
    rounds = rows[-1]["round"] if rows else 0
    print(f"replayed {rounds} rounds with policy {config.policy} -> {args.out}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    rows, warnings = build_report(args.run_dirs)
    write_report(rows, warnings, args.out)
    print(f"report over {len(rows)} runs ({warnings} warnings) -> {args.out}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "refloss": _cmd_refloss,
    "sweep": _cmd_sweep,
    "replay": _cmd_replay,
    "report": _cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
