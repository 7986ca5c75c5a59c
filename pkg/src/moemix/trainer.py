"""Training orchestration: weighted sampling, optimization, per-round probing,
scheduler updates, the two-phase refloss protocol, and experiment sweeps.

A run of `total_steps` optimizer steps is split into rounds of `interval`
steps. Batches are drawn according to the current sampling weights; at every
round boundary the held-out probe splits are run through the network to
collect gate loads and per-dataset losses, the policy updates the weights,
and the round is logged. All artifacts land under <out_dir>/<run_id>/ as
plain CSV/JSON plus one binary checkpoint.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, MoeMixError, NumericsError
from .gate_stats import (
    DistanceSummary,
    GateLoadMatrix,
    distance_summary,
    distances_to_json,
    embedding_distance_summary,
    normalize_rows,
    probe_gate_loads,
    write_gateload_trace,
)
from .moe_core import (
    AdamWState,
    LrSchedule,
    MoEConfig,
    MoENetwork,
    adamw_step,
    backward,
    cv_squared,
    forward_loss,
    save_checkpoint,
)
from .scheduler import (
    RoundSignals,
    SamplingPolicy,
    SamplingWeights,
    SchedulerConfig,
    ScriptedPolicy,
    make_policy,
)
from .synth_data import (
    CorpusManifest,
    DomainCorpus,
    corpus_embeddings,
    default_manifest,
    generate_corpora,
    read_manifest,
    sample_batch,
)

SCHEMA_VERSION = 1

ROUNDS_CSV_FIELDS = ("round", "step", "dataset_name", "weight", "delta", "policy")

# Seed-stream tags: one purpose per substream so policies, sampling, and
# model noise never share randomness.
_STREAM_MODEL = 1
_STREAM_NOISE = 2
_STREAM_SAMPLER = 3
_STREAM_POLICY = 4


def _derived_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 32
    peak_lr: float = 5e-3
    warmup_frac: float = 0.03
    min_lr: float = 0.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int | None = None  # None: evaluate at round boundaries only

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.eval_every is not None and self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1 when set")


@dataclass(frozen=True)
class RunConfig:
    run_id: str
    seed: int
    out_dir: str
    model: MoEConfig
    scheduler: SchedulerConfig
    train: TrainConfig
    manifest: CorpusManifest
    probe_batch_size: int = 256

    def __post_init__(self) -> None:
        if self.train.total_steps < self.scheduler.interval:
            raise ConfigurationError(
                f"total_steps ({self.train.total_steps}) must be at least the "
                f"evaluation interval ({self.scheduler.interval})"
            )
        if self.model.vocab_size != self.manifest.vocab_size:
            raise ConfigurationError(
                f"model vocab_size ({self.model.vocab_size}) does not match the "
                f"data manifest ({self.manifest.vocab_size})"
            )

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.run_id


@dataclass
class RoundRecord:
    round_index: int
    step: int
    weights: np.ndarray
    delta: np.ndarray
    gate_loads: GateLoadMatrix
    distances: DistanceSummary
    eval_losses: np.ndarray


@dataclass
class RunRecord:
    run_id: str
    run_dir: Path
    dataset_names: tuple[str, ...]
    initial_weights: np.ndarray
    rounds: list[RoundRecord]
    step_metrics: list[dict]
    final_eval_losses: np.ndarray
    optimizer_steps: int
    checkpoint_path: Path
    summary: dict

    @property
    def final_weights(self) -> np.ndarray:
        return self.rounds[-1].weights if self.rounds else self.initial_weights

    def weight_trajectory(self) -> np.ndarray:
        """Initial weights followed by each round's updated weights."""
        return np.stack([self.initial_weights] + [r.weights for r in self.rounds])


def weight_total_variation(trajectory: np.ndarray) -> np.ndarray:
    """Per-dataset total variation of a [rounds+1, datasets] weight path."""
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[0] < 1:
        raise ConfigurationError("trajectory must be a [points, datasets] matrix")
    if traj.shape[0] == 1:
        return np.zeros(traj.shape[1])
    return np.abs(np.diff(traj, axis=0)).sum(axis=0)


def evaluate_per_dataset(
    network: MoENetwork,
    probe_corpora: Sequence[DomainCorpus],
    batch_size: int = 256,
) -> np.ndarray:
    """Deterministic mean next-token loss per dataset (no gate noise)."""
    from .synth_data import pad_sequences

    losses = []
    for corpus in probe_corpora:
        if len(corpus) == 0:
            raise DataError(f"evaluation split for {corpus.domain!r} is empty")
        weighted = 0.0
        count = 0
        for start in range(0, len(corpus), batch_size):
            chunk = corpus.sequences[start : start + batch_size]
            result = forward_loss(network, pad_sequences(chunk), train_mode=False)
            weighted += result.task_loss * result.target_count
            count += result.target_count
        losses.append(weighted / count)
    return np.asarray(losses, dtype=np.float64)


def _policy_for_run(config: RunConfig, train_sizes: Sequence[int]) -> SamplingPolicy:
    return make_policy(config.scheduler, len(train_sizes), train_sizes)


def _write_rounds_csv(
    path: Path,
    policy_name: str,
    dataset_names: Sequence[str],
    rounds: Sequence[RoundRecord],
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROUNDS_CSV_FIELDS)
        for rec in rounds:
            for i, name in enumerate(dataset_names):
                writer.writerow(
                    [
                        rec.round_index,
                        rec.step,
                        name,
                        repr(float(rec.weights[i])),
                        repr(float(rec.delta[i])),
                        policy_name,
                    ]
                )


def run_training(
    config: RunConfig,
    corpora: Mapping[str, tuple[DomainCorpus, DomainCorpus]] | None = None,
    reference_losses: np.ndarray | None = None,
    policy: SamplingPolicy | None = None,
    progress: Callable[[str], None] | None = None,
) -> RunRecord:
    """Run one training job end to end and write its artifact directory.

    `corpora` may be passed to share generated data across runs; otherwise it
    is generated from the manifest. `reference_losses` feeds the refloss
    policy (phase two of the two-phase protocol). A pre-built `policy`
    overrides the configured one (used for scripted weight replays).
    """
    run_dir = config.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    if corpora is None:
        corpora = generate_corpora(config.manifest)
    names = config.manifest.domain_names
    trains = [corpora[n][0] for n in names]
    probes = [corpora[n][1] for n in names]

    network = MoENetwork(config.model)
    opt_state = AdamWState.for_network(network)
    schedule = LrSchedule(
        peak_lr=config.train.peak_lr,
        total_steps=config.train.total_steps,
        warmup_frac=config.train.warmup_frac,
        min_lr=config.train.min_lr,
    )
    noise_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, _STREAM_NOISE])
    )
    sampler_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, _STREAM_SAMPLER])
    )
    if policy is None:
        policy = _policy_for_run(config, [len(t) for t in trains])

    emb_distances = None
    if config.scheduler.policy == "dynamic_sentemb":
        emb = corpus_embeddings(probes, config.manifest.vocab_size)
        emb_distances = embedding_distance_summary(emb, names).averaged

    weights = policy.initial()
    initial_weights = weights.w.copy()
    interval = config.scheduler.interval
    rounds: list[RoundRecord] = []
    step_metrics: list[dict] = []

    _write_config(config, run_dir / "config.json")
    metrics_path = run_dir / "metrics.jsonl"

    with open(metrics_path, "w") as metrics_fh:
        try:
            for step in range(config.train.total_steps):
                batch = sample_batch(weights, trains, config.train.batch_size, sampler_rng)
                result = forward_loss(
                    network, batch.tokens, train_mode=True, rng=noise_rng
                )
                if not np.isfinite(result.total_loss):
                    raise NumericsError(f"non-finite loss at step {step}")
                grads = backward(network, result)
                lr = schedule.lr_at(step)
                adamw_step(
                    network,
                    grads,
                    opt_state,
                    lr,
                    beta1=config.train.beta1,
                    beta2=config.train.beta2,
                    eps=config.train.eps,
                    weight_decay=config.train.weight_decay,
                )
                last = result.stats[-1]
                line = {
                    "step": step,
                    "task_loss": result.task_loss,
                    "balance_loss": float(np.sum(result.balance_losses)),
                    "total_loss": result.total_loss,
                    "lr": lr,
                    "cv_g2": cv_squared(last.importance),
                    "cv_o2": cv_squared(last.load.astype(np.float64)),
                }
                if (
                    config.train.eval_every is not None
                    and (step + 1) % config.train.eval_every == 0
                ):
                    evals = evaluate_per_dataset(network, probes, config.probe_batch_size)
                    line["eval_losses"] = {n: float(x) for n, x in zip(names, evals)}
                metrics_fh.write(json.dumps(line) + "\n")
                step_metrics.append(line)

                if (step + 1) % interval == 0:
                    round_index = (step + 1) // interval
                    loads = probe_gate_loads(
                        network, dict(zip(names, probes)), batch_size=config.probe_batch_size
                    )
                    distances = distance_summary(normalize_rows(loads))
                    eval_losses = evaluate_per_dataset(
                        network, probes, config.probe_batch_size
                    )
                    signals = RoundSignals(
                        gate_distances=distances.averaged,
                        embedding_distances=emb_distances,
                        current_losses=eval_losses,
                        reference_losses=reference_losses,
                    )
                    weights, delta = policy.update(weights, signals)
                    rounds.append(
                        RoundRecord(
                            round_index=round_index,
                            step=step + 1,
                            weights=weights.w.copy(),
                            delta=np.asarray(delta, dtype=np.float64),
                            gate_loads=loads,
                            distances=distances,
                            eval_losses=eval_losses,
                        )
                    )
                    if progress is not None:
                        progress(
                            f"round {round_index}: weights="
                            + np.array2string(weights.w, precision=4)
                        )
        except NumericsError as exc:
            _write_failure(config, run_dir, str(exc))
            raise

    final_eval = evaluate_per_dataset(network, probes, config.probe_batch_size)
    checkpoint_path = run_dir / "checkpoint.bin"
    save_checkpoint(network, checkpoint_path)
    _write_rounds_csv(run_dir / "rounds.csv", policy.name, names, rounds)
    write_gateload_trace(
        [(r.round_index, r.gate_loads) for r in rounds], run_dir / "gateloads.csv"
    )
    distances_to_json(
        [(r.round_index, r.distances) for r in rounds], run_dir / "distances.json"
    )

    trajectory = np.stack([initial_weights] + [r.weights for r in rounds])
    tv = weight_total_variation(trajectory)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "status": "ok",
        "run_id": config.run_id,
        "policy": policy.name,
        "seed": config.seed,
        "interval": interval,
        "total_steps": config.train.total_steps,
        "batch_size": config.train.batch_size,
        "optimizer_steps": opt_state.step_count,
        "rounds": len(rounds),
        "dataset_names": list(names),
        "initial_weights": {n: float(w) for n, w in zip(names, initial_weights)},
        "final_weights": {
            n: float(w) for n, w in zip(names, rounds[-1].weights if rounds else initial_weights)
        },
        "final_per_dataset_losses": {n: float(x) for n, x in zip(names, final_eval)},
        "macro_avg_loss": float(final_eval.mean()),
        "oscillation": {
            "per_dataset_total_variation": {n: float(x) for n, x in zip(names, tv)},
            "mean_total_variation": float(tv.mean()),
        },
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")

    return RunRecord(
        run_id=config.run_id,
        run_dir=run_dir,
        dataset_names=names,
        initial_weights=initial_weights,
        rounds=rounds,
        step_metrics=step_metrics,
        final_eval_losses=final_eval,
        optimizer_steps=opt_state.step_count,
        checkpoint_path=checkpoint_path,
        summary=summary,
    )


def _write_failure(config: RunConfig, run_dir: Path, message: str) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "status": "failed",
        "run_id": config.run_id,
        "policy": config.scheduler.policy,
        "seed": config.seed,
        "error": message,
    }
    (run_dir / "summary.json").write_text(json.dumps(payload, indent=2) + "\n")


@dataclass
class RefLossRecord:
    phase1: RunRecord
    phase2: RunRecord
    references: np.ndarray

    @property
    def total_optimizer_steps(self) -> int:
        return self.phase1.optimizer_steps + self.phase2.optimizer_steps


def run_refloss(
    config: RunConfig,
    corpora: Mapping[str, tuple[DomainCorpus, DomainCorpus]] | None = None,
) -> RefLossRecord:
    """Two-phase refloss protocol: a full uniform run estimates per-dataset
    reference losses, then a second full run consumes the gaps. Costs twice
    the training compute of a single run."""
    if corpora is None:
        corpora = generate_corpora(config.manifest)
    parent = config.run_dir
    parent.mkdir(parents=True, exist_ok=True)

    phase1_cfg = dataclasses.replace(
        config,
        run_id="phase1-uniform",
        out_dir=str(parent),
        scheduler=dataclasses.replace(config.scheduler, policy="uniform"),
    )
    phase1 = run_training(phase1_cfg, corpora=corpora)
    references = phase1.final_eval_losses
    refs_path = parent / "references.json"
    refs_path.write_text(
        json.dumps(
            {
                "schema_version": SCHEMA_VERSION,
                "source_run": phase1.run_id,
                "losses": {n: float(x) for n, x in zip(phase1.dataset_names, references)},
            },
            indent=2,
        )
        + "\n"
    )

    loaded = load_reference_losses(refs_path, config.manifest.domain_names)
    phase2_cfg = dataclasses.replace(
        config,
        run_id="phase2-refloss",
        out_dir=str(parent),
        scheduler=dataclasses.replace(config.scheduler, policy="refloss"),
    )
    phase2 = run_training(phase2_cfg, corpora=corpora, reference_losses=loaded)

    (parent / "refloss.json").write_text(
        json.dumps(
            {
                "schema_version": SCHEMA_VERSION,
                "run_id": config.run_id,
                "phase1": phase1.run_id,
                "phase2": phase2.run_id,
                "total_optimizer_steps": phase1.optimizer_steps + phase2.optimizer_steps,
            },
            indent=2,
        )
        + "\n"
    )
    return RefLossRecord(phase1=phase1, phase2=phase2, references=loaded)


def load_reference_losses(path: str | Path, dataset_names: Sequence[str]) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise DataError(
            f"reference losses not found at {p}; run the uniform phase first "
            "(two-phase refloss protocol)"
        )
    raw = json.loads(p.read_text())
    losses = raw.get("losses", {})
    missing = [n for n in dataset_names if n not in losses]
    if missing:
        raise DataError(f"reference losses missing datasets {missing} in {p}")
    return np.asarray([losses[n] for n in dataset_names], dtype=np.float64)


# --- sweeps -------------------------------------------------------------------


def _run_cell(raw_config_json: str) -> dict:
    """Worker entry point; must be picklable for process pools."""
    raw = json.loads(raw_config_json)
    try:
        config = resolve_run_config(raw)
        record = run_training(config)
        return record.summary
    except MoeMixError as exc:
        return {
            "schema_version": SCHEMA_VERSION,
            "status": "failed",
            "run_id": raw.get("run_id", ""),
            "policy": raw.get("scheduler", {}).get("policy", ""),
            "seed": raw.get("seed", ""),
            "interval": raw.get("scheduler", {}).get("interval", ""),
            "error": str(exc),
        }


def run_sweep(
    raw_config: dict,
    policies: Sequence[str],
    seeds: Sequence[int],
    intervals: Sequence[int],
    out_dir: str | Path,
    jobs: int = 1,
) -> list[dict]:
    """Cross product of (policy, seed, interval) runs over shared corpora.

    Each cell is an independent run with its own output directory; a failing
    cell is recorded as failed without aborting the rest. Returns the cell
    summaries in grid order and writes sweep_results.{csv,json}.
    """
    if not policies or not seeds or not intervals:
        raise ConfigurationError("sweep needs non-empty policies, seeds, and intervals")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    cell_payloads = []
    for policy in policies:
        for seed in seeds:
            for interval in intervals:
                raw = json.loads(json.dumps(raw_config))  # deep copy
                raw.setdefault("scheduler", {})
                raw["scheduler"]["policy"] = policy
                raw["scheduler"]["interval"] = interval
                raw["seed"] = int(seed)
                raw["run_id"] = f"{policy}-m{interval}-s{seed}"
                raw["out_dir"] = str(out)
                cell_payloads.append(json.dumps(raw))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cell_payloads))
    else:
        results = [_run_cell(payload) for payload in cell_payloads]

    (out / "sweep_results.json").write_text(
        json.dumps({"schema_version": SCHEMA_VERSION, "cells": results}, indent=2) + "\n"
    )
    fields = (
        "run_id",
        "policy",
        "seed",
        "interval",
        "status",
        "macro_avg_loss",
        "mean_total_variation",
    )
    with open(out / "sweep_results.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for cell in results:
            writer.writerow(
                [
                    cell.get("run_id", ""),
                    cell.get("policy", ""),
                    cell.get("seed", ""),
                    cell.get("interval", ""),
                    cell.get("status", ""),
                    cell.get("macro_avg_loss", ""),
                    cell.get("oscillation", {}).get("mean_total_variation", ""),
                ]
            )
    return results


# --- configuration files -------------------------------------------------------


def default_run_dict() -> dict:
    """The documented config-file schema with desk-scale defaults."""
    return {
        "schema_version": SCHEMA_VERSION,
        "run_id": None,
        "seed": 0,
        "out_dir": "runs",
        "model": {
            "vocab_size": 64,
            "embed_dim": 16,
            "num_experts": 4,
            "top_k": 2,
            "expert_hidden_dim": 32,
            "num_moe_layers": 1,
            "gate_noise_std": 0.1,
            "balance_loss_coeff": 0.1,
            "freeze_gate": True,
            "seed": None,
        },
        "scheduler": {
            "policy": "dynamic",
            "eta": 10.0,
            "smoothing": 0.05,
            "interval": 100,
            "initial_weights": "uniform",
            "seed": None,
            "random_noise_scale": None,
            "static_distances": False,
            "final_weights": None,
        },
        "train": {
            "total_steps": 2000,
            "batch_size": 32,
            "peak_lr": 5e-3,
            "warmup_frac": 0.03,
            "min_lr": 0.0,
            "weight_decay": 0.0,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
            "eval_every": None,
        },
        "data": {
            "manifest": "default",
            "probe_batch_size": 256,
        },
    }


def apply_overrides(raw: dict, overrides: Mapping[str, object]) -> dict:
    """Apply dotted-key overrides (e.g. scheduler.policy=uniform) onto a config dict."""
    out = json.loads(json.dumps(raw))
    for dotted, value in overrides.items():
        keys = dotted.split(".")
        node = out
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                node[key] = {}
            node = node[key]
        node[keys[-1]] = value
    return out


def parse_override_value(text: str) -> object:
    """Interpret an override value as JSON if possible, else a bare string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _manifest_from_raw(spec, base_dir: Path | None) -> CorpusManifest:
    if spec == "default" or spec is None:
        return default_manifest()
    if isinstance(spec, str):
        path = Path(spec)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return read_manifest(path)
    if isinstance(spec, Mapping):
        return CorpusManifest.from_dict(spec)
    raise ConfigurationError(f"unsupported manifest spec: {spec!r}")


def resolve_run_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    """Turn a config dict (file contents plus overrides) into a RunConfig.

    Unset model/scheduler seeds are derived from the run seed so that one
    --seed flag re-seeds the whole run deterministically.
    """
    raw = json.loads(json.dumps(raw))
    seed = int(raw.get("seed", 0))
    model_raw = dict(default_run_dict()["model"], **raw.get("model", {}))
    sched_raw = dict(default_run_dict()["scheduler"], **raw.get("scheduler", {}))
    train_raw = dict(default_run_dict()["train"], **raw.get("train", {}))
    data_raw = dict(default_run_dict()["data"], **raw.get("data", {}))

    if model_raw.get("seed") is None:
        model_raw["seed"] = _derived_seed(seed, _STREAM_MODEL)
    if sched_raw.get("seed") is None:
        sched_raw["seed"] = _derived_seed(seed, _STREAM_POLICY)
    if sched_raw.get("initial_weights") is None:
        sched_raw["initial_weights"] = "uniform"
    if isinstance(sched_raw.get("initial_weights"), list):
        sched_raw["initial_weights"] = tuple(sched_raw["initial_weights"])
    if isinstance(sched_raw.get("final_weights"), list):
        sched_raw["final_weights"] = tuple(sched_raw["final_weights"])
    if sched_raw.get("random_noise_scale") is None:
        sched_raw.pop("random_noise_scale", None)

    manifest = _manifest_from_raw(data_raw.get("manifest", "default"), base_dir)
    try:
        model = MoEConfig(**model_raw)
        scheduler = SchedulerConfig(**sched_raw)
        train = TrainConfig(**train_raw)
    except TypeError as exc:
        raise ConfigurationError(f"unknown config field: {exc}") from exc

    run_id = raw.get("run_id") or (
        f"{scheduler.policy}-m{scheduler.interval}-s{seed}"
    )
    return RunConfig(
        run_id=run_id,
        seed=seed,
        out_dir=str(raw.get("out_dir", "runs")),
        model=model,
        scheduler=scheduler,
        train=train,
        manifest=manifest,
        probe_batch_size=int(data_raw.get("probe_batch_size", 256)),
    )


def _write_config(config: RunConfig, path: Path) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "run_id": config.run_id,
        "seed": config.seed,
        "out_dir": config.out_dir,
        "model": config.model.to_dict(),
        "scheduler": {
            "policy": config.scheduler.policy,
            "eta": config.scheduler.eta,
            "smoothing": config.scheduler.smoothing,
            "interval": config.scheduler.interval,
            "initial_weights": list(config.scheduler.initial_weights)
            if not isinstance(config.scheduler.initial_weights, str)
            else config.scheduler.initial_weights,
            "seed": config.scheduler.seed,
            "random_noise_scale": config.scheduler.random_noise_scale,
            "static_distances": config.scheduler.static_distances,
            "final_weights": None
            if config.scheduler.final_weights is None
            else list(config.scheduler.final_weights),
        },
        "train": dataclasses.asdict(config.train),
        "data": {
            "manifest": config.manifest.to_dict(),
            "probe_batch_size": config.probe_batch_size,
        },
    }
    path.write_text(json.dumps(payload, indent=2) + "\n")


def make_scripted_policy(record: RunRecord) -> ScriptedPolicy:
    """Policy that replays a finished run's logged weight trajectory."""
    return ScriptedPolicy([record.initial_weights] + [r.weights for r in record.rounds])
