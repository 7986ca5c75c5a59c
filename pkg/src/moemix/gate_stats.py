"""Per-dataset gate loads and the distance quantities driving the scheduler.

A probe pass runs each dataset's held-out split through the network in
evaluation mode and counts, at the chosen MoE layer (the last by default,
where expert specialization is strongest), how many tokens each expert
received. Rows are normalized to unit sum so datasets with different probe
sizes are comparable, and the scheduler consumes the per-dataset average of
pairwise Euclidean distances between those normalized rows.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DataError
from .moe_core import BatchStats, MoENetwork, routing_stats
from .synth_data import DomainCorpus, pad_sequences


@dataclass(frozen=True)
class GateLoadMatrix:
    """Integer token counts per (dataset, expert) at one MoE layer."""

    counts: np.ndarray            # [datasets, experts] int64
    probe_token_counts: np.ndarray  # [datasets] int64, non-pad tokens probed
    dataset_names: tuple[str, ...]

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        tokens = np.asarray(self.probe_token_counts, dtype=np.int64)
        if counts.ndim != 2 or tokens.shape != (counts.shape[0],):
            raise ConfigurationError("gate-load matrix shapes are inconsistent")
        if len(self.dataset_names) != counts.shape[0]:
            raise ConfigurationError("dataset names do not match matrix rows")
        if np.any(counts < 0):
            raise ConfigurationError("gate loads cannot be negative")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "probe_token_counts", tokens)
        object.__setattr__(self, "dataset_names", tuple(self.dataset_names))


@dataclass(frozen=True)
class NormalizedGateLoads:
    rows: np.ndarray  # [datasets, experts], each row sums to 1
    dataset_names: tuple[str, ...]


@dataclass(frozen=True)
class DistanceSummary:
    """Pairwise L2 distances and their per-dataset average.

    The average divides by the number of datasets, self-distance (zero)
    included.
    """

    pairwise: np.ndarray  # [datasets, datasets], symmetric, zero diagonal
    averaged: np.ndarray  # [datasets]
    dataset_names: tuple[str, ...]


def probe_gate_loads(
    network: MoENetwork,
    probe_sets: Mapping[str, DomainCorpus] | Sequence[DomainCorpus],
    layer: int | None = None,
    batch_size: int = 256,
    workers: int | None = None,
) -> GateLoadMatrix:
    """Accumulate gate loads over every non-pad token of each probe set.

    Runs in evaluation mode (no gate noise) and never mutates the network.
    Datasets may be probed on worker threads; each dataset's accumulation is
    sequential and results merge by dataset index.
    """
    if isinstance(probe_sets, Mapping):
        items = list(probe_sets.items())
    else:
        items = [(c.domain, c) for c in probe_sets]
    if not items:
        raise DataError("no probe sets given")
    cfg = network.config
    probe_layer = cfg.num_moe_layers - 1 if layer is None else layer
    if not (0 <= probe_layer < cfg.num_moe_layers):
        raise ConfigurationError(f"probe layer {probe_layer} out of range")

    def probe_one(name: str, corpus: DomainCorpus) -> BatchStats:
        if len(corpus) == 0:
            raise DataError(f"probe set for dataset {name!r} is empty")
        acc = BatchStats.zero(cfg.num_experts)
        for start in range(0, len(corpus), batch_size):
            chunk = corpus.sequences[start : start + batch_size]
            stats = routing_stats(network, pad_sequences(chunk))
            acc = acc + stats[probe_layer]
        return acc

    if workers is not None and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_dataset = list(pool.map(lambda kv: probe_one(*kv), items))
    else:
        per_dataset = [probe_one(name, corpus) for name, corpus in items]

    counts = np.stack([s.load for s in per_dataset])
    tokens = np.asarray([s.token_count for s in per_dataset], dtype=np.int64)
    return GateLoadMatrix(counts, tokens, tuple(name for name, _ in items))


def normalize_rows(loads: GateLoadMatrix) -> NormalizedGateLoads:
    """Divide each dataset's count row by its own sum."""
    sums = loads.counts.sum(axis=1)
    for i, s in enumerate(sums):
        if s <= 0:
            raise DataError(
                f"dataset {loads.dataset_names[i]!r} has an all-zero gate-load row "
                "(empty probe)"
            )
    return NormalizedGateLoads(
        loads.counts.astype(np.float64) / sums[:, None].astype(np.float64),
        loads.dataset_names,
    )


def _pairwise_summary(rows: np.ndarray, names: tuple[str, ...]) -> DistanceSummary:
    diff = rows[:, None, :] - rows[None, :, :]
    pairwise = np.sqrt((diff ** 2).sum(axis=2))
    averaged = pairwise.sum(axis=1) / rows.shape[0]
    return DistanceSummary(pairwise, averaged, names)


def distance_summary(normalized: NormalizedGateLoads) -> DistanceSummary:
    """Pairwise Euclidean distances between normalized gate-load rows."""
    return _pairwise_summary(np.asarray(normalized.rows, dtype=np.float64),
                             normalized.dataset_names)


def embedding_distance_summary(
    embeddings: np.ndarray,
    dataset_names: Sequence[str] | None = None,
) -> DistanceSummary:
    """Same distance arithmetic applied to corpus-embedding rows."""
    rows = np.asarray(embeddings, dtype=np.float64)
    if rows.ndim != 2:
        raise ConfigurationError("embeddings must be a [datasets, features] matrix")
    if np.any(rows < 0) or not np.all(np.isfinite(rows)):
        raise ConfigurationError("embeddings must be finite and non-negative")
    sums = rows.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ConfigurationError("embedding rows must sum to 1")
    names = tuple(dataset_names) if dataset_names is not None else tuple(
        str(i) for i in range(rows.shape[0])
    )
    if len(names) != rows.shape[0]:
        raise ConfigurationError("dataset names do not match embedding rows")
    return _pairwise_summary(rows, names)


# --- trace export / import ---------------------------------------------------

GATELOAD_CSV_FIELDS = ("round", "dataset_name", "expert", "count")


def write_gateload_trace(
    records: Sequence[tuple[int, GateLoadMatrix]], path: str | Path
) -> None:
    """One CSV row per (round, dataset, expert, count)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GATELOAD_CSV_FIELDS)
        for round_index, loads in records:
            for i, name in enumerate(loads.dataset_names):
                for e in range(loads.counts.shape[1]):
                    writer.writerow([round_index, name, e, int(loads.counts[i, e])])


def read_gateload_trace(path: str | Path) -> list[tuple[int, GateLoadMatrix]]:
    """Parse a gate-load trace, validating shape and round contiguity.

    Traces do not record probe token counts, so the loaded matrices carry raw
    row sums in that slot; row normalization, the only replay consumer, does
    not depend on them.
    """
    p = Path(path)
    if not p.exists():
        raise DataError(f"gate-load trace not found: {p}")
    by_round: dict[int, dict[str, dict[int, int]]] = {}
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != GATELOAD_CSV_FIELDS:
            raise DataError(f"{p}:1: expected header {','.join(GATELOAD_CSV_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rnd = int(row[0])
                name = row[1]
                expert = int(row[2])
                count = int(row[3])
                if count < 0 or expert < 0:
                    raise ValueError("negative value")
            except (ValueError, IndexError) as exc:
                raise DataError(f"{p}:{lineno}: malformed trace row {row!r}: {exc}") from exc
            by_round.setdefault(rnd, {}).setdefault(name, {})[expert] = count
    if not by_round:
        raise DataError(f"{p}: trace contains no rounds")
    rounds = sorted(by_round)
    if rounds != list(range(rounds[0], rounds[0] + len(rounds))):
        raise DataError(f"{p}: rounds are not contiguous: {rounds}")
    first = by_round[rounds[0]]
    names = tuple(first.keys())
    num_experts = len(next(iter(first.values())))
    out = []
    for rnd in rounds:
        data = by_round[rnd]
        if tuple(data.keys()) != names:
            raise DataError(f"{p}: round {rnd} datasets differ from round {rounds[0]}")
        counts = np.zeros((len(names), num_experts), dtype=np.int64)
        for i, name in enumerate(names):
            experts = data[name]
            if sorted(experts) != list(range(num_experts)):
                raise DataError(
                    f"{p}: round {rnd} dataset {name!r} has a ragged expert set"
                )
            for e, c in experts.items():
                counts[i, e] = c
        out.append((rnd, GateLoadMatrix(counts, counts.sum(axis=1), names)))
    return out


def distances_to_json(
    records: Sequence[tuple[int, DistanceSummary]], path: str | Path
) -> None:
    """Distance summaries keyed by round index."""
    payload = {
        "schema_version": 1,
        "rounds": {
            str(rnd): {
                "dataset_names": list(summary.dataset_names),
                "pairwise": summary.pairwise.tolist(),
                "averaged": summary.averaged.tolist(),
            }
            for rnd, summary in records
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
