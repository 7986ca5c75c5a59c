"""Seeded multi-domain Markov corpora with controllable inter-domain redundancy.

Each domain is an order-1 or order-2 Markov chain over the non-pad vocabulary.
Redundancy between two domains is engineered by blending one domain's
transition matrix toward another's (convex combination; blend weight 1 copies
the partner's distribution exactly). Train and probe splits come from distinct
seed substreams, so the probe split is held out by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DataError
from .scheduler import SamplingWeights

PAD_ID = 0

MANIFEST_SCHEMA_VERSION = 1

# Substream tags so matrix construction, train sampling, and probe sampling
# never share an RNG stream.
_STREAM_MATRIX = 0
_STREAM_TRAIN = 1
_STREAM_PROBE = 2


@dataclass(frozen=True)
class DomainSpec:
    name: str
    markov_order: int = 1
    transition_seed: int = 0
    concentration: float = 0.5
    blend: tuple[str, float] | None = None
    length_range: tuple[int, int] = (16, 64)
    train_size: int = 4096
    probe_size: int = 512

    def __post_init__(self) -> None:
        if not self.name:
            raise ConfigurationError("domain name must be non-empty")
        if self.markov_order not in (1, 2):
            raise ConfigurationError(f"markov_order must be 1 or 2, got {self.markov_order}")
        if not self.concentration > 0:
            raise ConfigurationError("concentration must be positive")
        if self.blend is not None:
            partner, lam = self.blend
            if not (0.0 <= lam <= 1.0):
                raise ConfigurationError(f"blend weight must be in [0, 1], got {lam}")
            object.__setattr__(self, "blend", (str(partner), float(lam)))
        lo, hi = self.length_range
        if not (1 <= lo <= hi):
            raise ConfigurationError(f"bad length range {self.length_range}")
        object.__setattr__(self, "length_range", (int(lo), int(hi)))
        if self.train_size < 1 or self.probe_size < 1:
            raise ConfigurationError("train_size and probe_size must be >= 1")


@dataclass(frozen=True)
class CorpusManifest:
    vocab_size: int
    seed: int
    domains: tuple[DomainSpec, ...]
    pad_id: int = PAD_ID

    def __post_init__(self) -> None:
        if self.vocab_size < 3:
            raise ConfigurationError("vocab_size must be >= 3 (pad plus at least two tokens)")
        if not (0 <= self.pad_id < self.vocab_size):
            raise ConfigurationError("pad_id must lie inside the vocabulary")
        if self.pad_id != PAD_ID:
            raise ConfigurationError("pad_id is fixed to 0 in this implementation")
        object.__setattr__(self, "domains", tuple(self.domains))
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate domain names: {names}")
        by_name = {d.name: d for d in self.domains}
        for d in self.domains:
            if d.blend is None:
                continue
            partner, _ = d.blend
            if partner not in by_name:
                raise ConfigurationError(
                    f"domain {d.name!r} blends with unknown domain {partner!r}"
                )
            other = by_name[partner]
            if other.blend is not None:
                raise ConfigurationError(
                    f"domain {d.name!r} blends with {partner!r}, which itself blends; "
                    "chained blends are not supported"
                )
            if other.markov_order != d.markov_order:
                raise ConfigurationError(
                    f"blended domains {d.name!r} and {partner!r} must share a markov order"
                )

    @property
    def domain_names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.domains)

    def to_dict(self) -> dict:
        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "vocab_size": self.vocab_size,
            "pad_id": self.pad_id,
            "seed": self.seed,
            "domains": [
                {
                    "name": d.name,
                    "markov_order": d.markov_order,
                    "transition_seed": d.transition_seed,
                    "concentration": d.concentration,
                    "blend": None if d.blend is None else {"with": d.blend[0], "lam": d.blend[1]},
                    "length_range": list(d.length_range),
                    "train_size": d.train_size,
                    "probe_size": d.probe_size,
                }
                for d in self.domains
            ],
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "CorpusManifest":
        try:
            domains = tuple(
                DomainSpec(
                    name=d["name"],
                    markov_order=d.get("markov_order", 1),
                    transition_seed=d.get("transition_seed", 0),
                    concentration=d.get("concentration", 0.5),
                    blend=None
                    if d.get("blend") is None
                    else (d["blend"]["with"], d["blend"]["lam"]),
                    length_range=tuple(d.get("length_range", (16, 64))),
                    train_size=d.get("train_size", 4096),
                    probe_size=d.get("probe_size", 512),
                )
                for d in raw["domains"]
            )
            return cls(
                vocab_size=raw["vocab_size"],
                seed=raw.get("seed", 0),
                domains=domains,
                pad_id=raw.get("pad_id", PAD_ID),
            )
        except KeyError as exc:
            raise ConfigurationError(f"manifest is missing field {exc}") from exc


def default_manifest(seed: int = 1234) -> CorpusManifest:
    """Four domains: A and B heavily blended (redundant pair), C and D independent."""
    return CorpusManifest(
        vocab_size=64,
        seed=seed,
        domains=(
            DomainSpec(name="A", transition_seed=11),
            DomainSpec(name="B", transition_seed=12, blend=("A", 0.9)),
            DomainSpec(name="C", transition_seed=13),
            DomainSpec(name="D", transition_seed=14),
        ),
    )


@dataclass
class DomainCorpus:
    domain: str
    split: str
    sequences: list[np.ndarray]

    def __post_init__(self) -> None:
        if self.split not in ("train", "probe"):
            raise ConfigurationError(f"split must be 'train' or 'probe', got {self.split!r}")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def token_count(self) -> int:
        return sum(int(s.size) for s in self.sequences)


def _rng(manifest: CorpusManifest, spec: DomainSpec, stream: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([manifest.seed, spec.transition_seed, stream])
    )


def build_transition(
    manifest: CorpusManifest, domain_name: str
) -> tuple[np.ndarray, np.ndarray]:
    """Initial distribution and transition matrix for one domain.

    Rows are Dirichlet draws; small concentration gives sharper rows. For an
    order-2 chain the row index is prev2 * n_tokens + prev1. Blended domains
    return the convex combination of their own matrix and the partner's.
    """
    by_name = {d.name: d for d in manifest.domains}
    if domain_name not in by_name:
        raise ConfigurationError(f"unknown domain {domain_name!r}")
    spec = by_name[domain_name]
    n_tokens = manifest.vocab_size - 1
    n_states = n_tokens if spec.markov_order == 1 else n_tokens * n_tokens
    rng = _rng(manifest, spec, _STREAM_MATRIX)
    alpha = np.full(n_tokens, spec.concentration)
    init = rng.dirichlet(alpha)
    trans = rng.dirichlet(alpha, size=n_states)
    if spec.blend is not None:
        partner, lam = spec.blend
        p_init, p_trans = build_transition(manifest, partner)
        init = (1.0 - lam) * init + lam * p_init
        trans = (1.0 - lam) * trans + lam * p_trans
    return init, trans


def _sample_sequences(
    init: np.ndarray,
    trans: np.ndarray,
    order: int,
    lengths: np.ndarray,
    rng: np.random.Generator,
    n_tokens: int,
) -> list[np.ndarray]:
    """Sample all sequences of a split column by column (states advance in lockstep)."""
    n = lengths.size
    max_len = int(lengths.max())
    out = np.zeros((n, max_len), dtype=np.int64)
    cum_init = np.cumsum(init)
    cum_trans = np.cumsum(trans, axis=1)

    def draw(cum_rows: np.ndarray, k: int) -> np.ndarray:
        u = rng.random(k)
        if cum_rows.ndim == 1:
            idx = np.searchsorted(cum_rows, u, side="right")
        else:
            idx = (cum_rows < u[:, None]).sum(axis=1)
        return np.minimum(idx, n_tokens - 1)

    out[:, 0] = draw(cum_init, n)
    start = 1
    if order == 2 and max_len > 1:
        # The second token also comes from the initial distribution; order-2
        # transitions need two tokens of context.
        out[:, 1] = draw(cum_init, n)
        start = 2
    for col in range(start, max_len):
        active = np.nonzero(lengths > col)[0]
        if active.size == 0:
            break
        if order == 1:
            state = out[active, col - 1]
        else:
            state = out[active, col - 2] * n_tokens + out[active, col - 1]
        out[active, col] = draw(cum_trans[state], active.size)
    # Shift by one so token ids never collide with the pad id.
    return [out[i, : lengths[i]] + 1 for i in range(n)]


def generate_corpus(
    manifest: CorpusManifest, domain_name: str
) -> tuple[DomainCorpus, DomainCorpus]:
    """Generate the (train, probe) splits of one domain, bit-reproducibly."""
    by_name = {d.name: d for d in manifest.domains}
    if domain_name not in by_name:
        raise ConfigurationError(f"unknown domain {domain_name!r}")
    spec = by_name[domain_name]
    init, trans = build_transition(manifest, domain_name)
    n_tokens = manifest.vocab_size - 1
    lo, hi = spec.length_range
    splits = []
    for split, size, stream in (
        ("train", spec.train_size, _STREAM_TRAIN),
        ("probe", spec.probe_size, _STREAM_PROBE),
    ):
        rng = _rng(manifest, spec, stream)
        lengths = rng.integers(lo, hi + 1, size=size)
        seqs = _sample_sequences(init, trans, spec.markov_order, lengths, rng, n_tokens)
        splits.append(DomainCorpus(domain=spec.name, split=split, sequences=seqs))
    return splits[0], splits[1]


def generate_corpora(
    manifest: CorpusManifest,
) -> dict[str, tuple[DomainCorpus, DomainCorpus]]:
    """All domains' (train, probe) splits, keyed by name in manifest order."""
    return {d.name: generate_corpus(manifest, d.name) for d in manifest.domains}


@dataclass
class Batch:
    tokens: np.ndarray  # [batch, max_len], right-padded with PAD_ID
    domain_labels: np.ndarray  # [batch] index into the manifest's domain order


def pad_sequences(sequences: Sequence[np.ndarray], pad_id: int = PAD_ID) -> np.ndarray:
    if not sequences:
        raise DataError("cannot pad an empty list of sequences")
    max_len = max(int(s.size) for s in sequences)
    out = np.full((len(sequences), max_len), pad_id, dtype=np.int64)
    for i, s in enumerate(sequences):
        out[i, : s.size] = s
    return out


def sample_batch(
    weights: SamplingWeights,
    train_corpora: Sequence[DomainCorpus],
    batch_size: int,
    rng: np.random.Generator,
) -> Batch:
    """Draw each example's domain i.i.d. from the sampling weights, then an
    example uniformly with replacement from that domain's train split."""
    if len(train_corpora) != weights.num_datasets:
        raise ConfigurationError("weights and corpora disagree on the number of datasets")
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    for c in train_corpora:
        if len(c) == 0:
            raise DataError(f"domain {c.domain!r} has an empty train split")
    labels = rng.choice(weights.num_datasets, size=batch_size, p=weights.w)
    u = rng.random(batch_size)
    seqs = []
    for i in range(batch_size):
        corpus = train_corpora[labels[i]]
        seqs.append(corpus.sequences[int(u[i] * len(corpus))])
    return Batch(tokens=pad_sequences(seqs), domain_labels=labels.astype(np.int64))


def dataset_embedding(
    corpus: DomainCorpus,
    vocab_size: int,
    hash_width: int | None = None,
) -> np.ndarray:
    """Unit-sum unigram+bigram frequency vector of a corpus.

    The bigram block is optionally folded into `hash_width` buckets; without
    hashing the vector has dimension vocab_size + vocab_size**2.
    """
    if len(corpus) == 0 or corpus.token_count == 0:
        raise DataError(f"cannot embed empty corpus {corpus.domain!r}/{corpus.split}")
    if hash_width is not None and hash_width < 1:
        raise ConfigurationError("hash_width must be >= 1")
    uni = np.zeros(vocab_size, dtype=np.float64)
    bi_width = hash_width if hash_width is not None else vocab_size * vocab_size
    bi = np.zeros(bi_width, dtype=np.float64)
    for seq in corpus.sequences:
        np.add.at(uni, seq, 1.0)
        if seq.size >= 2:
            pair_idx = seq[:-1] * vocab_size + seq[1:]
            if hash_width is not None:
                pair_idx = pair_idx % hash_width
            np.add.at(bi, pair_idx, 1.0)
    vec = np.concatenate([uni, bi])
    return vec / vec.sum()


def corpus_embeddings(
    probe_corpora: Sequence[DomainCorpus],
    vocab_size: int,
    hash_width: int | None = None,
) -> np.ndarray:
    """Stack per-domain embeddings into a |D| x F matrix."""
    return np.stack(
        [dataset_embedding(c, vocab_size, hash_width) for c in probe_corpora]
    )


# --- persistence ------------------------------------------------------------


def write_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")


def read_manifest(path: str | Path) -> CorpusManifest:
    p = Path(path)
    if not p.exists():
        raise DataError(f"manifest not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {p} is not valid JSON: {exc}") from exc
    return CorpusManifest.from_dict(raw)


def write_corpora(
    corpora: Mapping[str, tuple[DomainCorpus, DomainCorpus]],
    path: str | Path,
) -> None:
    """Newline-delimited records: {domain, split, tokens}."""
    with open(path, "w") as fh:
        for train, probe in corpora.values():
            for corpus in (train, probe):
                for seq in corpus.sequences:
                    fh.write(
                        json.dumps(
                            {
                                "domain": corpus.domain,
                                "split": corpus.split,
                                "tokens": seq.tolist(),
                            }
                        )
                        + "\n"
                    )


def read_corpora(
    path: str | Path, manifest: CorpusManifest
) -> dict[str, tuple[DomainCorpus, DomainCorpus]]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"corpus file not found: {p}")
    buckets: dict[tuple[str, str], list[np.ndarray]] = {}
    with open(p) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key = (rec["domain"], rec["split"])
                tokens = np.asarray(rec["tokens"], dtype=np.int64)
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{p}:{lineno}: malformed corpus record: {exc}") from exc
            buckets.setdefault(key, []).append(tokens)
    out = {}
    for d in manifest.domains:
        train = buckets.get((d.name, "train"))
        probe = buckets.get((d.name, "probe"))
        if not train or not probe:
            raise DataError(f"corpus file {p} is missing splits for domain {d.name!r}")
        out[d.name] = (
            DomainCorpus(d.name, "train", train),
            DomainCorpus(d.name, "probe", probe),
        )
    return out
