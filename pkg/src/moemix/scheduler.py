"""Sampling-weight scheduling over a probability simplex of datasets.

The dynamic policy performs an exponentiated-gradient style update driven by
averaged gate-load distances: datasets that look different from the rest get
more sampling mass in the next round. Every baseline policy (uniform,
datasize, random, sequential, refloss, inverse, embedding-driven) sits behind
the same small policy interface so the training loop and the replay tool can
treat them interchangeably.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError

POLICIES = (
    "uniform",
    "datasize",
    "random",
    "sequential",
    "refloss",
    "dynamic",
    "dynamic_sentemb",
    "inverse",
    "final_static",
)

# Policies whose update is driven by a distance/gap signal rather than a clock.
SIGNAL_POLICIES = ("dynamic", "dynamic_sentemb", "inverse", "refloss")

_SIMPLEX_INPUT_ATOL = 1e-6


def as_simplex(values: Sequence[float] | np.ndarray, *, what: str = "weights") -> np.ndarray:
    """Validate a vector as a probability simplex and renormalize float drift."""
    w = np.asarray(values, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ConfigurationError(f"{what} must be a non-empty 1-D vector, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ConfigurationError(f"{what} contain non-finite entries")
    if np.any(w < 0):
        raise ConfigurationError(f"{what} contain negative entries: {w.tolist()}")
    total = float(w.sum())
    if abs(total - 1.0) > _SIMPLEX_INPUT_ATOL:
        raise ConfigurationError(f"{what} must sum to 1, got {total!r}")
    return w / total


@dataclass(frozen=True)
class SamplingWeights:
    """A point on the dataset simplex together with its round index."""

    w: np.ndarray
    round_index: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "w", as_simplex(self.w, what="sampling weights"))

    @property
    def num_datasets(self) -> int:
        return int(self.w.size)

    @classmethod
    def uniform(cls, num_datasets: int, round_index: int = 0) -> "SamplingWeights":
        if num_datasets < 1:
            raise ConfigurationError("need at least one dataset")
        return cls(np.full(num_datasets, 1.0 / num_datasets), round_index)


@dataclass(frozen=True)
class LossGap:
    """Per-dataset current and reference losses for the refloss baseline."""

    current: np.ndarray
    reference: np.ndarray

    def __post_init__(self) -> None:
        cur = np.asarray(self.current, dtype=np.float64)
        ref = np.asarray(self.reference, dtype=np.float64)
        if cur.shape != ref.shape or cur.ndim != 1:
            raise ConfigurationError("current and reference losses must be 1-D and same length")
        if not (np.all(np.isfinite(cur)) and np.all(np.isfinite(ref))):
            raise ConfigurationError("losses must be finite")
        object.__setattr__(self, "current", cur)
        object.__setattr__(self, "reference", ref)

    @property
    def gaps(self) -> np.ndarray:
        return self.current - self.reference


@dataclass(frozen=True)
class SchedulerConfig:
    policy: str = "dynamic"
    eta: float = 10.0
    smoothing: float = 0.05
    interval: int = 100
    initial_weights: str | tuple[float, ...] = "uniform"
    seed: int = 0
    # Amplitude of the random baseline's per-coordinate noise; None means 0.5/|D|.
    random_noise_scale: float | None = None
    # Freeze the first round's distance signal for the rest of the run
    # (static-distances variant of the gate-load policy).
    static_distances: bool = False
    # Constant weights for the final_static policy.
    final_weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigurationError(
                f"unknown policy {self.policy!r}; expected one of {', '.join(POLICIES)}"
            )
        if not self.eta > 0:
            raise ConfigurationError(f"eta must be positive, got {self.eta}")
        if not (0.0 <= self.smoothing < 1.0):
            raise ConfigurationError(f"smoothing must be in [0, 1), got {self.smoothing}")
        if self.interval < 1:
            raise ConfigurationError(f"interval must be >= 1, got {self.interval}")
        if self.random_noise_scale is not None and self.random_noise_scale < 0:
            raise ConfigurationError("random_noise_scale must be non-negative")
        if isinstance(self.initial_weights, str):
            if self.initial_weights != "uniform":
                raise ConfigurationError(
                    f"initial_weights must be 'uniform' or a simplex, got {self.initial_weights!r}"
                )
        else:
            object.__setattr__(self, "initial_weights", tuple(float(x) for x in self.initial_weights))
        if self.final_weights is not None:
            object.__setattr__(self, "final_weights", tuple(float(x) for x in self.final_weights))


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def dynamic_update(
    w_prev: SamplingWeights,
    distances: np.ndarray | Sequence[float],
    eta: float,
    smoothing: float,
) -> SamplingWeights:
    """One multiplicative-weights round on the dataset simplex.

    New weights are softmax(log w + eta * distances), pulled toward uniform by
    mixing in `smoothing` mass and renormalized. Larger averaged distance
    (less redundancy with the other datasets) means more sampling mass.
    """
    delta = np.asarray(distances, dtype=np.float64)
    if delta.shape != w_prev.w.shape:
        raise ConfigurationError(
            f"distance vector has shape {delta.shape}, weights have {w_prev.w.shape}"
        )
    if not np.all(np.isfinite(delta)):
        raise ConfigurationError("distance vector contains non-finite entries")
    if not eta > 0:
        raise ConfigurationError(f"eta must be positive, got {eta}")
    if not (0.0 <= smoothing < 1.0):
        raise ConfigurationError(f"smoothing must be in [0, 1), got {smoothing}")
    if np.any(w_prev.w <= 0):
        raise ConfigurationError(
            "previous weights must be strictly positive (log is taken); "
            "a smoothing value > 0 keeps them positive"
        )
    n = w_prev.num_datasets
    alpha = _stable_softmax(np.log(w_prev.w) + eta * delta)
    mixed = (1.0 - smoothing) * alpha + smoothing / n
    # The sum is already 1 up to float drift; renormalize anyway to absorb it.
    mixed = mixed / mixed.sum()
    return SamplingWeights(mixed, w_prev.round_index + 1)


def refloss_update(
    w_prev: SamplingWeights,
    gaps: LossGap,
    eta: float,
    smoothing: float,
) -> SamplingWeights:
    """Dynamic update with (current - reference) loss gaps as the signal."""
    return dynamic_update(w_prev, gaps.gaps, eta, smoothing)


def inverse_update(
    w_prev: SamplingWeights,
    distances: np.ndarray | Sequence[float],
    eta: float,
    smoothing: float,
) -> SamplingWeights:
    """Counter-hypothesis update: similar datasets gain mass instead."""
    delta = np.asarray(distances, dtype=np.float64)
    return dynamic_update(w_prev, -delta, eta, smoothing)


def uniform_weights(num_datasets: int, round_index: int = 0) -> SamplingWeights:
    return SamplingWeights.uniform(num_datasets, round_index)


def datasize_weights(sizes: Sequence[int], round_index: int = 0) -> SamplingWeights:
    arr = np.asarray(sizes, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0 or np.any(arr <= 0):
        raise ConfigurationError(f"dataset sizes must be positive, got {list(sizes)}")
    return SamplingWeights(arr / arr.sum(), round_index)


def sequential_weights(round_index: int, num_datasets: int) -> SamplingWeights:
    """One-hot weights cycling through datasets in registry order."""
    if num_datasets < 1:
        raise ConfigurationError("need at least one dataset")
    w = np.zeros(num_datasets)
    w[round_index % num_datasets] = 1.0
    return SamplingWeights(w, round_index)


def random_weights(
    num_datasets: int,
    rng: np.random.Generator,
    noise_scale: float | None = None,
    round_index: int = 0,
) -> SamplingWeights:
    """Uniform base plus i.i.d. uniform noise in [0, noise_scale], renormalized."""
    if noise_scale is None:
        noise_scale = 0.5 / num_datasets
    base = np.full(num_datasets, 1.0 / num_datasets)
    noisy = np.clip(base + rng.uniform(0.0, noise_scale, size=num_datasets), 0.0, None)
    return SamplingWeights(noisy / noisy.sum(), round_index)


@dataclass
class RoundSignals:
    """Everything a policy may consume at a round boundary.

    Distance vectors are the averaged pairwise L2 distances of the dataset
    representations (gate loads or corpus embeddings); loss vectors are
    per-dataset held-out evaluation losses.
    """

    gate_distances: np.ndarray | None = None
    embedding_distances: np.ndarray | None = None
    current_losses: np.ndarray | None = None
    reference_losses: np.ndarray | None = None


class SamplingPolicy:
    """Produces initial weights and one update per round boundary."""

    name: str = "base"

    def __init__(self, num_datasets: int):
        if num_datasets < 1:
            raise ConfigurationError("need at least one dataset")
        self.num_datasets = num_datasets

    def initial(self) -> SamplingWeights:
        raise NotImplementedError

    def update(
        self, prev: SamplingWeights, signals: RoundSignals
    ) -> tuple[SamplingWeights, np.ndarray]:
        """Return (new weights, the signal vector that drove the update)."""
        raise NotImplementedError

    def _zeros(self) -> np.ndarray:
        return np.zeros(self.num_datasets)


class StaticPolicy(SamplingPolicy):
    """Constant weights every round: uniform, datasize, or a supplied simplex."""

    def __init__(self, num_datasets: int, weights: SamplingWeights, name: str):
        super().__init__(num_datasets)
        self.name = name
        self._weights = weights.w

    def initial(self) -> SamplingWeights:
        return SamplingWeights(self._weights, 0)

    def update(self, prev, signals):
        return SamplingWeights(self._weights, prev.round_index + 1), self._zeros()


class RandomPolicy(SamplingPolicy):
    name = "random"

    def __init__(self, num_datasets: int, seed: int, noise_scale: float | None = None):
        super().__init__(num_datasets)
        self._rng = np.random.default_rng(seed)
        self._noise_scale = noise_scale

    def initial(self) -> SamplingWeights:
        return random_weights(self.num_datasets, self._rng, self._noise_scale, 0)

    def update(self, prev, signals):
        w = random_weights(self.num_datasets, self._rng, self._noise_scale, prev.round_index + 1)
        return w, self._zeros()


class SequentialPolicy(SamplingPolicy):
    name = "sequential"

    def initial(self) -> SamplingWeights:
        return sequential_weights(0, self.num_datasets)

    def update(self, prev, signals):
        return sequential_weights(prev.round_index + 1, self.num_datasets), self._zeros()


class _ExponentiatedPolicy(SamplingPolicy):
    """Shared machinery for the distance/gap driven policies."""

    def __init__(
        self,
        num_datasets: int,
        eta: float,
        smoothing: float,
        initial_weights: np.ndarray | None = None,
        static_distances: bool = False,
    ):
        super().__init__(num_datasets)
        self.eta = eta
        self.smoothing = smoothing
        self._initial = (
            np.full(num_datasets, 1.0 / num_datasets)
            if initial_weights is None
            else as_simplex(initial_weights, what="initial weights")
        )
        self._static_distances = static_distances
        self._frozen_signal: np.ndarray | None = None
        if num_datasets == 2:
            warnings.warn(
                "with exactly two datasets the averaged distances are equal by "
                "symmetry, so this policy cannot change the weights",
                stacklevel=3,
            )

    def initial(self) -> SamplingWeights:
        return SamplingWeights(self._initial, 0)

    def _signal(self, signals: RoundSignals) -> np.ndarray:
        raise NotImplementedError

    def _effective_signal(self, signals: RoundSignals) -> np.ndarray:
        sig = np.asarray(self._signal(signals), dtype=np.float64)
        if self._static_distances:
            if self._frozen_signal is None:
                self._frozen_signal = sig.copy()
            sig = self._frozen_signal
        return sig

    def update(self, prev, signals):
        sig = self._effective_signal(signals)
        return dynamic_update(prev, sig, self.eta, self.smoothing), sig


class DynamicPolicy(_ExponentiatedPolicy):
    name = "dynamic"

    def _signal(self, signals):
        if signals.gate_distances is None:
            raise ConfigurationError("dynamic policy needs gate-load distances")
        return signals.gate_distances


class SentEmbPolicy(_ExponentiatedPolicy):
    """Dynamic update driven by corpus-embedding distances.

    The embeddings do not move during training, so the signal is constant
    across rounds even though the weights keep evolving.
    """

    name = "dynamic_sentemb"

    def _signal(self, signals):
        if signals.embedding_distances is None:
            raise ConfigurationError("dynamic_sentemb policy needs embedding distances")
        return signals.embedding_distances


class InversePolicy(_ExponentiatedPolicy):
    name = "inverse"

    def _signal(self, signals):
        if signals.gate_distances is None:
            raise ConfigurationError("inverse policy needs gate-load distances")
        return -np.asarray(signals.gate_distances, dtype=np.float64)


class RefLossPolicy(_ExponentiatedPolicy):
    name = "refloss"

    def _signal(self, signals):
        if signals.current_losses is None:
            raise ConfigurationError("refloss policy needs per-dataset evaluation losses")
        if signals.reference_losses is None:
            raise ConfigurationError(
                "refloss policy needs reference losses from a completed uniform "
                "run: run the uniform phase first, then pass its final "
                "per-dataset losses as references"
            )
        return LossGap(signals.current_losses, signals.reference_losses).gaps


class ScriptedPolicy(SamplingPolicy):
    """Replays a recorded weight trajectory; used for run reproduction."""

    name = "scripted"

    def __init__(self, trajectory: Sequence[np.ndarray]):
        traj = [as_simplex(w, what="scripted weights") for w in trajectory]
        if not traj:
            raise ConfigurationError("scripted trajectory is empty")
        super().__init__(traj[0].size)
        self._trajectory = traj

    def initial(self) -> SamplingWeights:
        return SamplingWeights(self._trajectory[0], 0)

    def update(self, prev, signals):
        t = prev.round_index + 1
        if t >= len(self._trajectory):
            raise ConfigurationError(
                f"scripted trajectory has {len(self._trajectory)} entries, round {t} requested"
            )
        return SamplingWeights(self._trajectory[t], t), self._zeros()


def make_policy(
    config: SchedulerConfig,
    num_datasets: int,
    dataset_sizes: Sequence[int] | None = None,
) -> SamplingPolicy:
    """Instantiate the policy named in the config."""
    init = None if config.initial_weights == "uniform" else np.asarray(config.initial_weights)
    if config.policy == "uniform":
        return StaticPolicy(num_datasets, uniform_weights(num_datasets), "uniform")
    if config.policy == "datasize":
        if dataset_sizes is None:
            raise ConfigurationError("datasize policy needs dataset sizes")
        return StaticPolicy(num_datasets, datasize_weights(dataset_sizes), "datasize")
    if config.policy == "final_static":
        if config.final_weights is None:
            raise ConfigurationError("final_static policy needs final_weights in the config")
        return StaticPolicy(
            num_datasets,
            SamplingWeights(as_simplex(config.final_weights, what="final_static weights")),
            "final_static",
        )
    if config.policy == "random":
        return RandomPolicy(num_datasets, config.seed, config.random_noise_scale)
    if config.policy == "sequential":
        return SequentialPolicy(num_datasets)
    kwargs = dict(
        eta=config.eta,
        smoothing=config.smoothing,
        initial_weights=init,
        static_distances=config.static_distances,
    )
    if config.policy == "dynamic":
        return DynamicPolicy(num_datasets, **kwargs)
    if config.policy == "dynamic_sentemb":
        return SentEmbPolicy(num_datasets, **kwargs)
    if config.policy == "inverse":
        return InversePolicy(num_datasets, **kwargs)
    if config.policy == "refloss":
        return RefLossPolicy(num_datasets, **kwargs)
    raise ConfigurationError(f"unknown policy {config.policy!r}")
