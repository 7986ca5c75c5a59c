"""Sparse mixture-of-experts network with exact analytic gradients.

The model is deliberately small: token embedding, one or more MoE layers
(softmax gate over N two-layer tanh experts, top-K selection, no residual),
and a linear output head trained with next-token cross-entropy. Everything is
plain numpy with a hand-written backward pass so gradients can be checked
against central finite differences to tight tolerances.

Routing follows the usual sparse recipe: the gate produces a full softmax
over experts, the K highest-scoring experts are evaluated, and their outputs
are combined weighted by their (un-renormalized) softmax scores. The top-K
index set is treated as a constant of the forward pass during
backpropagation (straight-through selection).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError, NumericsError

PAD_ID = 0


@dataclass(frozen=True)
class MoEConfig:
    vocab_size: int
    embed_dim: int
    num_experts: int
    top_k: int
    expert_hidden_dim: int
    num_moe_layers: int = 1
    gate_noise_std: float = 0.1
    balance_loss_coeff: float = 0.1
    freeze_gate: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("vocab_size", "embed_dim", "num_experts", "top_k",
                     "expert_hidden_dim", "num_moe_layers"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.top_k > self.num_experts:
            raise ConfigurationError(
                f"top_k ({self.top_k}) cannot exceed num_experts ({self.num_experts})"
            )
        if self.gate_noise_std < 0:
            raise ConfigurationError("gate_noise_std must be non-negative")
        if self.balance_loss_coeff < 0:
            raise ConfigurationError("balance_loss_coeff must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "MoEConfig":
        return cls(**raw)


@dataclass(frozen=True)
class RoutingRecord:
    """Per-token routing outcome: full scores plus the selected top-K slice."""

    selected: np.ndarray        # K expert indices, descending score order
    scores: np.ndarray          # full length-N softmax distribution
    selected_scores: np.ndarray # scores[selected]


@dataclass
class BatchStats:
    """Expert-utilization statistics of one batch at one MoE layer.

    `importance` sums the full routing-score vectors over non-pad tokens;
    `load` counts how many tokens had each expert among their top-K.
    """

    importance: np.ndarray
    load: np.ndarray
    token_count: int

    def __post_init__(self) -> None:
        self.importance = np.asarray(self.importance, dtype=np.float64)
        self.load = np.asarray(self.load, dtype=np.int64)
        if self.importance.shape != self.load.shape or self.importance.ndim != 1:
            raise ConfigurationError("importance and load must be 1-D vectors of equal length")

    @classmethod
    def zero(cls, num_experts: int) -> "BatchStats":
        return cls(np.zeros(num_experts), np.zeros(num_experts, dtype=np.int64), 0)

    def __add__(self, other: "BatchStats") -> "BatchStats":
        if self.load.shape != other.load.shape:
            raise ConfigurationError("cannot merge stats with different expert counts")
        return BatchStats(
            self.importance + other.importance,
            self.load + other.load,
            self.token_count + other.token_count,
        )


class MoENetwork:
    """Parameter container with a version counter for cache invalidation."""

    def __init__(self, config: MoEConfig, rng: np.random.Generator | None = None):
        self.config = config
        if rng is None:
            rng = np.random.default_rng(config.seed)
        d, h, v = config.embed_dim, config.expert_hidden_dim, config.vocab_size
        n = config.num_experts
        self.params: dict[str, np.ndarray] = {}
        self.params["embedding"] = rng.normal(0.0, 1.0, size=(v, d))
        for l in range(config.num_moe_layers):
            self.params[f"layer{l}.gate"] = rng.normal(0.0, d ** -0.5, size=(d, n))
            for e in range(n):
                self.params[f"layer{l}.expert{e}.w1"] = rng.normal(0.0, d ** -0.5, size=(d, h))
                self.params[f"layer{l}.expert{e}.b1"] = np.zeros(h)
                self.params[f"layer{l}.expert{e}.w2"] = rng.normal(0.0, h ** -0.5, size=(h, d))
                self.params[f"layer{l}.expert{e}.b2"] = np.zeros(d)
        self.params["output_head"] = rng.normal(0.0, d ** -0.5, size=(d, v))
        self._version = 0

    @property
    def version(self) -> int:
        return self._version

    def bump_version(self) -> None:
        self._version += 1

    def param_names(self) -> list[str]:
        """Parameter block names in declaration (checkpoint) order."""
        return list(self.params.keys())

    def frozen_param_names(self) -> frozenset[str]:
        if not self.config.freeze_gate:
            return frozenset()
        return frozenset(
            f"layer{l}.gate" for l in range(self.config.num_moe_layers)
        )

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def gate_scores(
    network: MoENetwork,
    hidden: np.ndarray,
    layer: int,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Softmax routing distribution for a single token's hidden state.

    Gaussian noise is added to the gate logits only in training mode; probe
    and evaluation passes must stay noise-free.
    """
    cfg = network.config
    if not (0 <= layer < cfg.num_moe_layers):
        raise ConfigurationError(f"layer index {layer} out of range")
    hidden = np.asarray(hidden, dtype=np.float64)
    if not np.all(np.isfinite(hidden)):
        raise NumericsError(f"non-finite hidden state entering MoE layer {layer}")
    logits = hidden @ network.params[f"layer{layer}.gate"]
    if train_mode and cfg.gate_noise_std > 0:
        if rng is None:
            raise ConfigurationError("training-mode gate scores need an rng for noise")
        logits = logits + rng.normal(0.0, cfg.gate_noise_std, size=logits.shape)
    return _softmax_rows(logits)


def top_k_route(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the K largest scores, descending, ties going to lower index."""
    scores = np.asarray(scores)
    if not (1 <= k <= scores.size):
        raise ConfigurationError(f"top_k={k} invalid for {scores.size} experts")
    # Stable sort of the negated scores keeps lower indices first on ties.
    return np.argsort(-scores, kind="stable")[:k]


def _expert_forward(
    network: MoENetwork, layer: int, expert: int, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    p = network.params
    prefix = f"layer{layer}.expert{expert}"
    a1 = np.tanh(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    out = a1 @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]
    return out, a1


def moe_layer_forward(
    network: MoENetwork,
    hidden: np.ndarray,
    layer: int,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, RoutingRecord]:
    """Single-token MoE layer: weighted sum of the top-K experts' outputs."""
    scores = gate_scores(network, hidden, layer, train_mode, rng)
    selected = top_k_route(scores, network.config.top_k)
    out = np.zeros(network.config.embed_dim)
    for e in selected:
        expert_out, _ = _expert_forward(network, layer, int(e), hidden)
        if not np.all(np.isfinite(expert_out)):
            raise NumericsError(f"expert {int(e)} produced non-finite output at layer {layer}")
        out += scores[e] * expert_out
    return out, RoutingRecord(selected, scores, scores[selected])


def cv_squared(values: np.ndarray | Sequence[float]) -> float:
    """Squared coefficient of variation (population std over mean, squared).

    An all-zero vector returns 0 rather than faulting so that empty slices
    cannot poison the balance loss.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cv_squared of an empty vector")
    mean = v.mean()
    if mean == 0.0:
        return 0.0
    return float(v.var() / mean ** 2)


def cv_squared_grad(values: np.ndarray) -> np.ndarray:
    """Gradient of cv_squared; zero for the degenerate all-zero vector."""
    v = np.asarray(values, dtype=np.float64)
    s = v.sum()
    if s == 0.0:
        return np.zeros_like(v)
    n = v.size
    m = s / n
    cv2 = n * ((v - m) ** 2).sum() / s ** 2
    return 2.0 * n * (v - m) / s ** 2 - 2.0 * cv2 / s


def balance_loss(stats: BatchStats) -> float:
    """CV(importance)^2 + CV(load)^2; zero iff both vectors are constant."""
    return cv_squared(stats.importance) + cv_squared(stats.load.astype(np.float64))


@dataclass
class _LayerCache:
    h_in: np.ndarray
    scores: np.ndarray
    member: np.ndarray  # [tokens, experts] bool, True where expert is selected
    expert_rows: list[np.ndarray | None]
    expert_hidden: list[np.ndarray | None]
    expert_out: list[np.ndarray | None]
    importance: np.ndarray


@dataclass
class ForwardCache:
    version: int
    flat_tokens: np.ndarray
    has_target: np.ndarray
    target_ids: np.ndarray
    layers: list[_LayerCache]
    h_final: np.ndarray
    target_probs: np.ndarray


@dataclass
class ForwardResult:
    task_loss: float
    balance_losses: list[float]
    total_loss: float
    stats: list[BatchStats]
    target_count: int
    cache: ForwardCache


def _flatten_batch(tokens: np.ndarray, vocab_size: int, pad_id: int):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise DataError(f"expected a [batch, length] token matrix, got shape {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= vocab_size:
        raise DataError("token ids out of vocabulary range")
    mask = tokens != pad_id
    if not mask.any():
        raise DataError("batch contains no non-pad tokens")
    tgt = np.zeros_like(mask)
    tgt[:, :-1] = mask[:, :-1] & mask[:, 1:]
    flat_tokens = tokens[mask]
    has_target = tgt[mask]
    target_ids = tokens[:, 1:][tgt[:, :-1]]
    if target_ids.size == 0:
        raise DataError("batch has no next-token targets (all sequences length 1)")
    return flat_tokens, has_target, target_ids


def _batched_layer_forward(
    network: MoENetwork,
    layer: int,
    h: np.ndarray,
    train_mode: bool,
    rng: np.random.Generator | None,
) -> tuple[np.ndarray, _LayerCache, BatchStats]:
    cfg = network.config
    p = network.params
    if not np.all(np.isfinite(h)):
        raise NumericsError(f"non-finite hidden state entering MoE layer {layer}")
    logits = h @ p[f"layer{layer}.gate"]
    if train_mode and cfg.gate_noise_std > 0:
        if rng is None:
            raise ConfigurationError("training-mode forward needs an rng for gate noise")
        logits = logits + rng.normal(0.0, cfg.gate_noise_std, size=logits.shape)
    scores = _softmax_rows(logits)
    t = h.shape[0]
    sel = np.argsort(-scores, axis=1, kind="stable")[:, : cfg.top_k]
    member = np.zeros((t, cfg.num_experts), dtype=bool)
    member[np.arange(t)[:, None], sel] = True
    out = np.zeros_like(h)
    rows_list: list[np.ndarray | None] = []
    a1_list: list[np.ndarray | None] = []
    z2_list: list[np.ndarray | None] = []
    for e in range(cfg.num_experts):
        rows = np.nonzero(member[:, e])[0]
        if rows.size == 0:
            rows_list.append(None)
            a1_list.append(None)
            z2_list.append(None)
            continue
        z2, a1 = _expert_forward(network, layer, e, h[rows])
        if not np.all(np.isfinite(z2)):
            raise NumericsError(f"expert {e} produced non-finite output at layer {layer}")
        out[rows] += scores[rows, e][:, None] * z2
        rows_list.append(rows)
        a1_list.append(a1)
        z2_list.append(z2)
    stats = BatchStats(scores.sum(axis=0), member.sum(axis=0).astype(np.int64), t)
    cache = _LayerCache(h, scores, member, rows_list, a1_list, z2_list, stats.importance)
    return out, cache, stats


def forward_loss(
    network: MoENetwork,
    tokens: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    pad_id: int = PAD_ID,
) -> ForwardResult:
    """Forward pass over a padded batch.

    Task loss is the mean next-token cross-entropy over positions whose
    successor is a real token. Balance losses and utilization stats cover
    every non-pad token (the trailing token of each sequence is routed even
    though it has no prediction target); pad positions are excluded from
    everything.
    """
    cfg = network.config
    flat_tokens, has_target, target_ids = _flatten_batch(tokens, cfg.vocab_size, pad_id)
    h = network.params["embedding"][flat_tokens]
    layer_caches = []
    stats_list = []
    balance_losses = []
    for l in range(cfg.num_moe_layers):
        h, cache, stats = _batched_layer_forward(network, l, h, train_mode, rng)
        layer_caches.append(cache)
        stats_list.append(stats)
        balance_losses.append(balance_loss(stats))
    logits = h[has_target] @ network.params["output_head"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    z = exp.sum(axis=1)
    probs = exp / z[:, None]
    idx = np.arange(target_ids.size)
    log_p = shifted[idx, target_ids] - np.log(z)
    task_loss = float(-log_p.mean())
    cache = ForwardCache(
        version=network.version,
        flat_tokens=flat_tokens,
        has_target=has_target,
        target_ids=target_ids,
        layers=layer_caches,
        h_final=h,
        target_probs=probs,
    )
    total = task_loss + cfg.balance_loss_coeff * float(np.sum(balance_losses))
    return ForwardResult(
        task_loss, balance_losses, total, stats_list, int(target_ids.size), cache
    )


def routing_stats(
    network: MoENetwork, tokens: np.ndarray, pad_id: int = PAD_ID
) -> list[BatchStats]:
    """Evaluation-mode routing statistics per layer, without computing a loss.

    Pure with respect to the network: reads parameters only, so disjoint
    batches may be processed on concurrent threads and merged afterwards.
    """
    cfg = network.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise DataError("token ids out of vocabulary range")
    mask = tokens != pad_id
    if not mask.any():
        raise DataError("batch contains no non-pad tokens")
    h = network.params["embedding"][tokens[mask]]
    out = []
    for l in range(cfg.num_moe_layers):
        h, _, stats = _batched_layer_forward(network, l, h, train_mode=False, rng=None)
        out.append(stats)
    return out


def backward(network: MoENetwork, result: ForwardResult) -> dict[str, np.ndarray]:
    """Exact gradients of the total loss for every parameter block.

    The top-K index sets are constants of the forward pass; gradient flows
    through the selected softmax scores into the gate (unless frozen) and
    through the selected experts into their weights and inputs. The load
    term of the balance loss is an integer count and contributes nothing.
    Frozen gate blocks are returned as zero arrays and skipped by the
    optimizer.
    """
    cfg = network.config
    cache = result.cache
    if cache.version != network.version:
        raise RuntimeError(
            "stale forward cache: parameters were updated after this forward pass"
        )
    p = network.params
    grads = {name: np.zeros_like(arr) for name, arr in p.items()}
    n_targets = cache.target_ids.size

    d_logits = cache.target_probs.copy()
    d_logits[np.arange(n_targets), cache.target_ids] -= 1.0
    d_logits /= n_targets
    grads["output_head"] = cache.h_final[cache.has_target].T @ d_logits
    d_h = np.zeros_like(cache.h_final)
    d_h[cache.has_target] = d_logits @ p["output_head"].T

    frozen = network.frozen_param_names()
    for l in reversed(range(cfg.num_moe_layers)):
        lc = cache.layers[l]
        d_scores = np.zeros_like(lc.scores)
        d_h_in = np.zeros_like(lc.h_in)
        for e in range(cfg.num_experts):
            rows = lc.expert_rows[e]
            if rows is None:
                continue
            a1 = lc.expert_hidden[e]
            z2 = lc.expert_out[e]
            d_out = d_h[rows]
            d_scores[rows, e] += np.einsum("ij,ij->i", d_out, z2)
            d_z2 = d_out * lc.scores[rows, e][:, None]
            prefix = f"layer{l}.expert{e}"
            grads[f"{prefix}.w2"] += a1.T @ d_z2
            grads[f"{prefix}.b2"] += d_z2.sum(axis=0)
            d_a1 = d_z2 @ p[f"{prefix}.w2"].T
            d_z1 = d_a1 * (1.0 - a1 ** 2)
            grads[f"{prefix}.w1"] += lc.h_in[rows].T @ d_z1
            grads[f"{prefix}.b1"] += d_z1.sum(axis=0)
            d_h_in[rows] += d_z1 @ p[f"{prefix}.w1"].T
        if cfg.balance_loss_coeff > 0:
            # Importance term of the balance loss: the per-token score vectors
            # sum into the importance vector, so its gradient broadcasts.
            d_scores += cfg.balance_loss_coeff * cv_squared_grad(lc.importance)
        # Softmax backward into the gate logits.
        dot = np.einsum("ij,ij->i", d_scores, lc.scores)
        d_gate_logits = lc.scores * (d_scores - dot[:, None])
        gate_name = f"layer{l}.gate"
        if gate_name not in frozen:
            grads[gate_name] = lc.h_in.T @ d_gate_logits
        d_h_in += d_gate_logits @ p[gate_name].T
        d_h = d_h_in

    np.add.at(grads["embedding"], cache.flat_tokens, d_h)
    return grads


# --- optimization -----------------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to the peak followed by cosine decay to min_lr."""

    peak_lr: float
    total_steps: int
    warmup_frac: float = 0.03
    min_lr: float = 0.0

    def __post_init__(self) -> None:
        if self.peak_lr <= 0 or self.total_steps < 1:
            raise ConfigurationError("peak_lr must be positive and total_steps >= 1")
        if not (0.0 <= self.warmup_frac < 1.0):
            raise ConfigurationError("warmup_frac must be in [0, 1)")
        if self.min_lr < 0 or self.min_lr > self.peak_lr:
            raise ConfigurationError("min_lr must be in [0, peak_lr]")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * self.total_steps))

    def lr_at(self, step: int) -> float:
        wu = self.warmup_steps
        if wu > 0 and step < wu:
            return self.peak_lr * step / wu
        denom = max(1, self.total_steps - wu)
        progress = min(1.0, (step - wu) / denom)
        return self.min_lr + (self.peak_lr - self.min_lr) * 0.5 * (1.0 + np.cos(np.pi * progress))


@dataclass
class AdamWState:
    step_count: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def for_network(cls, network: MoENetwork) -> "AdamWState":
        return cls(
            step_count=0,
            m={k: np.zeros_like(v) for k, v in network.params.items()},
            v={k: np.zeros_like(v) for k, v in network.params.items()},
        )


def adamw_step(
    network: MoENetwork,
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """In-place AdamW update with decoupled weight decay; frozen blocks untouched."""
    frozen = network.frozen_param_names()
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, param in network.params.items():
        if name in frozen:
            continue
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != param.shape:
            raise ConfigurationError(f"gradient shape mismatch for block {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient in block {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay > 0:
            update = update + weight_decay * param
        param -= lr * update
    network.bump_version()


# --- checkpoint serialization ------------------------------------------------


def network_to_bytes(network: MoENetwork) -> bytes:
    """Header (canonical config JSON), parameter blocks as little-endian
    float64 in declaration order, then a CRC32 of everything before it."""
    header = json.dumps(network.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    parts = [struct.pack("<Q", len(header)), header]
    for name in network.param_names():
        parts.append(np.ascontiguousarray(network.params[name], dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def network_from_bytes(blob: bytes) -> MoENetwork:
    if len(blob) < 12:
        raise DataError("checkpoint too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise DataError("checkpoint checksum mismatch")
    (header_len,) = struct.unpack("<Q", body[:8])
    try:
        config = MoEConfig.from_dict(json.loads(body[8 : 8 + header_len].decode()))
    except (json.JSONDecodeError, TypeError, UnicodeDecodeError) as exc:
        raise DataError(f"checkpoint header unreadable: {exc}") from exc
    network = MoENetwork(config)
    offset = 8 + header_len
    for name in network.param_names():
        shape = network.params[name].shape
        nbytes = int(np.prod(shape)) * 8
        chunk = body[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise DataError(f"checkpoint truncated in block {name!r}")
        network.params[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise DataError("checkpoint has trailing bytes")
    return network


def save_checkpoint(network: MoENetwork, path: str | Path) -> None:
    Path(path).write_bytes(network_to_bytes(network))


def load_checkpoint(path: str | Path) -> MoENetwork:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    return network_from_bytes(p.read_bytes())
