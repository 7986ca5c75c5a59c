import numpy as np
import pytest

from moemix.moe_core import MoEConfig, MoENetwork
from moemix.synth_data import CorpusManifest, DomainSpec, generate_corpora
from moemix.trainer import apply_overrides, default_run_dict, resolve_run_config


@pytest.fixture
def tiny_config():
    return MoEConfig(
        vocab_size=12,
        embed_dim=6,
        num_experts=4,
        top_k=2,
        expert_hidden_dim=8,
        num_moe_layers=1,
        gate_noise_std=0.0,
        balance_loss_coeff=0.1,
        freeze_gate=False,
        seed=7,
    )


@pytest.fixture
def tiny_network(tiny_config):
    return MoENetwork(tiny_config)


def make_batch(rng, vocab_size=12, batch=4, length=9):
    """Random right-padded batch with tokens in [1, vocab_size)."""
    tokens = rng.integers(1, vocab_size, size=(batch, length))
    tokens[0, length - 3 :] = 0
    tokens[-1, length - 4 :] = 0
    return tokens


@pytest.fixture
def mini_manifest():
    return CorpusManifest(
        vocab_size=16,
        seed=99,
        domains=(
            DomainSpec(name="A", transition_seed=1, length_range=(6, 12),
                       train_size=96, probe_size=48),
            DomainSpec(name="B", transition_seed=2, blend=("A", 0.9),
                       length_range=(6, 12), train_size=96, probe_size=48),
            DomainSpec(name="C", transition_seed=3, length_range=(6, 12),
                       train_size=96, probe_size=48),
            DomainSpec(name="D", transition_seed=4, length_range=(6, 12),
                       train_size=96, probe_size=48),
        ),
    )


@pytest.fixture
def mini_corpora(mini_manifest):
    return generate_corpora(mini_manifest)


def mini_run_raw(tmp_path, manifest, **overrides):
    """A fast run config dict against the mini manifest."""
    raw = apply_overrides(
        default_run_dict(),
        {
            "out_dir": str(tmp_path / "runs"),
            "seed": 0,
            "train.total_steps": 40,
            "train.batch_size": 8,
            "train.peak_lr": 0.02,
            "scheduler.interval": 20,
            "model.vocab_size": manifest.vocab_size,
            "model.embed_dim": 6,
            "model.num_experts": 4,
            "model.top_k": 2,
            "model.expert_hidden_dim": 8,
            **overrides,
        },
    )
    raw["data"]["manifest"] = manifest.to_dict()
    return raw


def mini_run_config(tmp_path, manifest, **overrides):
    return resolve_run_config(mini_run_raw(tmp_path, manifest, **overrides))
