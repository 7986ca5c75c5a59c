"""Integration tests for the training loop, refloss protocol, and sweeps."""

import csv
import json
import math

import numpy as np
import pytest

from conftest import mini_run_config, mini_run_raw

from moemix.errors import ConfigurationError, DataError, NumericsError
from moemix.moe_core import MoENetwork, load_checkpoint
from moemix.synth_data import CorpusManifest, DomainSpec, generate_corpora
from moemix.trainer import (
    apply_overrides,
    default_run_dict,
    evaluate_per_dataset,
    load_reference_losses,
    make_scripted_policy,
    parse_override_value,
    resolve_run_config,
    run_refloss,
    run_sweep,
    run_training,
    weight_total_variation,
)


class TestConfigResolution:
    def test_total_steps_below_interval_faults(self, tmp_path, mini_manifest):
        with pytest.raises(ConfigurationError, match="interval"):
            mini_run_config(tmp_path, mini_manifest, **{"train.total_steps": 10})

    def test_vocab_mismatch_faults(self, tmp_path, mini_manifest):
        with pytest.raises(ConfigurationError, match="vocab"):
            mini_run_config(tmp_path, mini_manifest, **{"model.vocab_size": 99})

    def test_run_id_defaults_to_policy_interval_seed(self, tmp_path, mini_manifest):
        cfg = mini_run_config(tmp_path, mini_manifest, **{"scheduler.policy": "uniform"})
        assert cfg.run_id == "uniform-m20-s0"

    def test_dotted_overrides(self):
        raw = apply_overrides(default_run_dict(), {"scheduler.eta": 3.5, "seed": 9})
        assert raw["scheduler"]["eta"] == 3.5
        assert raw["seed"] == 9

    def test_override_value_parsing(self):
        assert parse_override_value("3.5") == 3.5
        assert parse_override_value("true") is True
        assert parse_override_value("[1, 2]") == [1, 2]
        assert parse_override_value("dynamic") == "dynamic"

    def test_explicit_seeds_respected(self, tmp_path, mini_manifest):
        cfg = mini_run_config(tmp_path, mini_manifest,
                              **{"model.seed": 5, "scheduler.seed": 6})
        assert cfg.model.seed == 5
        assert cfg.scheduler.seed == 6

    def test_derived_seeds_deterministic(self, tmp_path, mini_manifest):
        a = mini_run_config(tmp_path, mini_manifest)
        b = mini_run_config(tmp_path, mini_manifest)
        assert a.model.seed == b.model.seed
        assert a.scheduler.seed == b.scheduler.seed


class TestRunTraining:
    def test_uniform_policy_constant_trajectory(self, tmp_path, mini_manifest, mini_corpora):
        cfg = mini_run_config(tmp_path, mini_manifest, **{"scheduler.policy": "uniform"})
        record = run_training(cfg, corpora=mini_corpora)
        assert len(record.rounds) == 2  # floor(40 / 20)
        for r in record.rounds:
            np.testing.assert_allclose(r.weights, 0.25)
        tv = weight_total_variation(record.weight_trajectory())
        np.testing.assert_array_equal(tv, np.zeros(4))

    def test_round_records_land_on_boundaries(self, tmp_path, mini_manifest, mini_corpora):
        cfg = mini_run_config(tmp_path, mini_manifest, **{
            "train.total_steps": 50, "scheduler.interval": 20,
        })
        record = run_training(cfg, corpora=mini_corpora)
        assert [r.step for r in record.rounds] == [20, 40]
        assert [r.round_index for r in record.rounds] == [1, 2]
        assert record.optimizer_steps == 50

    def test_two_dataset_dynamic_stays_uniform(self, tmp_path):
        manifest = CorpusManifest(vocab_size=16, seed=4, domains=(
            DomainSpec(name="A", transition_seed=1, length_range=(6, 12),
                       train_size=64, probe_size=32),
            DomainSpec(name="B", transition_seed=2, length_range=(6, 12),
                       train_size=64, probe_size=32),
        ))
        with pytest.warns(UserWarning, match="two datasets"):
            cfg = mini_run_config(tmp_path, manifest)
            record = run_training(cfg)
        for r in record.rounds:
            np.testing.assert_allclose(r.weights, 0.5, atol=1e-12)

    def test_artifacts_written(self, tmp_path, mini_manifest, mini_corpora):
        cfg = mini_run_config(tmp_path, mini_manifest)
        record = run_training(cfg, corpora=mini_corpora)
        for name in ("config.json", "metrics.jsonl", "rounds.csv", "gateloads.csv",
                     "distances.json", "checkpoint.bin", "summary.json"):
            assert (record.run_dir / name).exists(), name
        summary = json.loads((record.run_dir / "summary.json").read_text())
        assert summary["status"] == "ok"
        assert summary["schema_version"] == 1
        assert summary["rounds"] == 2
        metrics = [json.loads(line) for line in
                   (record.run_dir / "metrics.jsonl").read_text().splitlines()]
        assert len(metrics) == 40
        assert {"step", "task_loss", "balance_loss", "total_loss", "lr",
                "cv_g2", "cv_o2"} <= set(metrics[0])
        net = load_checkpoint(record.checkpoint_path)
        assert net.config == cfg.model

    def test_rounds_csv_schema(self, tmp_path, mini_manifest, mini_corpora):
        cfg = mini_run_config(tmp_path, mini_manifest, **{"scheduler.policy": "datasize"})
        record = run_training(cfg, corpora=mini_corpora)
        with open(record.run_dir / "rounds.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 4
        assert rows[0].keys() == {"round", "step", "dataset_name", "weight",
                                  "delta", "policy"}
        assert all(r["policy"] == "datasize" for r in rows)
        weights = [float(r["weight"]) for r in rows]
        assert all(w == 0.25 for w in weights)  # equal mini train sizes

    def test_deterministic_given_seed(self, tmp_path, mini_manifest, mini_corpora):
        cfg_a = mini_run_config(tmp_path / "a", mini_manifest)
        cfg_b = mini_run_config(tmp_path / "b", mini_manifest)
        rec_a = run_training(cfg_a, corpora=mini_corpora)
        rec_b = run_training(cfg_b, corpora=mini_corpora)
        assert [m["task_loss"] for m in rec_a.step_metrics] == [
            m["task_loss"] for m in rec_b.step_metrics
        ]
        np.testing.assert_array_equal(rec_a.final_eval_losses, rec_b.final_eval_losses)
        for ra, rb in zip(rec_a.rounds, rec_b.rounds):
            np.testing.assert_array_equal(ra.weights, rb.weights)
            np.testing.assert_array_equal(ra.gate_loads.counts, rb.gate_loads.counts)

    def test_nan_abort_writes_failed_summary(self, tmp_path, mini_manifest, mini_corpora):
        cfg = mini_run_config(tmp_path, mini_manifest, **{
            "train.peak_lr": 1e200, "train.warmup_frac": 0.0,
        })
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NumericsError, match="step"):
                run_training(cfg, corpora=mini_corpora)
        summary = json.loads((cfg.run_dir / "summary.json").read_text())
        assert summary["status"] == "failed"
        assert "error" in summary

    def test_scripted_replay_reproduces_batch_composition(
        self, tmp_path, mini_manifest, mini_corpora
    ):
        cfg = mini_run_config(tmp_path / "orig", mini_manifest)
        record = run_training(cfg, corpora=mini_corpora)
        assert any(abs(r.weights - 0.25).max() > 1e-6 for r in record.rounds)
        replay_cfg = mini_run_config(tmp_path / "replay", mini_manifest)
        replay = run_training(
            replay_cfg, corpora=mini_corpora, policy=make_scripted_policy(record)
        )
        # Same seed and same weight sequence: identical batches, hence an
        # identical training trajectory.
        assert [m["task_loss"] for m in replay.step_metrics] == [
            m["task_loss"] for m in record.step_metrics
        ]
        for ra, rb in zip(record.rounds, replay.rounds):
            np.testing.assert_array_equal(ra.weights, rb.weights)

    def test_eval_every_adds_eval_lines(self, tmp_path, mini_manifest, mini_corpora):
        cfg = mini_run_config(tmp_path, mini_manifest, **{"train.eval_every": 10})
        record = run_training(cfg, corpora=mini_corpora)
        with_evals = [m for m in record.step_metrics if "eval_losses" in m]
        assert [m["step"] for m in with_evals] == [9, 19, 29, 39]

    def test_dynamic_sentemb_uses_constant_signal(self, tmp_path, mini_manifest, mini_corpora):
        cfg = mini_run_config(tmp_path, mini_manifest,
                              **{"scheduler.policy": "dynamic_sentemb"})
        record = run_training(cfg, corpora=mini_corpora)
        np.testing.assert_array_equal(record.rounds[0].delta, record.rounds[1].delta)


class TestEvaluate:
    def test_deterministic(self, tiny_network, mini_corpora, mini_manifest):
        pass

    def test_evaluate_twice_identical(self, tmp_path, mini_manifest, mini_corpora):
        cfg = mini_run_config(tmp_path, mini_manifest)
        net = MoENetwork(cfg.model)
        probes = [mini_corpora[n][1] for n in mini_manifest.domain_names]
        a = evaluate_per_dataset(net, probes)
        b = evaluate_per_dataset(net, probes)
        np.testing.assert_array_equal(a, b)

    def test_zero_head_gives_log_vocab(self, tmp_path, mini_manifest, mini_corpora):
        cfg = mini_run_config(tmp_path, mini_manifest)
        net = MoENetwork(cfg.model)
        net.params["output_head"][:] = 0.0
        probes = [mini_corpora[n][1] for n in mini_manifest.domain_names]
        losses = evaluate_per_dataset(net, probes)
        np.testing.assert_allclose(losses, math.log(16), atol=1e-12)

    def test_empty_split_faults(self, tmp_path, mini_manifest):
        from moemix.synth_data import DomainCorpus

        cfg = mini_run_config(tmp_path, mini_manifest)
        net = MoENetwork(cfg.model)
        with pytest.raises(DataError):
            evaluate_per_dataset(net, [DomainCorpus("A", "probe", [])])

    def test_losses_decrease_with_training(self, tmp_path, mini_manifest, mini_corpora):
        cfg = mini_run_config(tmp_path, mini_manifest, **{
            "train.total_steps": 120, "scheduler.interval": 60,
            "scheduler.policy": "uniform",
        })
        probes = [mini_corpora[n][1] for n in mini_manifest.domain_names]
        before = evaluate_per_dataset(MoENetwork(cfg.model), probes)
        record = run_training(cfg, corpora=mini_corpora)
        assert np.all(record.final_eval_losses < before)


class TestRefLoss:
    def test_two_phase_protocol(self, tmp_path, mini_manifest, mini_corpora):
        cfg = mini_run_config(tmp_path, mini_manifest, **{"scheduler.policy": "refloss"})
        record = run_refloss(cfg, corpora=mini_corpora)
        # Phase 1 is uniform throughout.
        for r in record.phase1.rounds:
            np.testing.assert_allclose(r.weights, 0.25)
        # References round-trip bit-exactly from phase 1's final evaluation.
        np.testing.assert_array_equal(record.references, record.phase1.final_eval_losses)
        reloaded = load_reference_losses(
            cfg.run_dir / "references.json", mini_manifest.domain_names
        )
        np.testing.assert_array_equal(reloaded, record.phase1.final_eval_losses)
        # Two full training phases.
        assert record.total_optimizer_steps == 2 * cfg.train.total_steps
        assert (cfg.run_dir / "phase1-uniform" / "summary.json").exists()
        assert (cfg.run_dir / "phase2-refloss" / "summary.json").exists()
        assert json.loads((cfg.run_dir / "refloss.json").read_text())[
            "total_optimizer_steps"
        ] == 2 * cfg.train.total_steps

    def test_missing_references_fault(self, tmp_path, mini_manifest):
        with pytest.raises(DataError, match="uniform phase"):
            load_reference_losses(tmp_path / "absent.json", mini_manifest.domain_names)


class TestSweep:
    def test_cross_product_and_determinism(self, tmp_path, mini_manifest):
        raw = mini_run_raw(tmp_path, mini_manifest)
        results = run_sweep(raw, ["uniform", "dynamic"], [0], [20, 40],
                            out_dir=tmp_path / "sweep")
        assert len(results) == 4
        assert all(r["status"] == "ok" for r in results)
        ids = {r["run_id"] for r in results}
        assert ids == {"uniform-m20-s0", "uniform-m40-s0",
                       "dynamic-m20-s0", "dynamic-m40-s0"}
        again = run_sweep(raw, ["uniform", "dynamic"], [0], [20, 40],
                          out_dir=tmp_path / "sweep2")
        for a, b in zip(results, again):
            assert a["macro_avg_loss"] == b["macro_avg_loss"]
            assert a["final_weights"] == b["final_weights"]
        assert (tmp_path / "sweep" / "sweep_results.csv").exists()
        assert (tmp_path / "sweep" / "sweep_results.json").exists()

    def test_failed_cell_does_not_abort(self, tmp_path, mini_manifest):
        raw = mini_run_raw(tmp_path, mini_manifest)
        # interval > total_steps is a configuration fault in that cell only.
        results = run_sweep(raw, ["uniform"], [0], [20, 999],
                            out_dir=tmp_path / "sweep")
        by_interval = {r["interval"]: r for r in results}
        assert by_interval[20]["status"] == "ok"
        assert by_interval[999]["status"] == "failed"
        assert "interval" in by_interval[999]["error"]

    def test_empty_grid_faults(self, tmp_path, mini_manifest):
        raw = mini_run_raw(tmp_path, mini_manifest)
        with pytest.raises(ConfigurationError):
            run_sweep(raw, [], [0], [20], out_dir=tmp_path / "sweep")
