"""Trainer checks: optimizer semantics, config round trips, smoke-scale
training behavior, tracing, and reproducibility."""

import json
import os

import numpy as np
import pytest

from vitprune.gates import AnnealSchedule, GateBank, harden
from vitprune.losses import PenaltyConfig
from vitprune.tensor import Tensor
from vitprune.training import (
    AdamW,
    ConfigError,
    TrainConfig,
    evaluate,
    train,
)

from conftest import blob_dataset, micro_config


def _smoke_config(tmp_path=None, **overrides):
    base = dict(
        model=micro_config(image_size=16, dim=16, head_dim=8, ffn_dim=32, layers=2),
        penalty=PenaltyConfig(),
        anneal=AnnealSchedule(2.0, 0.5),
        epochs=3, batch_size=32, learning_rate=1e-3, seed=0,
        augment=False, trace_interval=4,
        out_dir=str(tmp_path) if tmp_path else None,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestAdamW:
    def test_zero_gradients_leave_state(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2, dtype=np.float32)
        opt = AdamW([("p", p)], lr=0.1, weight_decay=0.0)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert opt.t == 1

    def test_first_step_is_minus_lr_for_unit_gradient(self):
        p = Tensor(np.array([0.5]), requires_grad=True)
        p.grad = np.ones(1, dtype=np.float32)
        opt = AdamW([("p", p)], lr=1e-3, weight_decay=0.0)
        opt.step()
        assert p.data[0] == pytest.approx(0.5 - 1e-3, abs=1e-6)

    def test_decay_decoupled(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.zeros(1, dtype=np.float32)
        opt = AdamW([("p", p)], lr=0.1, weight_decay=0.05)
        opt.step()
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.05 * 2.0, rel=1e-5)

    def test_nonfinite_gradient_skips_step(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.nan], dtype=np.float32)
        opt = AdamW([("p", p)], lr=0.1)
        assert not opt.step()
        assert opt.skipped_steps == 1
        np.testing.assert_array_equal(p.data, [1.0])

    def test_gate_logit_clipping(self):
        bank = GateBank(1, 1, 1, 1, init=11.9)
        bank.head_logits.grad = np.full((1, 1), -1.0, dtype=np.float32)
        opt = AdamW(bank.parameters(), lr=1.0, weight_decay=0.0)
        opt.step()
        bank.clip_logits()
        assert np.all(bank.head_logits.data <= 12.0)
        assert np.all(bank.head_logits.data >= -12.0)


class TestConfigRoundTrip:
    def test_json_mirror(self, tmp_path):
        config = _smoke_config()
        path = tmp_path / "cfg.json"
        config.to_json(str(path))
        loaded = TrainConfig.from_json(str(path))
        assert loaded.to_dict() == config.to_dict()
        raw = json.loads(path.read_text())
        # field names mirror the dataclass exactly
        assert set(raw) >= {"model", "penalty", "anneal", "epochs", "batch_size",
                            "learning_rate", "gate_lr_multiplier", "weight_decay",
                            "seed", "train_path", "val_path", "teacher_path",
                            "trace_interval"}

    def test_missing_model_field_reported(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"epochs": 3}))
        with pytest.raises(ConfigError, match="model"):
            TrainConfig.from_json(str(path))

    def test_invalid_json_reported(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="JSON"):
            TrainConfig.from_json(str(path))


class TestTrainingRuns:
    def test_dense_smoke_learns_and_keeps_gates_open(self, tmp_path):
        train_ds = blob_dataset(256, seed=1)
        val_ds = blob_dataset(64, seed=2)
        config = _smoke_config(tmp_path / "run", epochs=8,
                               penalty=PenaltyConfig(lambda_macro=0.0,
                                                     lambda_micro=0.0))
        result = train(config, train_ds=train_ds, val_ds=val_ds)
        assert result.val_accuracy is not None and result.val_accuracy > 0.6
        for probs in result.bank.probabilities().values():
            assert np.all(probs > 0.9)
        assert os.path.exists(result.checkpoint_path)
        assert os.path.exists(result.metrics_path)
        assert os.path.exists(result.trace_path)

    def test_budget_pressure_prunes(self):
        train_ds = blob_dataset(160, seed=3, noise=0.5)
        config = _smoke_config(
            epochs=16, gate_lr_multiplier=40.0,
            penalty=PenaltyConfig(lambda_macro=2.0, lambda_micro=2.0,
                                  beta_head=1.0, beta_dim=1.0, beta_ffn=1.0))
        result = train(config, train_ds=train_ds)
        assert result.hardened_cost_fraction < 0.7

    def test_fixed_mask_freezes_gates(self):
        from vitprune.cost import oracle_count
        train_ds = blob_dataset(96, seed=4)
        config = _smoke_config(epochs=2)
        bank = GateBank(2, 2, 8, 32)
        bank.neuron_logits.data[:, ::2] = -5.0
        mask = harden(bank, 0.5)
        result = train(config, train_ds=train_ds, fixed_mask=mask)
        # gate logits never move off their init under a fixed mask
        assert np.all(result.bank.head_logits.data == 3.0)
        assert result.hardened_cost == oracle_count(mask, result.constants)
        assert result.hardened_cost < result.constants.dense_prunable_total

    def test_trace_snapshot_complete_and_metrics_columns(self, tmp_path):
        train_ds = blob_dataset(64, seed=5)
        config = _smoke_config(tmp_path / "run", epochs=2)
        result = train(config, train_ds=train_ds)
        with open(result.trace_path) as f:
            header = f.readline().strip().split(",")
            rows = [line.strip().split(",") for line in f]
        assert header == ["step", "layer", "family", "index", "probability",
                          "tau", "cost_fraction"]
        c = config.model
        per_snapshot = (c.layers * c.heads + c.layers
                        + c.layers * c.heads * c.head_dim + c.layers * c.ffn_dim)
        final_step = max(int(r[0]) for r in rows)
        finals = [r for r in rows if int(r[0]) == final_step]
        assert len(finals) == per_snapshot
        keys = {(r[1], r[2], r[3]) for r in finals}
        assert len(keys) == per_snapshot  # every gate exactly once

        with open(result.metrics_path) as f:
            mheader = f.readline().strip().split(",")
        assert mheader == ["step", "epoch", "tau", "task_loss", "L_macro",
                           "L_micro", "L_feas", "expected_cost_fraction",
                           "val_acc"]

    def test_monotone_temperature_in_metrics(self, tmp_path):
        train_ds = blob_dataset(64, seed=6)
        config = _smoke_config(tmp_path / "run", epochs=3)
        result = train(config, train_ds=train_ds, val_ds=blob_dataset(32, seed=7))
        taus = [float(r[2]) for r in result.metrics if r[2]]
        assert all(a >= b - 1e-9 for a, b in zip(taus, taus[1:]))

    def test_seed_reproducibility_byte_identical(self, tmp_path):
        train_ds = blob_dataset(64, seed=8)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        ra = train(_smoke_config(out_a, epochs=2, augment=True), train_ds=train_ds)
        rb = train(_smoke_config(out_b, epochs=2, augment=True), train_ds=train_ds)
        with open(ra.trace_path, "rb") as f:
            a = f.read()
        with open(rb.trace_path, "rb") as f:
            b = f.read()
        assert a == b

    def test_missing_train_path_rejected(self):
        with pytest.raises(ConfigError, match="train_path"):
            train(_smoke_config())

    def test_labels_beyond_model_classes_rejected(self):
        ds = blob_dataset(32, seed=9, num_classes=4)
        config = _smoke_config()  # model has 2 classes
        with pytest.raises(ConfigError, match="num_classes"):
            train(config, train_ds=ds)

    def test_divergence_aborts_with_dump(self, tmp_path):
        import warnings
        from vitprune.training import TrainingAborted
        config = _smoke_config(tmp_path / "run", epochs=50, learning_rate=1e18)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            with pytest.raises(TrainingAborted, match="10 consecutive"):
                train(config, train_ds=blob_dataset(64, seed=13))
        assert os.path.exists(tmp_path / "run" / "abort_dump.json")

    def test_gate_optimizer_never_decays(self):
        # decoupled decay applies to weights only; the gate optimizer is
        # constructed with zero weight decay
        train_ds = blob_dataset(64, seed=14)
        config = _smoke_config(epochs=1, weight_decay=0.5)
        result = train(config, train_ds=train_ds)
        # gates start at +3 and receive only task gradients here; heavy
        # decay (0.5) on the weights must not bleed into the logits, which
        # would visibly pull them toward zero within one epoch
        assert float(np.abs(result.bank.head_logits.data).min()) > 2.5

    def test_expected_cost_trend_non_increasing(self):
        train_ds = blob_dataset(160, seed=15, noise=0.5)
        config = _smoke_config(
            epochs=16, gate_lr_multiplier=40.0, trace_interval=2,
            penalty=PenaltyConfig(lambda_macro=2.0, lambda_micro=2.0,
                                  beta_head=1.0, beta_dim=1.0, beta_ffn=1.0))
        result = train(config, train_ds=train_ds)
        fractions = [float(r[7]) for r in result.metrics if r[7]]
        q = len(fractions) // 4
        assert np.mean(fractions[-q:]) < np.mean(fractions[:q])


class TestValidationPath:
    def test_evaluate_uses_hardened_gates(self):
        from vitprune.model import ViTWeights, mask_gates
        config = micro_config(image_size=16, dim=16, head_dim=8, ffn_dim=32)
        w = ViTWeights(config, np.random.default_rng(10))
        ds = blob_dataset(32, seed=11)
        bank = GateBank(config.layers, config.heads, config.head_dim, config.ffn_dim)
        acc = evaluate(w, mask_gates(harden(bank, 0.5)), ds)
        assert 0.0 <= acc <= 1.0


class TestKnowledgeDistillationPath:
    def test_teacher_checkpoint_feeds_training(self, tmp_path):
        train_ds = blob_dataset(64, seed=12)
        teacher_cfg = _smoke_config(tmp_path / "teacher", epochs=2)
        teacher = train(teacher_cfg, train_ds=train_ds)

        student_cfg = _smoke_config(
            tmp_path / "student", epochs=1,
            teacher_path=str(teacher.checkpoint_path),
            penalty=PenaltyConfig(alpha_kd=0.7, t_kd=4.0))
        result = train(student_cfg, train_ds=train_ds)
        assert os.path.exists(result.checkpoint_path)
        losses = [float(r[3]) for r in result.metrics if r[3]]
        assert all(np.isfinite(losses))
