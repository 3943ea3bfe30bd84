"""Tests for the sequential-task trainer, metrics, and baseline modes."""

import inspect

import numpy as np
import pytest

from movecl.autodiff import NumericError, Tape, Tensor, backward
from movecl.data import make_synthetic_stream
from movecl.harness import (
    AccuracyMatrix,
    Adam,
    Model,
    RunResult,
    TrainConfig,
    advance_task,
    evaluate_accuracy,
    forgetting_metrics,
    offline_oracle_baseline,
    run_continual,
    total_loss,
    train_task,
)


def quick_cfg(**kwargs):
    defaults = dict(epochs=3, batch_size=64, seed=0)
    defaults.update(kwargs)
    return TrainConfig(**defaults)


class TestTrainConfig:
    def test_defaults_are_valid(self):
        cfg = TrainConfig()
        assert cfg.gating_kl_weight == 0.002
        assert cfg.weight_kl_weight == 0.75
        assert cfg.learning_rate == 6e-4

    @pytest.mark.parametrize("bad", [
        dict(gating_kl_weight=-0.1),
        dict(weight_kl_weight=float("nan")),
        dict(batch_size=0),
        dict(epochs=-1),
        dict(mode="bogus"),
        dict(entropy_sign=2),
        dict(kernel_width=0.0),
        dict(learning_rate=0.0),
    ])
    def test_invalid_fields_rejected(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_zero_epochs_allowed(self):
        assert TrainConfig(epochs=0).epochs == 0


class TestAdam:
    def test_minimizes_quadratic(self):
        x = Tensor(np.array([5.0, -4.0]), requires_grad=True)
        opt = Adam([x], lr=0.1)
        for _ in range(300):
            with Tape():
                diff = x - Tensor(np.array([3.0, 1.0]))
                loss = (diff * diff).sum()
            opt.zero_grad()
            backward(loss)
            opt.step()
        np.testing.assert_allclose(x.data, [3.0, 1.0], atol=1e-3)

    def test_reset_state_clears_moments(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([x], lr=0.1)
        with Tape():
            loss = (x * x).sum()
        backward(loss)
        opt.step()
        assert opt.t == 1 and np.any(opt.m[0] != 0.0)
        opt.reset_state()
        assert opt.t == 0 and np.all(opt.m[0] == 0.0) and np.all(opt.v[0] == 0.0)


class TestTotalLoss:
    def test_naive_mode_is_plain_cross_entropy(self):
        rng = np.random.default_rng(0)
        cfg = quick_cfg(mode="naive_dense")
        model = Model([3, 4, 2], cfg, np.random.default_rng(1))
        x = rng.standard_normal((6, 3))
        y = rng.integers(0, 2, size=6)
        loss, parts = total_loss(model, x, y, rng=None, sample=False)

        h = x @ model.layers[0].weight.data + model.layers[0].bias.data
        h = np.where(h > 0, h, 0.01 * h)
        logits = h @ model.layers[1].weight.data + model.layers[1].bias.data
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        expected = -np.mean(logp[np.arange(6), y])
        np.testing.assert_allclose(loss.item(), expected, atol=1e-12)
        assert parts["gating_kl"] == 0.0 and parts["weight_kl"] == 0.0

    def test_single_expert_reduces_to_vcl_form(self):
        """With M=1 the mixture terms vanish and only the weight KL remains."""
        rng = np.random.default_rng(2)
        cfg = quick_cfg(mode="vcl_single_expert")
        model = Model([3, 4, 2], cfg, np.random.default_rng(3), n_experts=5)
        assert model.n_experts == 1
        x = rng.standard_normal((8, 3))
        y = rng.integers(0, 2, size=8)
        loss, parts = total_loss(model, x, y, np.random.default_rng(4))
        assert parts["gating_kl"] == 0.0
        assert parts["entropy_cost"] == 0.0
        assert parts["dpp_diversity"] == 0.0
        assert parts["weight_kl"] > 0.0  # posterior vs N(0,1) prior
        np.testing.assert_allclose(
            loss.item(), parts["nll"] + cfg.weight_kl_weight * parts["weight_kl"],
            rtol=1e-12)

    def test_loss_decreases_on_separable_task(self):
        """Training smoke test at the default learning rate, seed-averaged."""
        deltas = []
        for seed in range(5):
            stream = make_synthetic_stream(n_tasks=1, n_per_task=128,
                                           separation=10.0, seed=seed)
            cfg = quick_cfg(seed=seed, epochs=1)
            model = Model([2, 8, 2], cfg, np.random.default_rng(seed))
            opt = Adam(model.parameters(), cfg.learning_rate)
            rng = np.random.default_rng(100 + seed)
            task = stream.tasks[0].train
            first = last = None
            for step in range(50):
                with model.tape:
                    loss, _ = total_loss(model, task.inputs, task.labels, rng)
                opt.zero_grad()
                backward(loss)
                opt.step()
                first = loss.item() if first is None else first
                last = loss.item()
            deltas.append(first - last)
        assert np.mean(deltas) > 0.0

    def test_divergence_raises_numeric_error(self):
        cfg = quick_cfg(mode="naive_dense")
        model = Model([2, 3, 2], cfg, np.random.default_rng(5))
        model.layers[0].weight.data[0, 0] = np.nan
        with pytest.raises(NumericError):
            total_loss(model, np.ones((2, 2)), np.zeros(2, dtype=np.int64),
                       rng=None, sample=False)

    def test_move_layer_divergence_names_layer(self):
        cfg = quick_cfg()
        model = Model([2, 3, 2], cfg, np.random.default_rng(6))
        model.layers[0].experts[0].posterior.mu.data[:] = np.nan
        with pytest.raises(NumericError, match="l0"):
            total_loss(model, np.ones((2, 2)), np.zeros(2, dtype=np.int64),
                       np.random.default_rng(7))

    def test_label_bounds_checked(self):
        stream = make_synthetic_stream(n_tasks=1, n_per_task=20, seed=0)
        stream.tasks[0].train.labels[0] = 7
        with pytest.raises(ValueError, match="head"):
            run_continual(stream, [2, 4, 2], quick_cfg(epochs=0))


class TestTrainTask:
    def test_zero_epochs_leaves_model_unchanged(self):
        cfg = quick_cfg(epochs=0)
        model = Model([2, 4, 2], cfg, np.random.default_rng(8))
        before = {k: v.copy() for k, v in model.state_arrays().items()}
        stream = make_synthetic_stream(n_tasks=1, n_per_task=64, seed=1)
        records = train_task(model, stream.tasks[0].train, cfg,
                             Adam(model.parameters(), 1e-3),
                             np.random.default_rng(9), np.random.default_rng(10))
        assert records == []
        for k, v in model.state_arrays().items():
            assert np.array_equal(v, before[k])

    def test_fixed_seed_bit_identical_parameters(self):
        stream = make_synthetic_stream(n_tasks=2, n_per_task=64, seed=2)
        results = []
        for _ in range(2):
            res = run_continual(stream, [2, 4, 2], quick_cfg(seed=7))
            results.append(res.model.state_arrays())
        for k in results[0]:
            assert np.array_equal(results[0][k], results[1][k]), k

    def test_records_carry_losses_and_loads(self):
        stream = make_synthetic_stream(n_tasks=1, n_per_task=64, seed=3)
        res = run_continual(stream, [2, 4, 2], quick_cfg(epochs=2))
        assert len(res.records) == 2
        for rec in res.records:
            assert {"task", "epoch", "loss", "nll", "gating_kl", "weight_kl",
                    "entropy_cost", "dpp_diversity"} <= set(rec)
            load_keys = [k for k in rec if k.startswith("load_")]
            assert load_keys
            total = sum(rec[k] for k in load_keys if k.startswith("load_l0"))
            assert total == pytest.approx(1.0)


class TestAdvanceTask:
    def test_kl_terms_zero_after_advance(self):
        stream = make_synthetic_stream(n_tasks=1, n_per_task=64, seed=4)
        res = run_continual(stream, [2, 4, 2], quick_cfg(epochs=2))
        model = res.model  # advance_task ran after the last task
        x = np.random.default_rng(11).standard_normal((32, 2))
        _, parts = total_loss(model, x, np.zeros(32, dtype=np.int64),
                              np.random.default_rng(12))
        assert parts["gating_kl"] == 0.0
        assert parts["weight_kl"] == 0.0

    def test_utility_unchanged_by_advance(self):
        cfg = quick_cfg()
        model = Model([2, 4, 2], cfg, np.random.default_rng(13))
        x = np.random.default_rng(14).standard_normal((16, 2))
        y = np.zeros(16, dtype=np.int64)
        _, before = total_loss(model, x, y, rng=None, sample=False)
        advance_task(model, Adam(model.parameters(), 1e-3))
        _, after = total_loss(model, x, y, rng=None, sample=False)
        assert before["nll"] == after["nll"]

    def test_double_advance_idempotent_on_priors(self):
        cfg = quick_cfg()
        model = Model([2, 4, 2], cfg, np.random.default_rng(15))
        opt = Adam(model.parameters(), 1e-3)
        advance_task(model, opt)
        first = {k: v.copy() for k, v in model.state_arrays().items()}
        advance_task(model, opt)
        for k, v in model.state_arrays().items():
            assert np.array_equal(v, first[k]), k

    def test_kls_positive_after_one_further_step(self):
        stream = make_synthetic_stream(n_tasks=1, n_per_task=64, seed=5)
        cfg = quick_cfg(epochs=1)
        res = run_continual(stream, [2, 4, 2], cfg)
        model = res.model
        opt = Adam(model.parameters(), 1e-2)
        task = stream.tasks[0].train
        with model.tape:
            loss, _ = total_loss(model, task.inputs, task.labels,
                                 np.random.default_rng(16))
        opt.zero_grad()
        backward(loss)
        opt.step()
        _, parts = total_loss(model, task.inputs, task.labels,
                              np.random.default_rng(17))
        assert parts["gating_kl"] > 0.0
        assert parts["weight_kl"] > 0.0


class TestEvaluate:
    def test_untrained_balanced_binary_near_chance(self):
        accs = []
        for seed in range(10):
            stream = make_synthetic_stream(n_tasks=1, n_per_task=400, seed=seed)
            cfg = quick_cfg(seed=seed)
            model = Model([2, 4, 2], cfg, np.random.default_rng(seed))
            accs.append(evaluate_accuracy(model, stream.tasks[0].test))
        assert 0.35 <= np.mean(accs) <= 0.65

    def test_single_task_stream_gives_1x1_matrix(self):
        stream = make_synthetic_stream(n_tasks=1, n_per_task=64, seed=6)
        res = run_continual(stream, [2, 4, 2], quick_cfg(epochs=1))
        assert res.matrix.grid.shape == (1, 1)
        assert res.matrix.is_complete()

    def test_empty_heldout_rejected(self):
        stream = make_synthetic_stream(n_tasks=1, n_per_task=64, seed=7)
        cfg = quick_cfg()
        model = Model([2, 4, 2], cfg, np.random.default_rng(18))
        empty = stream.tasks[0].test.subset(np.zeros(0, dtype=np.intp))
        with pytest.raises(ValueError):
            evaluate_accuracy(model, empty)

    def test_inference_path_has_no_task_parameter(self):
        """Task-agnostic inference is an interface property."""
        for fn in (Model.predict, evaluate_accuracy):
            assert "task" not in " ".join(inspect.signature(fn).parameters)


class TestForgettingMetrics:
    def test_constant_matrix(self):
        grid = np.full((3, 3), np.nan)
        for t in range(3):
            grid[t, :t + 1] = 0.8
        acc, forgetting = forgetting_metrics(grid)
        assert acc == pytest.approx(0.8)
        assert forgetting == 0.0

    def test_hand_example(self):
        grid = np.array([[0.9, np.nan], [0.5, 0.9]])
        acc, forgetting = forgetting_metrics(grid)
        assert acc == pytest.approx(0.7)
        assert forgetting == pytest.approx(0.4)

    def test_task_relabeling_keeps_acc(self):
        rng = np.random.default_rng(19)
        n = 4
        grid = np.full((n, n), np.nan)
        for t in range(n):
            grid[t, :t + 1] = rng.uniform(0.5, 1.0, size=t + 1)
        acc, _ = forgetting_metrics(grid)
        perm = rng.permutation(n)
        permuted = grid.copy()
        permuted[n - 1, :] = grid[n - 1, perm]
        acc2, _ = forgetting_metrics(permuted)
        assert acc2 == pytest.approx(acc)

    def test_incomplete_matrix_rejected(self):
        grid = np.full((2, 2), np.nan)
        grid[0, 0] = 0.9
        with pytest.raises(ValueError):
            forgetting_metrics(grid)

    def test_matrix_row_validation(self):
        m = AccuracyMatrix(3)
        with pytest.raises(ValueError):
            m.set_row(1, [0.5])  # wrong length
        with pytest.raises(ValueError):
            m.set_row(0, [1.5])  # out of range


class TestRigidityLimit:
    def test_huge_kl_weights_freeze_parameters(self):
        """With enormous KL weights after task 1, task 2 barely moves anything."""
        stream = make_synthetic_stream(n_tasks=2, n_per_task=128,
                                       separation=10.0, seed=8)
        cfg = TrainConfig(epochs=8, batch_size=64, learning_rate=1e-4, seed=3)
        init_ss, sample_ss, shuffle_ss = np.random.SeedSequence(cfg.seed).spawn(3)
        model = Model([2, 8, 2], cfg, np.random.default_rng(init_ss))
        opt = Adam(model.parameters(), cfg.learning_rate)
        sample_rng = np.random.default_rng(sample_ss)
        shuffle_rng = np.random.default_rng(shuffle_ss)

        train_task(model, stream.tasks[0].train, cfg, opt, shuffle_rng,
                   sample_rng, task_index=0)
        acc_before = evaluate_accuracy(model, stream.tasks[0].test)
        advance_task(model, opt)
        for layer in model.move_layers():
            layer.gating_kl_weight = 1e6
            layer.weight_kl_weight = 1e6
        records = train_task(model, stream.tasks[1].train, cfg, opt,
                             shuffle_rng, sample_rng, task_index=1)
        acc_after = evaluate_accuracy(model, stream.tasks[0].test)

        assert records[-1]["gating_kl"] + records[-1]["weight_kl"] <= 1e-3
        assert acc_before - acc_after <= 0.01


class TestBaselines:
    def test_offline_upper_bounds_naive(self):
        """Joint retraining beats sequential naive training, seed-averaged."""
        gaps = []
        for seed in range(3):
            stream = make_synthetic_stream(n_tasks=3, n_per_task=128,
                                           separation=10.0, seed=seed)
            cfg = TrainConfig(epochs=30, batch_size=64, learning_rate=1e-2,
                              seed=seed, mode="naive_dense")
            naive = run_continual(stream, [2, 16, 2], cfg)
            offline = offline_oracle_baseline(stream, [2, 16, 2], cfg)
            gaps.append(offline.metrics()[0] - naive.metrics()[0])
        assert np.mean(gaps) >= 0.0

    def test_offline_single_task_equals_plain_training(self):
        stream = make_synthetic_stream(n_tasks=1, n_per_task=64, seed=9)
        cfg = TrainConfig(epochs=2, batch_size=64, seed=4, mode="offline_oracle")
        res = run_continual(stream, [2, 4, 2], cfg)
        assert res.matrix.grid.shape == (1, 1)
        assert res.matrix.is_complete()

    def test_offline_deterministic(self):
        stream = make_synthetic_stream(n_tasks=2, n_per_task=64, seed=10)
        cfg = TrainConfig(epochs=2, batch_size=64, seed=5, mode="offline_oracle")
        a = run_continual(stream, [2, 4, 2], cfg)
        b = run_continual(stream, [2, 4, 2], cfg)
        assert np.array_equal(a.matrix.grid, b.matrix.grid, equal_nan=True)


class TestReproducibility:
    def test_seed_and_config_determine_matrix_bits(self):
        stream = make_synthetic_stream(n_tasks=2, n_per_task=64, seed=11)
        cfg = quick_cfg(seed=21, epochs=2)
        a = run_continual(stream, [2, 4, 2], cfg)
        b = run_continual(stream, [2, 4, 2], cfg)
        assert np.array_equal(a.matrix.grid, b.matrix.grid, equal_nan=True)

    def test_different_seeds_differ(self):
        stream = make_synthetic_stream(n_tasks=2, n_per_task=64, seed=12)
        a = run_continual(stream, [2, 4, 2], quick_cfg(seed=1, epochs=2))
        b = run_continual(stream, [2, 4, 2], quick_cfg(seed=2, epochs=2))
        assert not np.array_equal(
            a.model.state_arrays()["layers.00.gating.weight"],
            b.model.state_arrays()["layers.00.gating.weight"])
