"""Optimizer, loss, metrics, and the multi-round training protocol."""

import numpy as np
import pytest

import dbnet.tensor as T
from dbnet.data import apply_standardizer, fit_standardizer, split_trials, synthesize
from dbnet.model import DbNetConfig, DualBranchModel
from dbnet.tensor import Tensor
from dbnet.training import (
    Adam,
    EvalReport,
    TrainConfig,
    accuracy_pa,
    confusion_matrix,
    cross_entropy,
    evaluate,
    kappa,
    train,
    write_history_csv,
)

from gradcheck import check_op


def tiny_model(classes=2, dropout=0.25, seed=0):
    cfg = DbNetConfig(n_channels=4, n_samples=256, n_classes=classes,
                      temporal_filters=2, temporal_kernel=48,
                      spectral_filters=4, spectral_kernel=48,
                      depth_multiplier=2, window_count=3, window_stride=1,
                      dcc_layers=2, dcc_kernel=3, dropout=dropout)
    return DualBranchModel(cfg, seed=seed)


def standardized_synthetic(classes=2, per_class=30, seed=0):
    ts = synthesize(classes, per_class, 4, 256, seed=seed)
    tr, ev = split_trials(ts, 0.33, seed=seed)
    std = fit_standardizer(tr)
    return apply_standardizer(std, tr), apply_standardizer(std, ev)


class TestCrossEntropy:
    def test_certain_correct_prediction_costs_nothing(self):
        probs = Tensor(np.array([[1.0, 0.0, 0.0]], dtype=np.float32))
        assert float(cross_entropy(probs, [0]).data) == 0.0

    def test_uniform_four_way(self):
        probs = Tensor(np.full((2, 4), 0.25, dtype=np.float32))
        loss = float(cross_entropy(probs, [1, 3]).data)
        assert loss == pytest.approx(np.log(4.0), rel=1e-6)

    def test_matches_per_sample_loop(self):
        rng = np.random.default_rng(0)
        raw = rng.uniform(0.05, 1.0, size=(16, 5))
        probs = raw / raw.sum(axis=1, keepdims=True)
        labels = rng.integers(0, 5, size=16)
        loss = float(cross_entropy(Tensor(probs.astype(np.float32)), labels).data)
        expect = -np.mean([np.log(probs[i, labels[i]]) for i in range(16)])
        assert loss == pytest.approx(expect, rel=1e-5)

    def test_label_out_of_range(self):
        probs = Tensor(np.full((2, 3), 1 / 3, dtype=np.float32))
        with pytest.raises(ValueError, match="labels must lie in"):
            cross_entropy(probs, [0, 3])
        with pytest.raises(ValueError, match="labels must lie in"):
            cross_entropy(probs, [-1, 0])

    def test_floor_prevents_log_of_zero(self):
        probs = Tensor(np.array([[0.0, 1.0]], dtype=np.float32))
        loss = float(cross_entropy(probs, [0]).data)
        assert np.isfinite(loss) and loss == pytest.approx(-np.log(1e-12))

    def test_gradient_through_softmax(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        labels = np.array([0, 2, 1, 2])
        worst = check_op(lambda: cross_entropy(T.softmax(logits, axis=1), labels),
                         [logits], eps=1e-5)
        assert worst < 1e-6


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(2, dtype=np.float32)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_signed_learning_rate(self):
        p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        opt = Adam([p], lr=0.01)
        p.grad = np.array([3.0, -0.5, 1e-4], dtype=np.float32)
        opt.step()
        np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-3)

    def test_three_steps_match_hand_iteration(self):
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        g = np.array([0.7, -1.3])
        theta = np.zeros(2)
        m = np.zeros(2)
        v = np.zeros(2)
        for t in range(1, 4):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        p = Tensor(np.zeros(2, dtype=np.float64), requires_grad=True)
        opt = Adam([p], lr=lr)
        for _ in range(3):
            p.grad = g.copy()
            opt.step()
        np.testing.assert_allclose(p.data, theta, atol=1e-10)

    def test_accepts_named_parameter_pairs(self):
        p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        opt = Adam([("w", p)], lr=0.1)
        p.grad = np.ones(2, dtype=np.float32)
        opt.step()
        assert p.data[0] != 1.0


class TestMetrics:
    def test_perfect_diagonal(self):
        assert accuracy_pa(np.diag([5, 9, 2])) == 1.0

    def test_mean_per_class_recall(self):
        assert accuracy_pa(np.array([[9, 1], [5, 5]])) == pytest.approx(0.7)

    def test_balanced_classes_match_plain_accuracy(self):
        rng = np.random.default_rng(0)
        true = np.repeat(np.arange(4), 25)
        pred = rng.integers(0, 4, size=100)
        conf = confusion_matrix(true, pred, 4)
        assert accuracy_pa(conf) == pytest.approx((true == pred).mean())

    def test_unrepresented_class_rejected(self):
        with pytest.raises(ValueError, match="without trials"):
            accuracy_pa(np.array([[3, 0], [0, 0]]))

    def test_confusion_row_sums_are_class_counts(self):
        true = [0, 0, 1, 2, 2, 2]
        conf = confusion_matrix(true, [0, 1, 1, 2, 0, 2], 3)
        np.testing.assert_array_equal(conf.sum(axis=1), [2, 1, 3])
        assert conf.sum() == 6

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            confusion_matrix([0, 1], [0], 2)

    def test_kappa_four_class_published_pair(self):
        k = kappa(0.8587, 4)
        assert k == pytest.approx(0.8116, abs=5e-5)
        assert abs(k - 0.8115) <= 5e-4

    def test_kappa_two_class_published_pair(self):
        k = kappa(0.9160, 2)
        assert k == pytest.approx(0.8320, abs=5e-5)
        assert abs(k - 0.8318) <= 5e-4

    def test_kappa_at_chance_is_zero(self):
        assert kappa(0.25, 4) == 0.0
        assert kappa(0.5, 2) == 0.0

    def test_kappa_input_validation(self):
        with pytest.raises(ValueError, match="classes"):
            kappa(0.5, 1)
        with pytest.raises(ValueError, match="lie in"):
            kappa(1.2, 4)

    def test_evaluate_uniform_model(self):
        model = tiny_model()
        model.classifier.weight.data[:] = 0.0
        model.classifier.bias.data[:] = 0.0
        ts = synthesize(2, 4, 4, 256, seed=0)
        report = evaluate(model, ts)
        # uniform probabilities always pick class 0
        assert report.confusion[:, 0].sum() == ts.m
        assert report.p_a == pytest.approx(0.5)
        assert report.kappa == pytest.approx(0.0)


class TestTrainConfig:
    def test_zero_patience_disallowed(self):
        with pytest.raises(ValueError, match="patience"):
            TrainConfig(early_stop_patience=0)

    def test_patience_beyond_epochs_disallowed(self):
        with pytest.raises(ValueError, match="patience"):
            TrainConfig(max_epochs=10, early_stop_patience=11)

    def test_positive_fields(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(rounds=0)


class TestTrain:
    def test_empty_training_set_rejected(self):
        model = tiny_model()
        tr, ev = standardized_synthetic()
        empty = tr.subset([])
        cfg = TrainConfig(max_epochs=1, early_stop_patience=1, rounds=1)
        with pytest.raises(ValueError, match="empty"):
            train(model, empty, ev, cfg)

    def test_class_count_mismatch_rejected(self):
        model = tiny_model(classes=3)
        tr, ev = standardized_synthetic(classes=2)
        cfg = TrainConfig(max_epochs=1, early_stop_patience=1, rounds=1)
        with pytest.raises(ValueError, match="classes"):
            train(model, tr, ev, cfg)

    def test_fixed_seed_reproduces_trajectory(self):
        tr, ev = standardized_synthetic(per_class=8)
        cfg = TrainConfig(learning_rate=0.002, batch_size=8, max_epochs=3,
                          early_stop_patience=3, rounds=2, seed=11)
        runs = []
        for _ in range(2):
            model = tiny_model()
            runs.append(train(model, tr, ev, cfg))
        a, b = runs
        assert a.best_round == b.best_round
        for ra, rb in zip(a.history, b.history):
            assert (ra.train_loss, ra.eval_loss, ra.eval_pa) == (rb.train_loss, rb.eval_loss, rb.eval_pa)
        np.testing.assert_array_equal(a.report.confusion, b.report.confusion)

    def test_learns_the_separable_task(self):
        tr, ev = standardized_synthetic(per_class=30)
        cfg = TrainConfig(learning_rate=0.002, batch_size=16, max_epochs=30,
                          early_stop_patience=30, rounds=1, seed=1)
        model = tiny_model()
        result = train(model, tr, ev, cfg)
        train_report = evaluate(model, tr)
        assert train_report.p_a > 0.95
        assert result.report.p_a > 0.85

    def test_best_epoch_weights_are_restored(self):
        tr, ev = standardized_synthetic(per_class=6)
        cfg = TrainConfig(learning_rate=0.01, batch_size=8, max_epochs=6,
                          early_stop_patience=2, rounds=1, seed=3)
        model = tiny_model()
        result = train(model, tr, ev, cfg)
        rnd = result.rounds[0]
        losses = [row.eval_loss for row in result.history]
        assert rnd.best_epoch == int(np.argmin(losses))
        # restored weights must reproduce the best monitored loss
        probs = model.predict(ev.trials)
        floored = np.maximum(probs[np.arange(ev.m), ev.labels], 1e-12)
        assert -np.log(floored).mean() == pytest.approx(min(losses), rel=1e-5)

    def test_early_stop_cuts_the_round_short(self):
        tr, ev = standardized_synthetic(per_class=6)
        cfg = TrainConfig(learning_rate=0.05, batch_size=8, max_epochs=50,
                          early_stop_patience=2, rounds=1, seed=0)
        model = tiny_model()
        result = train(model, tr, ev, cfg)
        rnd = result.rounds[0]
        if rnd.epochs_run < 50:
            assert rnd.epochs_run - 1 - rnd.best_epoch >= 2

    def test_best_round_selected_by_eval_accuracy(self):
        tr, ev = standardized_synthetic(per_class=8)
        cfg = TrainConfig(learning_rate=0.002, batch_size=8, max_epochs=4,
                          early_stop_patience=4, rounds=3, seed=2)
        model = tiny_model()
        result = train(model, tr, ev, cfg)
        accs = [r.eval_pa for r in result.rounds]
        assert result.rounds[result.best_round].eval_pa == max(accs)
        assert result.report.p_a == pytest.approx(max(accs), abs=1e-6)

    def test_history_csv_round_trips(self, tmp_path):
        tr, ev = standardized_synthetic(per_class=4)
        cfg = TrainConfig(batch_size=8, max_epochs=2, early_stop_patience=2, rounds=1)
        model = tiny_model()
        result = train(model, tr, ev, cfg)
        path = tmp_path / "history.csv"
        write_history_csv(result.history, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,eval_loss,eval_pa"
        assert len(lines) == len(result.history) + 1
        first = lines[1].split(",")
        assert int(first[0]) == 0
        assert float(first[1]) == pytest.approx(result.history[0].train_loss, abs=1e-6)
