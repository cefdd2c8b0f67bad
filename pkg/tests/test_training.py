import math

import numpy as np
import pytest

from vigil.data import SyntheticSpec, generate_synthetic
from vigil.errors import DataFormatError
from vigil.models import drowsy_config, forward, init_params, named_parameters
from vigil.tensor import Tape, Tensor, grad_check, tsum
from vigil.training import (
    Adam,
    SGD,
    EpochMetrics,
    RunMetrics,
    TrainConfig,
    accuracy,
    cross_entropy,
    evaluate,
    overfit_report,
    read_metrics_csv,
    train,
    train_test_split,
    write_metrics_csv,
)


def tiny_model(seed=0):
    config = drowsy_config(seq_len=4, height=16, width=16, d_model=16, heads=2,
                           depth=1, seed=seed)
    return config, init_params(config)


def tiny_clips(num_classes=2, per_class=4, noise=0.02, seed=0, **spec_over):
    spec = SyntheticSpec(num_classes=num_classes, clips_per_class=per_class,
                         seq_len=4, height=16, width=16, noise_sigma=noise, **spec_over)
    return generate_synthetic(spec, seed=seed)


class TestCrossEntropy:
    def test_certain_prediction_zero_loss(self):
        probs = Tensor(np.array([0.0, 1.0, 0.0]))
        assert float(cross_entropy(probs, 1).data) == 0.0

    def test_uniform_nine_classes(self):
        probs = Tensor(np.full(9, 1.0 / 9.0))
        assert abs(float(cross_entropy(probs, 4).data) - math.log(9)) <= 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor(np.full(3, 1 / 3)), 3)

    def test_gradient_wrt_logits_is_probs_minus_onehot(self):
        from vigil.tensor import softmax

        rng = np.random.default_rng(0)
        logits = Tensor(rng.standard_normal(5), requires_grad=True)
        label = 2
        with Tape() as tape:
            loss = cross_entropy(softmax(logits), label)
        tape.backward(loss)
        probs = np.exp(logits.data - logits.data.max())
        probs /= probs.sum()
        onehot = np.eye(5)[label]
        assert np.max(np.abs(logits.grad - (probs - onehot))) <= 1e-10

        err = grad_check(lambda: cross_entropy(softmax(logits), label), [logits], samples=5)
        assert err <= 1e-6

    def test_zero_probability_clamped(self):
        probs = Tensor(np.array([1.0, 0.0]))
        loss = float(cross_entropy(probs, 1).data)
        assert loss == pytest.approx(-math.log(1e-12))


class TestOptimizers:
    def test_sgd_lr_zero_is_identity(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p.grad = np.array([5.0, -3.0])
        SGD({"p": p}, lr=0.0).step()
        assert np.array_equal(p.data, [1.0, 2.0])

    def test_sgd_quadratic_step(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        with Tape() as tape:
            loss = tsum(p * p) * 0.5
        tape.backward(loss)
        SGD({"p": p}, lr=0.1).step()
        assert np.allclose(p.data, [0.9], atol=1e-15)

    def test_adam_converges_on_quadratic(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.05)
        for _ in range(500):
            opt.zero_grad()
            with Tape() as tape:
                loss = tsum(p * p) * 0.5
            tape.backward(loss)
            opt.step()
        assert abs(float(p.data[0])) < 1e-3

    def test_missing_grad_raises(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(ValueError, match="no gradient"):
            SGD({"p": p}, lr=0.1).step()
        with pytest.raises(ValueError, match="no gradient"):
            Adam({"p": p}, lr=0.1).step()

    def test_single_step_decreases_loss_for_small_lr(self):
        config, params = tiny_model()
        clips = tiny_clips(per_class=2)
        named = named_parameters(params)

        def batch_loss():
            total = None
            for clip in clips:
                loss = cross_entropy(forward(params, config, clip), clip.label)
                total = loss if total is None else total + loss
            return total * (1.0 / len(clips))

        with Tape() as tape:
            before = batch_loss()
        tape.backward(before)
        SGD(named, lr=1e-4).step()
        after = batch_loss()
        assert float(after.data) < float(before.data)


class TestSplit:
    def test_ten_clips_split_8_2(self):
        clips = list(range(10))
        train_set, test_set = train_test_split(clips, fraction=0.8, seed=1)
        assert len(train_set) == 8 and len(test_set) == 2

    def test_same_seed_same_split(self):
        clips = list(range(25))
        a = train_test_split(clips, seed=7)
        b = train_test_split(clips, seed=7)
        assert a == b

    def test_partition_property(self):
        rng = np.random.default_rng(3)
        for trial in range(100):
            n = int(rng.integers(2, 40))
            clips = list(range(n))
            train_set, test_set = train_test_split(clips, fraction=0.8, seed=trial)
            assert sorted(train_set + test_set) == clips
            assert set(train_set).isdisjoint(test_set)
            assert len(train_set) == math.ceil(0.8 * n)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            train_test_split([], seed=0)


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy([1, 0, 2], [1, 0, 2]) == 1.0

    def test_three_of_four(self):
        assert accuracy([1, 0, 2, 2], [1, 0, 2, 1]) == 0.75

    def test_matches_counting_loop(self):
        rng = np.random.default_rng(4)
        preds = rng.integers(0, 4, size=50).tolist()
        labels = rng.integers(0, 4, size=50).tolist()
        count = 0
        for p, l in zip(preds, labels):
            if p == l:
                count += 1
        assert accuracy(preds, labels) == count / 50

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            accuracy([1], [1, 2])


class TestMetricsCsv:
    def test_roundtrip_fixpoint(self, tmp_path):
        metrics = RunMetrics()
        metrics.append(EpochMetrics(1, 0.69314718055994531, 0.7, 0.5, 0.5, 123.456))
        metrics.append(EpochMetrics(2, 0.5123456789123, 0.81234567891234, 0.75, 0.5, 130.9))
        p1 = tmp_path / "m1.csv"
        write_metrics_csv(p1, metrics)
        loaded = read_metrics_csv(p1)
        p2 = tmp_path / "m2.csv"
        write_metrics_csv(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        assert read_metrics_csv(p2) == loaded

    def test_header_is_pinned(self, tmp_path):
        p = tmp_path / "m.csv"
        write_metrics_csv(p, RunMetrics())
        assert p.read_text() == "epoch,train_loss,val_loss,train_acc,val_acc,wall_ms\n"

    def test_bad_header_rejected(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("epoch,oops\n")
        with pytest.raises(DataFormatError):
            read_metrics_csv(p)


class TestOverfitReport:
    def curve(self, train_losses, val_losses):
        m = RunMetrics()
        for i, (t, v) in enumerate(zip(train_losses, val_losses), start=1):
            m.append(EpochMetrics(i, t, v, 0.5, 0.5, 0.0))
        return m

    def test_identical_curves_not_overfitting(self):
        m = self.curve([0.5, 0.4, 0.3, 0.2], [0.5, 0.4, 0.3, 0.2])
        assert not overfit_report(m).overfitting

    def test_classic_signature_flagged(self):
        m = self.curve([0.5, 0.3, 0.1, 0.05], [0.5, 0.52, 0.6, 0.7])
        assert overfit_report(m).overfitting

    def test_gap_without_drift_not_flagged(self):
        # val above train throughout, but flat at its minimum
        m = self.curve([0.3, 0.2, 0.1, 0.05], [0.4, 0.4, 0.4, 0.4])
        assert not overfit_report(m).overfitting

    def test_drift_boundary_exactly_5_percent_not_flagged(self):
        m = self.curve([0.3, 0.2, 0.1, 0.05], [0.4, 0.42, 0.41, 0.42])
        assert not overfit_report(m).overfitting  # 0.42 == 1.05 * 0.40

    def test_drift_just_above_5_percent_flagged(self):
        m = self.curve([0.3, 0.2, 0.1, 0.05], [0.4, 0.42, 0.41, 0.4201])
        assert overfit_report(m).overfitting

    def test_gap_must_cover_final_half(self):
        # final-half gap broken in the last epoch
        m = self.curve([0.3, 0.2, 0.1, 0.05], [0.4, 0.42, 0.43, 0.04])
        assert not overfit_report(m).overfitting

    def test_too_few_epochs_rejected(self):
        m = self.curve([0.3, 0.2], [0.4, 0.5])
        with pytest.raises(ValueError):
            overfit_report(m)


class TestTrainLoop:
    def test_lr_zero_keeps_val_metrics_constant(self):
        config, params = tiny_model()
        clips = tiny_clips()
        train_set, val_set = clips[:6], clips[6:]
        tcfg = TrainConfig(epochs=3, batch_size=4, learning_rate=0.0, optimizer="sgd", seed=1)
        metrics = train(params, config, train_set, val_set, tcfg)
        vals = [(e.val_loss, e.val_acc) for e in metrics.epochs]
        assert vals[0] == vals[1] == vals[2]

    def test_separable_set_overfits_to_perfect_train_accuracy(self):
        config, params = tiny_model(seed=3)
        clips = tiny_clips(per_class=4, noise=0.0, seed=2)
        tcfg = TrainConfig(epochs=200, batch_size=4, learning_rate=1e-3, seed=3)
        metrics = train(
            params, config, clips, clips, tcfg, stop_fn=lambda row: row.train_acc == 1.0
        )
        assert metrics.epochs[-1].train_acc == 1.0
        assert len(metrics.epochs) <= 200

    def test_bitwise_reproducible(self):
        clips = tiny_clips()
        train_set, val_set = clips[:6], clips[6:]
        tcfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3, seed=9)

        def run():
            config, params = tiny_model(seed=5)
            metrics = train(params, config, train_set, val_set, tcfg)
            return named_parameters(params), metrics

        p1, m1 = run()
        p2, m2 = run()
        for (n1, t1), (n2, t2) in zip(p1.items(), p2.items()):
            assert n1 == n2 and np.array_equal(t1.data, t2.data)
        for e1, e2 in zip(m1.epochs, m2.epochs):
            assert (e1.train_loss, e1.val_loss, e1.train_acc, e1.val_acc) == (
                e2.train_loss, e2.val_loss, e2.train_acc, e2.val_acc)

    def test_evaluate_thread_count_does_not_change_results(self):
        config, params = tiny_model(seed=1)
        clips = tiny_clips(per_class=3)
        r1 = evaluate(params, config, clips, threads=1)
        r4 = evaluate(params, config, clips, threads=4)
        assert r1 == r4
