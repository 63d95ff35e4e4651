"""
Tests for targets, losses, the optimiser, the plateau schedule and the epoch loop.
"""

import math

import numpy as np
import pytest

import numerics as nx
from conftest import make_video, mark_bn_trained, tiny_model_config
from dataset import AnnotationTrack
from model import TimestepPrediction, encode, heads_forward, init_params
from numerics import ComputationRecord, Tensor
from postprocess import decode
from training import (
    NonFiniteLossError,
    PlateauScheduler,
    TrainConfig,
    batch_loss,
    focal_loss,
    make_targets,
    pad_batch,
    plateau_scheduler,
    regression_loss,
    sgd_step,
    total_loss,
    train,
)


class TestMakeTargets:
    """Tests for make_targets."""

    def test_labels_and_offsets(self):
        """Segment [2, 6] on centers {1,3,5,7} labels the middle two; at t=3 offsets are (1, 3)."""
        targets = make_targets(AnnotationTrack("v", "smile", [(2.0, 6.0)]), np.array([1.0, 3.0, 5.0, 7.0]))
        np.testing.assert_array_equal(targets.labels, [0, 1, 1, 0])
        np.testing.assert_array_equal(targets.offsets[1], [1.0, 3.0])
        np.testing.assert_array_equal(targets.regression_mask, [False, True, True, False])

    def test_no_segments(self):
        """An empty track gives all-zero labels and no regression."""
        targets = make_targets(AnnotationTrack("v", "smile", []), np.array([1.0, 3.0]))
        assert not targets.labels.any()
        assert not targets.regression_mask.any()

    def test_empty_grid_rejected(self):
        """A grid without timesteps is an error."""
        with pytest.raises(ValueError):
            make_targets(AnnotationTrack("v", "smile", []), np.array([]))

    def test_decode_round_trip_on_random_tracks(self):
        """Decoding the targets at every labelled step reproduces the enclosing segment exactly."""
        rng = np.random.default_rng(0)
        grid = np.arange(1.0, 40.0, 2.0)
        duration = 40.0
        for _ in range(1000):
            count = int(rng.integers(1, 4))
            segments = []
            for _ in range(count):
                start = rng.integers(0, 38 * 64) / 64.0
                end = start + rng.integers(1, 12 * 64) / 64.0
                segments.append((float(start), float(min(end, duration))))
            track = AnnotationTrack("v", "smile", segments)
            targets = make_targets(track, grid)
            for t, label, (d_s, d_e) in zip(grid, targets.labels, targets.offsets):
                if not label:
                    continue
                (segment,) = decode([TimestepPrediction(d_s, d_e, 1.0)], np.array([t]), duration_s=duration)
                assert (segment.start_s, segment.end_s) in track.segments


class TestFocalLoss:
    """Tests for focal_loss."""

    def test_reduces_to_cross_entropy(self):
        """gamma 0 with alpha disabled equals mean cross-entropy."""
        p = np.array([0.2, 0.7, 0.9, 0.4])
        labels = np.array([0, 1, 1, 0])
        expected = -np.mean(np.log(np.where(labels == 1, p, 1 - p)))
        loss = focal_loss(Tensor(p), labels, alpha=None, gamma=0.0)
        assert loss.item() == pytest.approx(expected, abs=1e-9)

    def test_single_positive(self):
        """p = 0.5 positive with gamma 2, alpha_t 1 gives 0.25 ln 2."""
        loss = focal_loss(Tensor([0.5]), np.array([1]), alpha=None, gamma=2.0)
        assert loss.item() == pytest.approx(0.25 * math.log(2), abs=1e-5)

    def test_confident_correct_predictions_cost_nothing(self):
        """p_true -> 1 drives the loss to ~0."""
        loss = focal_loss(Tensor([1.0, 0.0]), np.array([1, 0]))
        assert loss.item() < 1e-12

    def test_alpha_weights_classes(self):
        """Positives are weighted by alpha and negatives by 1 - alpha."""
        positive = focal_loss(Tensor([0.5]), np.array([1]), alpha=0.25, gamma=0.0).item()
        negative = focal_loss(Tensor([0.5]), np.array([0]), alpha=0.25, gamma=0.0).item()
        assert positive == pytest.approx(0.25 * math.log(2))
        assert negative == pytest.approx(0.75 * math.log(2))

    def test_decreases_as_true_probability_grows(self):
        """For a positive label the loss strictly decreases in p."""
        losses = [focal_loss(Tensor([p]), np.array([1])).item() for p in (0.1, 0.3, 0.5, 0.7, 0.9)]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_invalid_steps_are_ignored(self):
        """Masked-off steps do not change the loss."""
        loss = focal_loss(Tensor([0.5, 0.01]), np.array([1, 1]), alpha=None, gamma=2.0, valid=np.array([True, False]))
        assert loss.item() == pytest.approx(0.25 * math.log(2), abs=1e-5)


class TestRegressionLoss:
    """Tests for regression_loss."""

    def test_exact_prediction(self):
        """pred == target gives 0."""
        offsets = np.array([[1.0, 2.0], [0.5, 0.5]])
        assert regression_loss(Tensor(offsets), offsets, np.array([True, True])).item() == 0.0

    def test_hand_example(self):
        """pred (1,1) vs target (0,3) on one step gives 2.5."""
        loss = regression_loss(Tensor([[1.0, 1.0], [9.0, 9.0]]), np.array([[0.0, 3.0], [0.0, 0.0]]), np.array([True, False]))
        assert loss.item() == 2.5

    def test_empty_mask_is_zero_with_zero_gradient(self):
        """No masked-on steps means zero loss and zero gradient."""
        pred = Tensor(np.ones((3, 2)), requires_grad=True)
        loss = regression_loss(pred, np.zeros((3, 2)), np.zeros(3, dtype=bool))
        assert loss.item() == 0.0
        loss.backward([pred])
        np.testing.assert_array_equal(pred.grad, np.zeros((3, 2)))

    def test_shape_mismatch(self):
        """Predictions and targets must have the same shape."""
        with pytest.raises(nx.ShapeError):
            regression_loss(Tensor(np.ones((2, 2))), np.ones((3, 2)), np.ones(2, dtype=bool))


class TestTotalLoss:
    """Tests for total_loss."""

    def test_weighted_sum(self):
        """(0.5, 0.25, 1.0) -> 0.75 and weight 0 drops the regression term."""
        assert total_loss(Tensor(0.5), Tensor(0.25), 1.0).item() == 0.75
        assert total_loss(Tensor(0.5), Tensor(0.25), 0.0).item() == 0.5

    def test_gradient_is_sum_of_parts(self):
        """The total's gradient is the sum of both constituents' gradients."""
        p = Tensor(np.array([[0.3, 0.6], [0.8, 0.1]]), requires_grad=True)
        cls = focal_loss(nx.take(p, (slice(None), 0)), np.array([1, 0]))
        reg = regression_loss(p, np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([True, True]))
        total = total_loss(cls, reg)
        combined = total.backward([p])[p].copy()
        cls_grad = cls.backward([p])[p].copy()
        reg_grad = reg.backward([p])[p].copy()
        np.testing.assert_allclose(combined, cls_grad + reg_grad)

    def test_non_finite_rejected(self):
        """A NaN constituent aborts with NonFiniteLossError."""
        with pytest.raises(NonFiniteLossError):
            total_loss(Tensor(np.nan), Tensor(0.0))


class TestSgdStep:
    """Tests for sgd_step."""

    def test_single_update(self):
        """p=1, g=0.5, lr=0.1 -> 0.95."""
        p = Tensor([1.0], requires_grad=True)
        sgd_step([p], {p: np.array([0.5])}, 0.1)
        assert p.values[0] == pytest.approx(0.95)

    def test_zero_learning_rate(self):
        """lr 0 leaves parameters unchanged."""
        p = Tensor([1.0, -2.0], requires_grad=True)
        sgd_step([p], {p: np.array([3.0, 4.0])}, 0.0)
        np.testing.assert_array_equal(p.values, [1.0, -2.0])

    def test_step_on_square(self):
        """One step on x^2 from 3 with lr 0.1 lands on 2.4."""
        x = Tensor([3.0], requires_grad=True)
        loss = nx.sum_all(nx.mul(x, x))
        sgd_step([x], loss.backward([x]), 0.1)
        assert x.values[0] == pytest.approx(2.4)

    def test_non_finite_gradient_leaves_all_parameters(self):
        """A bad gradient rejects the whole step before anything moves."""
        good, bad = Tensor([1.0], requires_grad=True), Tensor([2.0], requires_grad=True)
        with pytest.raises(NonFiniteLossError):
            sgd_step([good, bad], {good: np.array([1.0]), bad: np.array([np.inf])}, 0.1)
        assert good.values[0] == 1.0


class TestPlateauScheduler:
    """Tests for the plateau learning-rate schedule."""

    def test_fires_after_patience(self):
        """Five epochs without strict improvement decay 1e-3 to 1e-5 after epoch 7."""
        losses = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95]
        assert plateau_scheduler(losses[:6], 1e-3, 0.01, 5) == 1e-3
        assert plateau_scheduler(losses, 1e-3, 0.01, 5) == pytest.approx(1e-5)

    def test_decreasing_losses_never_decay(self):
        """Strict improvement every epoch keeps the rate."""
        scheduler = PlateauScheduler(1e-3, 0.01, 5)
        for loss in np.linspace(1.0, 0.1, 20):
            assert scheduler.step(float(loss)) == 1e-3

    def test_two_plateaus_two_decays(self):
        """The counter resets after a decay, so a second plateau decays again."""
        scheduler = PlateauScheduler(1.0, 0.1, 2)
        rates = [scheduler.step(loss) for loss in [1.0, 1.0, 1.0, 1.0, 1.0]]
        assert rates == pytest.approx([1.0, 1.0, 0.1, 0.1, 0.01])

    def test_equal_loss_is_not_improvement(self):
        """Ties with the best loss count as plateau epochs."""
        scheduler = PlateauScheduler(1.0, 0.5, 1)
        scheduler.step(1.0)
        assert scheduler.step(1.0) == 0.5

    def test_empty_history_rejected(self):
        """An empty loss history is rejected."""
        with pytest.raises(ValueError):
            plateau_scheduler([], 1e-3, 0.01, 5)


class TestBatching:
    """Tests for padded batches."""

    def test_pad_batch_masks(self):
        """Shorter videos are zero-padded and masked off."""
        batch, mask = pad_batch([make_video(steps=3), make_video(steps=5, seed=1)])
        assert batch.shape == (2, 5, 8)
        np.testing.assert_array_equal(mask.sum(axis=1), [3, 5])
        assert np.all(batch[0, 3:] == 0)

    def test_padding_is_neutral(self):
        """Batched losses over lengths {10, 84} equal the step-weighted per-video losses."""
        config = tiny_model_config()
        params = mark_bn_trained(init_params(config, seed=2))
        short = make_video("a", steps=10, segments=[(4.0, 10.0)], seed=3)
        long = make_video("b", steps=84, segments=[(20.0, 40.0), (100.0, 130.0)], seed=4)
        train_config = TrainConfig()

        cls_ab, reg_ab, _ = batch_loss([short, long], "smile", params, config, train_config, "infer")
        cls_a, reg_a, _ = batch_loss([short], "smile", params, config, train_config, "infer")
        cls_b, reg_b, _ = batch_loss([long], "smile", params, config, train_config, "infer")

        assert cls_ab.item() == pytest.approx((10 * cls_a.item() + 84 * cls_b.item()) / 94, abs=1e-9)
        positives_a, positives_b = 3, 10 + 15
        expected_reg = (positives_a * reg_a.item() + positives_b * reg_b.item()) / (positives_a + positives_b)
        assert reg_ab.item() == pytest.approx(expected_reg, abs=1e-9)

    def test_padded_rows_get_no_gradient(self):
        """Gradients with respect to the padded input rows are zero."""
        config = tiny_model_config()
        params = mark_bn_trained(init_params(config, seed=2))
        features = Tensor(np.random.default_rng(5).standard_normal((2, 6, 8)), requires_grad=True)
        mask = np.array([[1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 1, 1]], dtype=bool)
        encoded = encode(features, params, config, mask)
        rows = nx.take(encoded, np.nonzero(mask))
        heads = heads_forward(rows, params, "infer", config)
        loss = nx.sum_all(heads.probs)
        nx.backward(ComputationRecord.trace(loss), loss, [features])
        assert np.all(features.grad[0, 4:] == 0.0)


class TestTrain:
    """Tests for the epoch loop."""

    def videos(self):
        return [
            make_video(f"v{i}", steps=8, segments=[(2.0 + 2 * i, 8.0 + 2 * i)], seed=i)
            for i in range(4)
        ]

    def test_log_has_one_record_per_epoch(self):
        """History has exactly `epochs` records."""
        result = train(self.videos(), "smile", tiny_model_config(), TrainConfig(epochs=3, batch_size=2, seed=1))
        assert [entry.epoch for entry in result.history] == [1, 2, 3]
        assert all(entry.lr == 1e-3 for entry in result.history)

    def test_equal_seeds_equal_logs(self):
        """Two runs with the same seeds produce identical logs."""
        config = tiny_model_config(seed=3)
        first = train(self.videos(), "smile", config, TrainConfig(epochs=3, batch_size=2, seed=1))
        second = train(self.videos(), "smile", config, TrainConfig(epochs=3, batch_size=2, seed=1))
        assert [e.model_dump_json() for e in first.history] == [e.model_dump_json() for e in second.history]

    def test_loss_decreases(self):
        """Full-batch training lowers the epoch loss."""
        result = train(
            self.videos(), "smile", tiny_model_config(seed=4),
            TrainConfig(epochs=20, batch_size=4, learning_rate=0.01, seed=2),
        )
        assert result.history[-1].total_loss < result.history[0].total_loss

    def test_batch_norm_statistics_accumulate(self):
        """Training leaves batch-norm statistics usable for inference."""
        result = train(self.videos(), "smile", tiny_model_config(), TrainConfig(epochs=1, batch_size=2))
        assert all(state.updates == 2 for state in result.params.bn_states.values())

    def test_baseline_has_zero_regression_loss(self):
        """Without a regression head the regression term is 0."""
        config = tiny_model_config(use_regression_head=False)
        result = train(self.videos(), "smile", config, TrainConfig(epochs=2, batch_size=2))
        assert all(entry.reg_loss == 0.0 for entry in result.history)

    def test_empty_dataset_rejected(self):
        """Training needs at least one video."""
        with pytest.raises(ValueError):
            train([], "smile", tiny_model_config(), TrainConfig(epochs=1))

    def test_single_step_batch_names_its_video(self):
        """A batch with one valid step cannot be batch-normalised and the error names the video."""
        lonely = make_video("lonely01", steps=1)
        with pytest.raises(ValueError, match=r"Epoch 1: .*at least 2 rows.*lonely01"):
            train([lonely], "smile", tiny_model_config(), TrainConfig(epochs=1, batch_size=1))
