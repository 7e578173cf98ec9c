"""Optimizer, augmentation, split, training-loop, and sweep behavior."""

import numpy as np
import pytest

from conftest import make_synthetic_pair
from microct_seg.autodiff import Tensor
from microct_seg.data import GrayImage, LabelMask, SamplePair
from microct_seg.errors import DataError, NumericalError
from microct_seg.metrics import evaluate
from microct_seg.model import ModelSpec, build_fcn
from microct_seg.training import (AdamState, LossHistory, TrainConfig, adam_step,
                                  augment, flip_horizontal, flip_vertical, rotate90,
                                  split_train_val, sweep, train)


def scalar_param(value):
    return Tensor(np.array([float(value)]), requires_grad=True)


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = scalar_param(3.5)
        p.grad = np.zeros(1)
        state = AdamState({"p": p})
        adam_step({"p": p}, state, TrainConfig(epochs=1))
        assert p.data[0] == 3.5
        assert state.t == 1

    @pytest.mark.parametrize("g", [1.0, 0.5, -2.0, 1e-3])
    def test_first_step_magnitude_closed_form(self, g):
        # t=1: m_hat = g, v_hat = g^2, so step = lr * g / (|g| + eps)
        cfg = TrainConfig(epochs=1)
        p = scalar_param(0.0)
        p.grad = np.array([g])
        adam_step({"p": p}, AdamState({"p": p}), cfg)
        expected = cfg.learning_rate * abs(g) / (abs(g) + cfg.adam_eps)
        assert abs(p.data[0]) == pytest.approx(expected, rel=1e-6)
        assert np.sign(-p.data[0]) == np.sign(g)

    def test_two_steps_match_hand_unrolled_oracle(self):
        # scalar unrolling of the update with g then -g
        g = 0.7
        cfg = TrainConfig(epochs=1)
        b1, b2, eps, lr = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                           cfg.learning_rate)
        w = 0.0
        m = v = 0.0
        for t, grad in ((1, g), (2, -g)):
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            mh = m / (1 - b1 ** t)
            vh = v / (1 - b2 ** t)
            w -= lr * mh / (np.sqrt(vh) + eps)

        p = scalar_param(0.0)
        state = AdamState({"p": p})
        p.grad = np.array([g])
        adam_step({"p": p}, state, cfg)
        p.grad = np.array([-g])
        adam_step({"p": p}, state, cfg)
        assert p.data[0] == pytest.approx(w, abs=1e-10)
        assert state.m["p"][0] == pytest.approx(b1 * (1 - b1) * g + (1 - b1) * -g,
                                                abs=1e-10)
        assert state.v["p"][0] == pytest.approx(
            b2 * (1 - b2) * g * g + (1 - b2) * g * g, abs=1e-10)

    def test_nan_gradient_aborts_naming_parameter(self):
        p = scalar_param(1.0)
        p.grad = np.array([np.nan])
        with pytest.raises(NumericalError, match="stem.weight"):
            adam_step({"stem.weight": p}, AdamState({"stem.weight": p}),
                      TrainConfig(epochs=1))

    def test_gradients_zeroed_after_step(self):
        p = scalar_param(1.0)
        p.grad = np.array([0.3])
        adam_step({"p": p}, AdamState({"p": p}), TrainConfig(epochs=1))
        assert p.grad is None

    def test_missing_gradient_rejected(self):
        p = scalar_param(1.0)
        with pytest.raises(ValueError, match="no gradient"):
            adam_step({"p": p}, AdamState({"p": p}), TrainConfig(epochs=1))

    def test_converges_on_convex_scalar_problem(self):
        # At lr 0.001 each step moves at most ~lr, so from w=1 the first
        # crossing of |w| < 1e-2 lands near step 2200; 2500 gives margin.
        cfg = TrainConfig(learning_rate=0.001, epochs=1)
        p = scalar_param(1.0)
        state = AdamState({"p": p})
        steps_taken = None
        for step in range(1, 2501):
            p.grad = 2.0 * p.data
            adam_step({"p": p}, state, cfg)
            if abs(p.data[0]) < 1e-2:
                steps_taken = step
                break
        assert steps_taken is not None and steps_taken <= 2500


class TestAugment:
    def _pair(self, seed=0, h=8, w=8):
        rng = np.random.default_rng(seed)
        return SamplePair("p", GrayImage(rng.integers(0, 256, (h, w), dtype=np.uint8)),
                          LabelMask(rng.integers(0, 3, (h, w))))

    def test_same_seed_gives_identical_output(self):
        pair = self._pair(1)
        a = augment(pair, np.random.default_rng(42))
        b = augment(pair, np.random.default_rng(42))
        assert np.array_equal(a.image.pixels, b.image.pixels)
        assert np.array_equal(a.mask.labels, b.mask.labels)

    def test_horizontal_flip_is_involution(self):
        pair = self._pair(2)
        twice = flip_horizontal(flip_horizontal(pair))
        assert np.array_equal(twice.image.pixels, pair.image.pixels)
        assert np.array_equal(twice.mask.labels, pair.mask.labels)

    def test_flip_coordinate_mapping(self):
        pair = self._pair(3, 4, 6)
        h = flip_horizontal(pair)
        v = flip_vertical(pair)
        for r in range(4):
            for c in range(6):
                assert h.image.pixels[r, c] == pair.image.pixels[r, 6 - 1 - c]
                assert h.mask.labels[r, c] == pair.mask.labels[r, 6 - 1 - c]
                assert v.image.pixels[r, c] == pair.image.pixels[4 - 1 - r, c]

    def test_rot90_coordinate_mapping(self):
        pair = self._pair(4, 3, 5)
        r1 = rotate90(pair, 1)
        # numpy rot90: out[r, c] = in[c, W-1-r]
        assert r1.image.pixels.shape == (5, 3)
        for r in range(5):
            for c in range(3):
                assert r1.image.pixels[r, c] == pair.image.pixels[c, 5 - 1 - r]
                assert r1.mask.labels[r, c] == pair.mask.labels[c, 5 - 1 - r]

    def test_image_and_mask_get_same_transform(self):
        # encode position in both planes and check they stay aligned
        idx = np.arange(36, dtype=np.int64).reshape(6, 6)
        pair = SamplePair("p", GrayImage(idx.astype(np.uint8)), LabelMask(idx))
        for seed in range(10):
            out = augment(pair, np.random.default_rng(seed))
            assert np.array_equal(out.image.pixels.astype(np.int64), out.mask.labels)

    def test_class_histogram_invariant(self):
        pair = self._pair(5)
        before = np.bincount(pair.mask.labels.ravel(), minlength=3)
        for seed in range(12):
            out = augment(pair, np.random.default_rng(seed))
            after = np.bincount(out.mask.labels.ravel(), minlength=3)
            assert np.array_equal(before, after)


class TestSplit:
    def _pairs(self, n):
        img = GrayImage(np.zeros((4, 4), dtype=np.uint8))
        mask = LabelMask(np.zeros((4, 4), dtype=np.int64))
        return [SamplePair(f"id{idx:03d}", img, mask) for idx in range(n)]

    def test_even_count_halves(self):
        tr, va = split_train_val(self._pairs(10))
        assert len(tr) == 5 and len(va) == 5

    def test_odd_count_gives_extra_to_train(self):
        tr, va = split_train_val(self._pairs(25))
        assert len(tr) == 13 and len(va) == 12

    def test_partition_disjoint_and_complete(self):
        pairs = self._pairs(9)
        tr, va = split_train_val(pairs)
        tr_ids = {p.id for p in tr}
        va_ids = {p.id for p in va}
        assert tr_ids.isdisjoint(va_ids)
        assert tr_ids | va_ids == {p.id for p in pairs}

    def test_alternates_in_sorted_id_order(self):
        pairs = list(reversed(self._pairs(4)))
        tr, va = split_train_val(pairs)
        assert [p.id for p in tr] == ["id000", "id002"]
        assert [p.id for p in va] == ["id001", "id003"]

    def test_fewer_than_two_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            split_train_val(self._pairs(1))


SMALL_SPEC = ModelSpec(num_classes=3, block_counts=(1, 1, 1, 1), base_width=8)


def small_pairs(n=2, size=32):
    return [make_synthetic_pair(f"pair{i}", 50 + i, size=size) for i in range(n)]


class TestTrain:
    def test_history_length_equals_epochs(self):
        res = train(small_pairs(), SMALL_SPEC, TrainConfig(epochs=1, seed=1))
        assert len(res.history) == 1

    def test_zero_epochs_rejected_by_config(self):
        with pytest.raises(ValueError, match="epochs"):
            TrainConfig(epochs=0)

    def test_same_seed_bitwise_identical_weights(self):
        cfg = TrainConfig(epochs=3, seed=9)
        a = train(small_pairs(), SMALL_SPEC, cfg)
        b = train(small_pairs(), SMALL_SPEC, cfg)
        assert a.checkpoints["final"] == b.checkpoints["final"]
        assert a.history.rows == b.history.rows

    def test_different_seed_changes_weights(self):
        a = train(small_pairs(), SMALL_SPEC, TrainConfig(epochs=2, seed=1))
        b = train(small_pairs(), SMALL_SPEC, TrainConfig(epochs=2, seed=2))
        assert a.checkpoints["final"] != b.checkpoints["final"]

    def test_loss_decreases_and_overfits(self, classmap2):
        # two 64x64 pairs, half class 0 / half class 1 by intensity:
        # a separable pattern, so overfitting is the expected behavior
        def half_pair(pid, seed):
            rng = np.random.default_rng(seed)
            labels = np.zeros((64, 64), dtype=np.int64)
            labels[:, 32:] = 1
            base = np.where(labels == 0, 60, 190).astype(np.float64)
            pixels = np.clip(base + rng.normal(0, 8, (64, 64)), 0, 255).astype(np.uint8)
            return SamplePair(pid, GrayImage(pixels), LabelMask(labels))

        pairs = [half_pair("a", 0), half_pair("b", 1)]
        # augmentation off: memorizing the fixed orientation IS the point here
        cfg = TrainConfig(epochs=200, seed=3, augment=False)
        res = train(pairs, ModelSpec(num_classes=2, block_counts=(1, 1, 1, 1),
                                     base_width=16), cfg)
        assert res.history.train_losses()[-1] < 0.05
        train_pair = pairs[0]  # "a" sorts first, so it forms the train split
        report = evaluate(res.model, [train_pair], classmap2)
        pooled = report.pooled()
        correct = sum(r.tp for r in pooled)
        total = pooled[0].tp + pooled[0].fp + pooled[0].tn + pooled[0].fn
        assert correct / total > 0.99

    def test_checkpoints_written_to_out_dir(self, tmp_path):
        cfg = TrainConfig(epochs=2, seed=4)
        res = train(small_pairs(), SMALL_SPEC, cfg, out_dir=tmp_path)
        assert (tmp_path / "final.fcnw").is_file()
        assert (tmp_path / "best.fcnw").is_file()
        assert (tmp_path / "final.fcnw.meta").is_file()
        assert (tmp_path / "history.csv").is_file()
        meta = (tmp_path / "best.fcnw.meta").read_text()
        assert "learning_rate = 0.001" in meta
        assert f"epoch = {res.best_epoch}" in meta

    def test_best_checkpoint_tracks_min_val_loss(self):
        cfg = TrainConfig(epochs=4, seed=5)
        res = train(small_pairs(), SMALL_SPEC, cfg)
        vals = res.history.val_losses()
        assert res.best_epoch == int(np.argmin(vals))
        assert res.best_val_loss == min(vals)

    def test_initial_weights_resume(self, tmp_path):
        cfg = TrainConfig(epochs=1, seed=6)
        first = train(small_pairs(), SMALL_SPEC, cfg, out_dir=tmp_path)
        res = train(small_pairs(), SMALL_SPEC, TrainConfig(epochs=1, seed=7),
                    initial_weights=tmp_path / "final.fcnw")
        assert len(res.history) == 1

    def test_initial_weights_with_different_classes_replaces_classifier(self, tmp_path):
        donor_spec = ModelSpec(num_classes=5, block_counts=(1, 1, 1, 1), base_width=8)
        from microct_seg.model import save_weights

        donor = build_fcn(donor_spec, np.random.default_rng(0))
        save_weights(donor, tmp_path / "donor.fcnw")
        res = train(small_pairs(), SMALL_SPEC, TrainConfig(epochs=1, seed=8),
                    initial_weights=tmp_path / "donor.fcnw")
        assert res.model.spec.num_classes == 3

    def test_non_finite_loss_aborts_with_diagnostic(self, tmp_path):
        # poison the classifier bias so the float32 loss overflows; batch
        # norm would neutralize poisoned conv weights, so it must sit after
        # the last normalization
        from microct_seg.model import save_weights

        donor = build_fcn(SMALL_SPEC, np.random.default_rng(0))
        donor.classifier.bias.data[:] = 3e38
        save_weights(donor, tmp_path / "hot.fcnw")
        with np.errstate(over="ignore"), pytest.raises(NumericalError, match="epoch 0"):
            train(small_pairs(), SMALL_SPEC, TrainConfig(epochs=1, seed=9),
                  initial_weights=tmp_path / "hot.fcnw")

    def test_labels_exceeding_classes_rejected(self):
        img = GrayImage(np.zeros((32, 32), dtype=np.uint8))
        bad = SamplePair("bad", img, LabelMask(np.full((32, 32), 7, dtype=np.int64)))
        ok = SamplePair("ok", img, LabelMask(np.zeros((32, 32), dtype=np.int64)))
        with pytest.raises(ValueError, match="num_classes"):
            train([bad, ok], SMALL_SPEC, TrainConfig(epochs=1, seed=0))

    def test_validation_pass_does_not_touch_weights(self, classmap3):
        res = train(small_pairs(), SMALL_SPEC, TrainConfig(epochs=1, seed=10))
        model = res.model
        before = {k: v.data.copy() for k, v in model.named_parameters().items()}
        evaluate(model, small_pairs(), classmap3)
        after = model.named_parameters()
        for name, arr in before.items():
            assert np.array_equal(arr, after[name].data), name


class TestLossHistory:
    def test_csv_round_trip(self, tmp_path):
        h = LossHistory()
        h.append(0.5, 0.6)
        h.append(0.25, 0.45)
        path = tmp_path / "history.csv"
        h.to_csv(path)
        import csv

        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "train_loss", "val_loss"]
        assert [float(rows[1][1]), float(rows[1][2])] == [0.5, 0.6]
        assert int(rows[2][0]) == 1


class TestSweep:
    def _groups(self):
        return {
            "scanA": [make_synthetic_pair("scanA_s0", 60), make_synthetic_pair("scanA_s1", 61)],
            "scanB": [make_synthetic_pair("scanB_s0", 62), make_synthetic_pair("scanB_s1", 63)],
        }

    def _test_pairs(self):
        return [make_synthetic_pair("test_t0", 70), make_synthetic_pair("test_t1", 71)]

    def test_minimal_sweep_row_counts(self, classmap3):
        cfg = TrainConfig(epochs=1, seed=0)
        report = sweep(self._groups(), SMALL_SPEC, cfg, self._test_pairs(), classmap3,
                       axis="leaves", levels=[1], replicates=1)
        c = classmap3.num_classes
        per_image = [r for r in report.final_rows if r.metrics.image != "ALL"]
        pooled = [r for r in report.final_rows if r.metrics.image == "ALL"]
        assert len(per_image) == 2 * c  # C rows per test image
        assert len(pooled) == c
        assert len(report.best_rows) == len(report.final_rows)

    def test_levels_and_replicates_multiply(self, classmap3):
        cfg = TrainConfig(epochs=1, seed=0)
        report = sweep(self._groups(), SMALL_SPEC, cfg, self._test_pairs(), classmap3,
                       axis="leaves", levels=[1, 2], replicates=2)
        c = classmap3.num_classes
        rows_per_model = (2 + 1) * c
        assert len(report.final_rows) == 2 * 2 * rows_per_model

    def test_epoch_axis_uses_level_as_epochs(self, classmap3):
        cfg = TrainConfig(epochs=99, seed=0)  # must be overridden by the level
        report = sweep(self._groups(), SMALL_SPEC, cfg, self._test_pairs(), classmap3,
                       axis="epochs", levels=[1], replicates=1)
        assert {r.level for r in report.final_rows} == {1}

    def test_level_exceeding_groups_rejected(self, classmap3):
        cfg = TrainConfig(epochs=1, seed=0)
        with pytest.raises(DataError, match="exceeds available groups"):
            sweep(self._groups(), SMALL_SPEC, cfg, self._test_pairs(), classmap3,
                  axis="leaves", levels=[3], replicates=1)

    def test_summary_matches_independent_statistics(self, classmap3):
        cfg = TrainConfig(epochs=1, seed=0)
        report = sweep(self._groups(), SMALL_SPEC, cfg, self._test_pairs(), classmap3,
                       axis="leaves", levels=[1, 2], replicates=3)
        summary = {(s.level, s.class_index, s.metric): s for s in report.summary()}
        pooled = [r for r in report.final_rows if r.metrics.image == "ALL"]
        for level in (1, 2):
            for c in range(classmap3.num_classes):
                vals = [getattr(r.metrics, "f1") for r in pooled
                        if r.level == level and r.metrics.class_index == c]
                mean = sum(vals) / len(vals)
                sd = np.std(np.asarray(vals), ddof=1)
                half = 1.96 * sd / np.sqrt(len(vals))
                s = summary[(level, c, "f1")]
                assert abs(s.mean - mean) < 1e-9
                assert abs(s.ci_low - (mean - half)) < 1e-9
                assert abs(s.ci_high - (mean + half)) < 1e-9

    def test_replicates_get_distinct_seeds(self, classmap3):
        cfg = TrainConfig(epochs=1, seed=0)
        report = sweep(self._groups(), SMALL_SPEC, cfg, self._test_pairs(), classmap3,
                       axis="leaves", levels=[2], replicates=2)
        # different replicate seeds -> different models -> (almost surely)
        # different confusion counts on the same test data
        by_rep = {}
        for r in report.final_rows:
            if r.metrics.image == "ALL" and r.metrics.class_index == 0:
                by_rep[r.replicate] = (r.metrics.tp, r.metrics.fp)
        assert len(by_rep) == 2

    def test_csv_outputs(self, tmp_path, classmap3):
        cfg = TrainConfig(epochs=1, seed=0)
        report = sweep(self._groups(), SMALL_SPEC, cfg, self._test_pairs(), classmap3,
                       axis="leaves", levels=[1], replicates=1)
        report.to_csv(tmp_path / "final.csv")
        report.summary_to_csv(tmp_path / "summary.csv")
        import csv

        with open(tmp_path / "final.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["level", "replicate", "image", "class_index", "class_name",
                           "tp", "fp", "tn", "fn", "accuracy", "precision", "recall",
                           "f1"]
        with open(tmp_path / "summary.csv", newline="") as fh:
            srows = list(csv.reader(fh))
        assert srows[0] == ["level", "class_index", "class_name", "metric",
                            "mean", "ci_low", "ci_high"]
