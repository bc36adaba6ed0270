"""Losses, optimizer, augmentation, early stopping, CV, and grid search."""

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colonyseg import dishgen
from colonyseg.tensor import Tensor, softmax_channels_raw
from colonyseg.train import (
    AdamState,
    ClassWeights,
    EarlyStopping,
    RunConfig,
    Sample,
    adam_step,
    ce_soft_dice,
    default_grid,
    grid_search,
    kfold_split,
    one_hot,
    pixel_accuracy,
    rotate_augment,
    soft_dice_per_channel,
    train,
    weighted_ce,
)
from colonyseg.unet import build_unet


def rand_probs(shape, seed=0):
    rng = np.random.default_rng(seed)
    return softmax_channels_raw(rng.normal(size=shape).astype(np.float32))


def make_easy_samples(n, size=32, seed_base=5000):
    params = dishgen.GeneratorParams(preset="easy", canvas_size=size)
    out = []
    for i in range(n):
        scene = dishgen.sample_scene(params, seed_base + i)
        img = dishgen.render_image(scene).astype(np.float32) / 255.0
        out.append(
            Sample(
                image=np.ascontiguousarray(img.transpose(2, 0, 1)),
                mask=dishgen.render_mask(scene),
                id=str(i),
            )
        )
    return out


class TestClassWeights:
    def test_defaults(self):
        w = ClassWeights()
        np.testing.assert_allclose(w.as_array(), [0.01, 0.25, 0.34, 0.4])

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            ClassWeights(0.0, 0.0, 0.0, 0.0)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            ClassWeights(background=-0.1)


class TestWeightedCE:
    def test_one_hot_correct_is_near_zero(self):
        labels = np.random.default_rng(0).integers(0, 4, size=(1, 4, 4))
        probs = one_hot(labels)
        loss, _ = weighted_ce(probs, labels)
        assert loss < 1e-5

    def test_uniform_probs_single_pixel(self):
        probs = np.full((1, 4, 1, 1), 0.25, dtype=np.float32)
        labels = np.array([[[1]]])  # bvg+, weight 0.25
        loss, _ = weighted_ce(probs, labels)
        assert loss == pytest.approx(0.25 * math.log(4.0), abs=1e-6)

    def test_matches_per_pixel_loop(self):
        rng = np.random.default_rng(1)
        probs = rand_probs((2, 4, 4, 4), seed=1)
        labels = rng.integers(0, 4, size=(2, 4, 4))
        weights = ClassWeights()
        loss, _ = weighted_ce(probs, labels, weights)
        w = weights.as_array()
        acc = 0.0
        for n in range(2):
            for y in range(4):
                for x in range(4):
                    cls = labels[n, y, x]
                    p = min(max(float(probs[n, cls, y, x]), 1e-7), 1 - 1e-7)
                    acc -= w[cls] * math.log(p)
        assert loss == pytest.approx(acc / (2 * 4 * 4), abs=1e-6)

    def test_label_out_of_range_rejected(self):
        probs = rand_probs((1, 4, 2, 2))
        with pytest.raises(ValueError):
            weighted_ce(probs, np.full((1, 2, 2), 4))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(1, 4, 4, 4)).astype(np.float64)
        labels = rng.integers(0, 4, size=(1, 4, 4))

        def loss_of(z):
            return weighted_ce(softmax_channels_raw(z), labels)[0]

        _, grad = weighted_ce(softmax_channels_raw(logits), labels)
        eps = 1e-6
        worst = 0.0
        for idx in np.ndindex(logits.shape):
            orig = logits[idx]
            logits[idx] = orig + eps
            lp = loss_of(logits)
            logits[idx] = orig - eps
            lm = loss_of(logits)
            logits[idx] = orig
            fd = (lp - lm) / (2 * eps)
            an = grad.data[idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
        assert worst < 1e-3


class TestCESoftDice:
    def test_perfect_prediction(self):
        labels = np.random.default_rng(3).integers(0, 4, size=(1, 6, 6))
        probs = one_hot(labels)
        dice = soft_dice_per_channel(probs, one_hot(labels))
        present = np.unique(labels)
        for c in present:
            assert dice[c] == pytest.approx(1.0, abs=1e-6)
        loss, _ = ce_soft_dice(probs, labels, alpha=1.0, beta=0.0)
        assert loss < 1e-5

    def test_half_coverage_closed_form(self):
        # Channel prediction constant 0.5, ground truth covering half of
        # P=100 pixels: D = (2*0.25P + 1) / (P + 1) = 51/101.
        p_pixels = 100
        probs = np.zeros((1, 4, 10, 10), dtype=np.float64)
        probs[0, 0] = 0.5
        probs[0, 1:] = 0.5 / 3
        target = np.zeros((1, 10, 10), dtype=np.int64)
        target[0, 5:, :] = 1  # channel 0 true on the first half
        onehot = one_hot(target)
        dice = soft_dice_per_channel(probs, onehot)
        expected = (2 * 0.25 * p_pixels + 1) / (p_pixels + 1)
        assert dice[0] == pytest.approx(expected, abs=1e-6)
        assert expected == pytest.approx(0.504950495, abs=1e-6)

    def test_alpha_beta_validation(self):
        probs = rand_probs((1, 4, 2, 2))
        labels = np.zeros((1, 2, 2), dtype=np.int64)
        with pytest.raises(ValueError):
            ce_soft_dice(probs, labels, alpha=0.0, beta=0.0)
        with pytest.raises(ValueError):
            ce_soft_dice(probs, labels, alpha=-1.0, beta=1.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(1, 4, 4, 4)).astype(np.float64)
        labels = rng.integers(0, 4, size=(1, 4, 4))

        def loss_of(z):
            return ce_soft_dice(softmax_channels_raw(z), labels, 0.7, 1.3)[0]

        _, grad = ce_soft_dice(softmax_channels_raw(logits), labels, 0.7, 1.3)
        eps = 1e-6
        worst = 0.0
        for idx in np.ndindex(logits.shape):
            orig = logits[idx]
            logits[idx] = orig + eps
            lp = loss_of(logits)
            logits[idx] = orig - eps
            lm = loss_of(logits)
            logits[idx] = orig
            fd = (lp - lm) / (2 * eps)
            an = grad.data[idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
        assert worst < 1e-3

    def test_equals_weighted_ce_with_unit_weights(self):
        rng = np.random.default_rng(5)
        probs = rand_probs((2, 4, 5, 5), seed=6)
        labels = rng.integers(0, 4, size=(2, 5, 5))
        unit = ClassWeights(1.0, 1.0, 1.0, 1.0)
        loss_w, grad_w = weighted_ce(probs, labels, unit)
        loss_d, grad_d = ce_soft_dice(probs, labels, alpha=1.0, beta=0.0)
        assert loss_w == pytest.approx(loss_d, abs=1e-6)
        np.testing.assert_allclose(grad_w.data, grad_d.data, atol=1e-6)

    def test_loss_zero_iff_one_hot(self):
        labels = np.zeros((1, 3, 3), dtype=np.int64)
        labels[0, 1, 1] = 2
        perfect = one_hot(labels)
        loss, _ = weighted_ce(perfect, labels)
        assert loss < 1e-5
        off = perfect.copy()
        off[0, :, 0, 0] = [0.9, 0.1, 0.0, 0.0]
        loss_off, _ = weighted_ce(off, labels)
        assert loss_off > 1e-5


class TestAdam:
    def test_first_step_magnitude(self):
        params = {"x": np.array([1.0, -2.0], dtype=np.float64)}
        grads = {"x": np.array([0.3, -0.7], dtype=np.float64)}
        state = AdamState()
        lr = 0.01
        adam_step(params, grads, state, lr, t=1)
        # After bias correction the first update is lr * g / (|g| + eps).
        np.testing.assert_allclose(params["x"], [1.0 - lr, -2.0 + lr], atol=1e-6)

    def test_zero_gradient_keeps_params(self):
        params = {"x": np.array([1.5], dtype=np.float64)}
        state = AdamState()
        adam_step(params, {"x": np.zeros(1)}, state, 0.1, t=1)
        adam_step(params, {"x": np.zeros(1)}, state, 0.1, t=2)
        np.testing.assert_allclose(params["x"], [1.5])

    def test_quadratic_converges(self):
        params = {"x": np.array([1.0], dtype=np.float64)}
        state = AdamState()
        for t in range(1, 201):
            grads = {"x": 2.0 * params["x"]}
            adam_step(params, grads, state, 0.1, t=t)
        assert abs(params["x"][0]) < 0.05

    def test_shape_mismatch_rejected(self):
        params = {"x": np.zeros(2)}
        with pytest.raises(ValueError):
            adam_step(params, {"x": np.zeros(3)}, AdamState(), 0.1, t=1)

    def test_t_must_be_positive(self):
        with pytest.raises(ValueError):
            adam_step({"x": np.zeros(1)}, {"x": np.zeros(1)}, AdamState(), 0.1, t=0)


class TestRotateAugment:
    def _pair(self, size=24, seed=77):
        rng = np.random.default_rng(seed)
        image = rng.uniform(0, 1, size=(3, size, size)).astype(np.float32)
        mask = rng.integers(0, 4, size=(size, size)).astype(np.uint8)
        return image, mask

    def test_angle_zero_is_identity(self):
        image, mask = self._pair()
        img2, mask2 = rotate_augment(image, mask, angle_degrees=0.0)
        np.testing.assert_allclose(img2, image, atol=1e-6)
        np.testing.assert_array_equal(mask2, mask)

    def test_angle_90_is_permutation(self):
        image, mask = self._pair()
        img2, mask2 = rotate_augment(image, mask, angle_degrees=90.0)
        hist_before = np.bincount(mask.reshape(-1), minlength=4)
        hist_after = np.bincount(mask2.reshape(-1), minlength=4)
        np.testing.assert_array_equal(hist_before, hist_after)
        img_back, mask_back = rotate_augment(img2, mask2, angle_degrees=-90.0)
        np.testing.assert_allclose(img_back, image, atol=1e-5)
        np.testing.assert_array_equal(mask_back, mask)

    def test_angle_37_on_generator_output(self):
        # Blobs of radius >= 3: per-class pixel counts move by < 15%.
        params = dishgen.GeneratorParams(
            preset="easy", canvas_size=96, radius_range=(15.0, 30.0)
        )
        scene = dishgen.sample_scene(params, 123)
        mask = dishgen.render_mask(scene)
        image = dishgen.render_image(scene).astype(np.float32).transpose(2, 0, 1) / 255.0
        _, rotated = rotate_augment(image, mask, angle_degrees=37.0)
        assert set(np.unique(rotated)) <= {0, 1, 2, 3}
        before = np.bincount(mask.reshape(-1), minlength=4)
        after = np.bincount(rotated.reshape(-1), minlength=4)
        for cls in range(4):
            if before[cls] == 0:
                continue
            assert abs(after[cls] - before[cls]) / before[cls] < 0.15

    def test_sampled_angle_needs_rng(self):
        image, mask = self._pair()
        with pytest.raises(ValueError):
            rotate_augment(image, mask)


class TestEarlyStopping:
    def test_stops_after_exactly_patience_bad_epochs(self):
        stopper = EarlyStopping(patience=10)
        stopper.update(1.0)
        for i in range(9):
            stopper.update(1.0 + 0.1 * (i + 1))
            assert not stopper.should_stop
        stopper.update(3.0)
        assert stopper.should_stop
        assert stopper.best_epoch == 0

    def test_improvement_resets_counter(self):
        stopper = EarlyStopping(patience=2)
        stopper.update(1.0)
        stopper.update(1.5)
        stopper.update(0.5)
        assert stopper.bad_epochs == 0
        assert stopper.best_epoch == 2


class TestTrainLoop:
    def test_history_deterministic(self):
        samples = make_easy_samples(6, size=32)
        cfg = RunConfig(depth=2, base_channels=4, lr=1e-3, batch_size=4,
                        max_epochs=3, patience=10, seed=9)
        runs = []
        for _ in range(2):
            model = build_unet(cfg.unet_config(), cfg.seed)
            _, hist = train(model, samples[:4], samples[4:], cfg)
            runs.append(hist)
        assert runs[0].train_loss == runs[1].train_loss
        assert runs[0].val_loss == runs[1].val_loss
        assert runs[0].val_map == runs[1].val_map

    def test_best_epoch_is_argmin_val_loss(self):
        samples = make_easy_samples(6, size=32)
        cfg = RunConfig(depth=2, base_channels=4, lr=1e-3, batch_size=4,
                        max_epochs=5, patience=10, seed=3)
        model = build_unet(cfg.unet_config(), cfg.seed)
        _, hist = train(model, samples[:4], samples[4:], cfg)
        assert hist.best_epoch == int(np.argmin(hist.val_loss))

    def test_divergence_recorded(self):
        samples = make_easy_samples(4, size=32)
        cfg = RunConfig(depth=2, base_channels=4, lr=1e18, batch_size=4,
                        max_epochs=30, patience=30, seed=0)
        model = build_unet(cfg.unet_config(), cfg.seed)
        _, hist = train(model, samples[:3], samples[3:], cfg)
        assert hist.stop_reason in ("diverged", "max_epochs")
        if hist.stop_reason == "diverged":
            assert hist.num_epochs() < 30

    def test_empty_training_set_rejected(self):
        cfg = RunConfig(max_epochs=1)
        model = build_unet(cfg.unet_config(), 0)
        with pytest.raises(ValueError):
            train(model, [], None, cfg)

    def test_indivisible_sample_size_rejected(self):
        cfg = RunConfig(depth=4, max_epochs=1)
        model = build_unet(cfg.unet_config(), 0)
        bad = Sample(image=np.zeros((3, 24, 24), np.float32), mask=np.zeros((24, 24), np.uint8))
        with pytest.raises(ValueError):
            train(model, [bad], None, cfg)


class TestKFold:
    def test_eight_ids_four_folds(self):
        splits = kfold_split(list(range(8)), k=4, seed=0)
        assert len(splits) == 4
        val_all = []
        for tr, va in splits:
            assert len(va) == 2
            assert len(tr) == 6
            assert not set(tr) & set(va)
            val_all.extend(va)
        assert sorted(val_all) == list(range(8))

    def test_union_of_folds_is_dataset(self):
        ids = [f"im{i}" for i in range(11)]
        splits = kfold_split(ids, k=4, seed=5)
        covered = sorted(v for _, va in splits for v in va)
        assert covered == sorted(ids)

    def test_108_ids_gives_27_per_fold(self):
        splits = kfold_split(list(range(108)), k=4, seed=1)
        assert [len(va) for _, va in splits] == [27, 27, 27, 27]

    def test_k_below_two_rejected(self):
        with pytest.raises(ValueError):
            kfold_split(list(range(8)), k=1)

    def test_too_few_ids_rejected(self):
        with pytest.raises(ValueError):
            kfold_split([1, 2], k=4)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(4, 40), st.integers(0, 1000))
    def test_partition_property(self, n, seed):
        splits = kfold_split(list(range(n)), k=4, seed=seed)
        val_all = sorted(v for _, va in splits for v in va)
        assert val_all == list(range(n))
        sizes = [len(va) for _, va in splits]
        assert max(sizes) - min(sizes) <= 1


class TestGridSearch:
    def test_default_grid_enumerates_36(self):
        grid = default_grid()
        assert len(grid) == 36
        combos = {(c.depth, c.batchnorm, c.loss, c.lr) for c in grid}
        assert len(combos) == 36
        assert {c.depth for c in grid} == {2, 4, 6}
        assert {c.loss for c in grid} == {"weighted_ce", "ce_soft_dice"}
        assert {c.lr for c in grid} == {1e-3, 1e-4, 1e-5}

    def test_single_config_grid(self):
        samples = make_easy_samples(8, size=32)
        cfg = RunConfig(depth=2, base_channels=4, lr=1e-3, batch_size=4,
                        max_epochs=2, patience=10, seed=0)
        result = grid_search([cfg], samples, k=4, seed=0, retrain=False)
        assert len(result.entries) == 1
        assert result.best_config is not None
        assert result.entries[0].mean_map is not None

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            grid_search([], make_easy_samples(4, size=32), k=4)

    @pytest.mark.slow
    def test_shuffled_labels_rank_last(self):
        # Fat, sparse colonies at 64px so a short run reaches nonzero mAP.
        params = dishgen.GeneratorParams(
            preset="easy", canvas_size=64, lambda_plus=6, lambda_minus=2.5,
            radius_range=(30.0, 60.0),
        )
        samples = []
        for i in range(8):
            scene = dishgen.sample_scene(params, 6000 + i)
            img = dishgen.render_image(scene).astype(np.float32) / 255.0
            samples.append(
                Sample(
                    image=np.ascontiguousarray(img.transpose(2, 0, 1)),
                    mask=dishgen.render_mask(scene),
                    id=str(i),
                )
            )
        rng = np.random.default_rng(0)
        masks = [s.mask for s in samples]
        perm = rng.permutation(len(samples))
        shuffled = [
            dataclasses.replace(s, mask=masks[perm[i]]) for i, s in enumerate(samples)
        ]
        cfg = RunConfig(depth=2, base_channels=8, lr=1e-3, batch_size=4,
                        max_epochs=16, patience=16, seed=0, augment=False)
        good = grid_search([cfg], samples, k=4, seed=0, retrain=False)
        bad = grid_search([cfg], shuffled, k=4, seed=0, retrain=False)
        assert good.entries[0].mean_map > bad.entries[0].mean_map


class TestPixelAccuracy:
    def test_perfect_model_scores_one(self):
        samples = make_easy_samples(2, size=32)
        model = build_unet(RunConfig(depth=2, base_channels=4).unet_config(), 0)
        acc = pixel_accuracy(model, samples)
        assert 0.0 <= acc <= 1.0
