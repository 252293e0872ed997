import numpy as np
import pytest

from colearnseg import ops
from colearnseg.errors import ConfigError, ContractError, DataError, DivergenceError
from colearnseg.gradcheck import finite_diff_check
from colearnseg.model import ColearnConfig, ColearnNet, ModelParams
from colearnseg.phantom import PhantomSpec, generate_dataset
from colearnseg.tensor import Parameter, Tensor
from colearnseg.training import (
    AugmentConfig,
    LossConfig,
    OptimizerState,
    TrainConfig,
    augment_sample,
    class_scale,
    pixel_accuracy,
    scaled_ce_loss,
    sgd_momentum_step,
    train,
    two_fold_validate,
)


class TestClassScale:
    def test_equal_counts(self):
        labels = np.array([0, 1, 2, 3])
        np.testing.assert_allclose(class_scale(labels, 4), [0.75] * 4)

    def test_single_class_holds_all_pixels(self):
        labels = np.zeros(10, dtype=np.int64)
        s = class_scale(labels, 4)
        np.testing.assert_allclose(s, [0.0, 1.0, 1.0, 1.0])

    def test_direct_arithmetic(self):
        labels = np.concatenate([np.full(100, 0), np.full(50, 1),
                                 np.full(30, 2), np.full(20, 3)])
        np.testing.assert_allclose(class_scale(labels, 4), [0.5, 0.75, 0.85, 0.9])

    def test_empty_batch_rejected(self):
        with pytest.raises(ContractError):
            class_scale(np.zeros((0,), dtype=np.int64), 4)


def one_hot_prob(labels, num_classes, value=1.0):
    b, h, w = labels.shape
    prob = np.zeros((b, h, w, num_classes), dtype=np.float32)
    np.put_along_axis(prob, labels[..., None], value, axis=-1)
    rest = (1.0 - value) / (num_classes - 1)
    prob[prob == 0] = rest
    return prob


class TestScaledCeLoss:
    def test_perfect_one_hot_is_zero(self):
        labels = np.array([[[0, 1], [2, 3]]], dtype=np.int64)
        prob = Tensor(one_hot_prob(labels, 4))
        loss = scaled_ce_loss(prob, labels, None, LossConfig(lambda_=0.0))
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_prediction_closed_form(self):
        # equal class counts, uniform prediction: loss = 0.75 * ln 4
        labels = np.array([[[0, 1], [2, 3]]], dtype=np.int64)
        prob = Tensor(np.full((1, 2, 2, 4), 0.25, dtype=np.float32))
        loss = scaled_ce_loss(prob, labels, None, LossConfig(lambda_=0.0))
        assert loss.item() == pytest.approx(0.75 * np.log(4.0), rel=1e-5)

    def test_regularizer_arithmetic(self):
        params = ModelParams()
        params.add(Parameter(np.array([2.0], dtype=np.float32), "w", kind="kernel"))
        labels = np.array([[[0]]], dtype=np.int64)
        prob = Tensor(np.array([[[[1.0, 0.0, 0.0, 0.0]]]], dtype=np.float32))
        loss = scaled_ce_loss(prob, labels, params, LossConfig(lambda_=0.1))
        assert loss.item() == pytest.approx(0.4, rel=1e-6)

    def test_biases_and_norm_affine_excluded_from_penalty(self):
        params = ModelParams()
        params.add(Parameter(np.array([3.0], dtype=np.float32), "b", kind="bias"))
        params.add(Parameter(np.array([3.0], dtype=np.float32), "g", kind="gain"))
        labels = np.array([[[0]]], dtype=np.int64)
        prob = Tensor(np.array([[[[1.0, 0.0, 0.0, 0.0]]]], dtype=np.float32))
        loss = scaled_ce_loss(prob, labels, params, LossConfig(lambda_=0.1))
        assert loss.item() == pytest.approx(0.0, abs=1e-7)

    def test_label_out_of_range_rejected(self):
        labels = np.array([[[5]]], dtype=np.int64)
        prob = Tensor(np.full((1, 1, 1, 4), 0.25, dtype=np.float32))
        with pytest.raises(DataError):
            scaled_ce_loss(prob, labels, None, LossConfig())

    def test_missing_class_keeps_loss_finite(self):
        labels = np.zeros((1, 2, 2), dtype=np.int64)  # only class 0 present
        prob = Tensor(np.full((1, 2, 2, 4), 0.25, dtype=np.float32))
        loss = scaled_ce_loss(prob, labels, None, LossConfig(lambda_=0.0))
        assert np.isfinite(loss.item())
        # class 0 holds every pixel: its scale is zero, so the loss is zero
        assert loss.item() == pytest.approx(0.0, abs=1e-7)

    def test_saturated_prediction_stays_finite(self):
        labels = np.array([[[1]]], dtype=np.int64)
        prob = Tensor(np.array([[[[1.0, 0.0, 0.0, 0.0]]]], dtype=np.float32))
        loss = scaled_ce_loss(prob, labels, None, LossConfig(lambda_=0.0))
        assert np.isfinite(loss.item())

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            labels = rng.integers(0, 4, size=(1, 4, 4))
            logits = rng.normal(size=(1, 4, 4, 4)).astype(np.float32)
            prob = ops.softmax_pixelwise(Tensor(logits))
            loss = scaled_ce_loss(prob, labels, None, LossConfig(lambda_=0.0))
            assert loss.item() >= 0.0

    def test_gradient_wrt_logits_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        for trial in range(5):
            labels = rng.integers(0, 4, size=(1, 4, 4))
            logits = Parameter(rng.normal(size=(1, 4, 4, 4)).astype(np.float32), f"o{trial}")

            def f():
                prob = ops.softmax_pixelwise(logits)
                return scaled_ce_loss(prob, labels, None, LossConfig(lambda_=0.0))

            err = finite_diff_check(f, logits, eps=1e-3)
            assert err < 1e-3, f"trial {trial}: {err}"


class TestSgdMomentum:
    def test_plain_sgd_step(self):
        w = Parameter(np.array([0.0], dtype=np.float32), "w")
        w.grad[...] = 1.0
        sgd_momentum_step([w], OptimizerState(learning_rate=0.1, momentum=0.0))
        np.testing.assert_allclose(w.data, [-0.1])
        assert np.all(w.grad == 0)

    def test_two_steps_with_momentum_unrolled(self):
        w = Parameter(np.array([0.0], dtype=np.float32), "w")
        opt = OptimizerState(learning_rate=1.0, momentum=0.9)
        w.grad[...] = 1.0
        sgd_momentum_step([w], opt)
        w.grad[...] = 1.0
        sgd_momentum_step([w], opt)
        # v1 = 1, w1 = -1; v2 = 0.9 + 1 = 1.9, w2 = -2.9
        np.testing.assert_allclose(w.data, [-2.9], rtol=1e-6)

    def test_zero_grad_leaves_parameters(self):
        w = Parameter(np.array([1.5], dtype=np.float32), "w")
        sgd_momentum_step([w], OptimizerState(learning_rate=0.5, momentum=0.9))
        np.testing.assert_allclose(w.data, [1.5])

    def test_nan_grad_aborts(self):
        w = Parameter(np.array([0.0], dtype=np.float32), "w")
        w.grad[...] = np.nan
        with pytest.raises(DivergenceError, match="w"):
            sgd_momentum_step([w], OptimizerState())

    def test_momentum_range_validated(self):
        with pytest.raises(ConfigError):
            OptimizerState(momentum=1.0)


class TestAugmentation:
    def test_identical_transform_for_images_and_labels(self):
        rng = np.random.default_rng(3)
        grid = np.arange(64, dtype=np.float32).reshape(8, 8)
        for _ in range(20):
            state = rng.bit_generator.state
            c2, p2, l2 = augment_sample(grid, grid * 2.0, grid.astype(np.int64),
                                        AugmentConfig(0.8, 0.5),
                                        np.random.default_rng(rng.integers(1 << 30)))
            np.testing.assert_array_equal(c2.astype(np.int64), l2)
            np.testing.assert_array_equal(p2, c2 * 2.0)

    def test_label_values_are_preimages(self):
        grid = np.arange(64, dtype=np.int64).reshape(8, 8)
        _, _, l2 = augment_sample(grid.astype(np.float32), grid.astype(np.float32),
                                  grid, AugmentConfig(0.75, 1.0),
                                  np.random.default_rng(7))
        assert set(np.unique(l2)) <= set(np.unique(grid))
        assert l2.shape == grid.shape

    def test_full_crop_with_forced_flip_is_exact_mirror(self):
        grid = np.arange(16, dtype=np.int64).reshape(4, 4)
        _, _, l2 = augment_sample(grid.astype(np.float32), grid.astype(np.float32),
                                  grid, AugmentConfig(1.0, 1.0),
                                  np.random.default_rng(0))
        np.testing.assert_array_equal(l2, grid[:, ::-1])

    def test_crop_fraction_validated(self):
        with pytest.raises(ConfigError):
            AugmentConfig(crop_fraction=0.0)


def tiny_dataset(seed=0, studies=2, slices=5):
    spec = PhantomSpec(image_size=32, studies=studies, slices_per_study=slices,
                       tumor_count=(1, 2), seed=seed)
    return generate_dataset(spec)


def tiny_model(seed=0, c=2):
    return ColearnNet(ColearnConfig(input_size=(32, 32), channels=c), seed=seed)


class TestTrainLoop:
    def test_loss_decreases_on_small_phantom_set(self):
        data = tiny_dataset()
        slices = [s for study in data for s in study]  # 10 slices
        model = tiny_model(seed=1)
        cfg = TrainConfig(batch_size=5, epochs=50, learning_rate=0.02,
                          momentum=0.9, lambda_=0.0, augment=True, seed=0)
        log = train(model, slices, cfg)
        assert log[-1].mean_loss < log[0].mean_loss

    def test_defaults_follow_standard_parameters(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 5
        assert cfg.epochs == 500
        assert cfg.learning_rate == 0.0001
        assert cfg.momentum == 0.9
        assert cfg.lambda_ == 0.1

    def test_identical_seeds_identical_logs_and_weights(self):
        data = tiny_dataset(seed=4)
        slices = [s for study in data for s in study][:6]
        cfg = TrainConfig(batch_size=5, epochs=3, learning_rate=0.01, seed=9)
        runs = []
        for _ in range(2):
            model = tiny_model(seed=5)
            log = train(model, slices, cfg)
            runs.append((log, model.params.state_arrays()))
        (log1, s1), (log2, s2) = runs
        assert [(r.mean_loss, r.pixel_accuracy) for r in log1] == \
               [(r.mean_loss, r.pixel_accuracy) for r in log2]
        for name in s1:
            assert np.array_equal(s1[name], s2[name]), name

    def test_batch_size_below_two_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=1)

    def test_checkpoints_written_at_interval(self, tmp_path):
        data = tiny_dataset(seed=8)
        slices = [s for study in data for s in study][:6]
        model = tiny_model(seed=2)
        cfg = TrainConfig(batch_size=5, epochs=4, learning_rate=0.01,
                          checkpoint_interval=2, seed=0)
        train(model, slices, cfg, out_dir=str(tmp_path))
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["checkpoint_0002.weights", "checkpoint_0004.weights"]

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_divergence_aborts_and_keeps_checkpoints(self, tmp_path):
        data = tiny_dataset(seed=9)
        slices = [s for study in data for s in study][:6]
        model = tiny_model(seed=3)
        cfg = TrainConfig(batch_size=5, epochs=4, learning_rate=0.01,
                          checkpoint_interval=1, seed=0)
        train(model, slices, cfg, out_dir=str(tmp_path))
        before = sorted(p.name for p in tmp_path.iterdir())
        # poison a kernel so the next forward overflows
        model.params["head/w"].data[...] = 1e30
        with pytest.raises(DivergenceError):
            train(model, slices, cfg, out_dir=str(tmp_path))
        assert sorted(p.name for p in tmp_path.iterdir()) == before


class TestTwoFoldValidate:
    def test_reports_two_pairs_with_unequal_halves(self):
        data = tiny_dataset(seed=6, studies=3, slices=2)  # 3 studies: halves 1 + 2
        cfg = TrainConfig(batch_size=5, epochs=2, learning_rate=0.01, seed=0)
        results = two_fold_validate(data, lambda fold: tiny_model(seed=fold), cfg)
        assert len(results) == 2
        for train_acc, val_acc in results:
            assert 0.0 <= train_acc <= 1.0
            assert 0.0 <= val_acc <= 1.0

    def test_needs_at_least_two_studies(self):
        data = tiny_dataset(seed=7, studies=1)
        with pytest.raises(ContractError):
            two_fold_validate(data, lambda fold: tiny_model(), TrainConfig(epochs=1))
