import math

import numpy as np
from django.test import SimpleTestCase
from numpy.lib.stride_tricks import sliding_window_view

from edgebench.compressor import PruneMask, quantize_weights
from edgebench.datasets import LabeledDataset
from edgebench.errors import ConfigError, DatasetError, MaskError, QuantizationError, ShapeError, TrainingError
from edgebench.nn_engine import LayerParams, LayerSpec, build_model, forward_activations
from edgebench.tensor_core import Tensor
from edgebench.trainer import (
    Optimizer,
    TrainConfig,
    batch_loss,
    evaluate,
    finetune_fakequant,
    finetune_masked,
    gradients,
    model_arrays,
    train,
)


def blobs(count, seed):
    """Two linearly separable classes as 1x2 single-channel images."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 2
    centres = np.where(labels[:, None] == 0, [1.0, -1.0], [-1.0, 1.0])
    images = (centres + rng.normal(0.0, 0.3, (count, 2))).reshape(count, 1, 2, 1)
    return LabeledDataset(images, labels, ("left", "right"))


def linear_model(seed=0, classes=("left", "right"), input_shape=(1, 2, 1)):
    layers = [LayerSpec.flatten(), LayerSpec.dense(len(classes)), LayerSpec.softmax()]
    return build_model(layers, input_shape, classes, seed=seed)


def small_cnn(seed):
    layers = [
        LayerSpec.conv2d(2, 2),
        LayerSpec.relu(),
        LayerSpec.maxpool2d(2, stride=1),
        LayerSpec.flatten(),
        LayerSpec.dense(3),
        LayerSpec.softmax(),
    ]
    return build_model(layers, (4, 4, 1), ("a", "b", "c"), seed=seed)


def constant_model(bias):
    """Zero weights, so the output is softmax(bias) whatever the input."""
    model = linear_model(classes=[str(i) for i in range(len(bias))], input_shape=(1, 1, 1))
    params = list(model.params)
    params[1] = LayerParams(Tensor.from_array(np.zeros((1, len(bias)))), Tensor.from_array(bias))
    return model.with_params(params)


def weights_of(model):
    return [None if p is None else (p.weights.array.copy(), p.bias.array.copy()) for p in model.params]


class TrainConfigTests(SimpleTestCase):
    def test_defaults(self):
        cfg = TrainConfig()
        self.assertEqual((cfg.epochs, cfg.batch_size, cfg.momentum), (5, 32, 0.9))
        self.assertIs(cfg.optimizer, Optimizer.SGD_MOMENTUM)

    def test_invalid_values(self):
        for kwargs in ({'epochs': 0}, {'batch_size': 0}, {'learning_rate': -0.1}, {'momentum': 1.0}):
            with self.subTest(**kwargs), self.assertRaises(ConfigError):
                TrainConfig(**kwargs)


class TrainTests(SimpleTestCase):
    def test_separable_blobs(self):
        train_data, val_data = blobs(200, seed=1), blobs(60, seed=2)
        cfg = TrainConfig(epochs=10, learning_rate=0.05, seed=3)
        model, history = train(linear_model(seed=4), train_data, val_data, cfg)
        self.assertEqual(history.epochs, 10)
        self.assertEqual(len(history.val_accuracy), 10)
        self.assertGreaterEqual(history.val_accuracy[-1], 0.95)
        self.assertLess(history.train_loss[-1], history.train_loss[0])
        self.assertEqual(model.metadata.epochs, 10)

    def test_zero_learning_rate_changes_nothing(self):
        data = blobs(64, seed=0)
        model = linear_model(seed=1)
        trained, history = train(model, data, data, TrainConfig(epochs=3, learning_rate=0.0))
        for before, after in zip(weights_of(model), weights_of(trained)):
            if before is not None:
                np.testing.assert_array_equal(before[0], after[0])
                np.testing.assert_array_equal(before[1], after[1])
        for loss in history.train_loss:
            self.assertAlmostEqual(loss, history.train_loss[0], places=5)

    def test_same_seed_bit_identical(self):
        data = blobs(80, seed=5)
        cfg = TrainConfig(epochs=2, seed=11)
        a, _ = train(small_cnn_for_blobs(), data, data, cfg)
        b, _ = train(small_cnn_for_blobs(), data, data, cfg)
        for pa, pb in zip(a.params, b.params):
            if pa is not None:
                self.assertEqual(pa.weights, pb.weights)
                self.assertEqual(pa.bias, pb.bias)

    def test_plain_sgd(self):
        data = blobs(100, seed=6)
        cfg = TrainConfig(epochs=5, learning_rate=0.5, optimizer="sgd", seed=1)
        _, history = train(linear_model(seed=2), data, data, cfg)
        self.assertLess(history.train_loss[-1], history.train_loss[0])

    def test_nan_loss_names_epoch_and_batch(self):
        images = np.full((8, 1, 2, 1), np.nan, dtype=np.float32)
        data = LabeledDataset(images, np.zeros(8), ("left", "right"))
        with self.assertRaises(TrainingError) as ctx:
            train(linear_model(), data, data, TrainConfig(epochs=1))
        self.assertEqual((ctx.exception.epoch, ctx.exception.batch), (1, 1))
        self.assertIn("epoch 1, batch 1", str(ctx.exception))

    def test_requires_softmax_head(self):
        model = build_model([LayerSpec.flatten(), LayerSpec.dense(2)], (1, 2, 1), ("left", "right"))
        with self.assertRaises(ShapeError):
            train(model, blobs(10, 0), blobs(10, 1), TrainConfig(epochs=1))


def small_cnn_for_blobs():
    layers = [LayerSpec.conv2d(2, (1, 2)), LayerSpec.relu(), LayerSpec.flatten(), LayerSpec.dense(2),
              LayerSpec.softmax()]
    return build_model(layers, (1, 2, 1), ("left", "right"), seed=7)


def kink_margin(model, images):
    """Distance of the batch from the nearest ReLU or max-pool switch in ``small_cnn``."""
    margins = []
    for image in images:
        edges = forward_activations(model, Tensor.from_array(image))
        margins.append(float(np.abs(edges[1].array).min()))
        windows = np.sort(sliding_window_view(edges[2].array, (2, 2), axis=(0, 1)).reshape(-1, 4), axis=1)
        live = windows[:, -1] > 0
        if live.any():
            margins.append(float((windows[live, -1] - windows[live, -2]).min()))
    return min(margins)


class GradientTests(SimpleTestCase):
    def assertGradientsMatch(self, model, batch, eps, dtype, atol):
        params = model_arrays(model, dtype)
        analytic = gradients(model, batch, params)
        for index, layer_params in enumerate(params):
            if layer_params is None:
                continue
            for which, array in enumerate(layer_params):
                grad = analytic[index][which]
                for position in np.ndindex(array.shape):
                    original = array[position]
                    array[position] = original + eps
                    plus = batch_loss(model, batch, params)
                    array[position] = original - eps
                    minus = batch_loss(model, batch, params)
                    array[position] = original
                    numeric = (plus - minus) / (2 * eps)
                    bound = 1e-2 * max(abs(numeric), abs(grad[position])) + atol
                    self.assertLessEqual(abs(numeric - grad[position]), bound,
                                         f"layer {index} param {which} at {position}")

    def test_finite_differences_float64(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            model = small_cnn(seed)
            batch = (rng.standard_normal((4, 4, 4, 1)), rng.integers(0, 3, 4))
            self.assertGradientsMatch(model, batch, 1e-5, np.float64, 1e-7)

    def test_finite_differences_float32_cnn(self):
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            model = small_cnn(seed)
            for _ in range(500):
                images = rng.standard_normal((4, 4, 4, 1)).astype(np.float32)
                if kink_margin(model, images) > 0.01:
                    break
            else:
                self.fail(f"no batch away from ReLU and max-pool kinks for seed {seed}")
            batch = (images, rng.integers(0, 3, 4))
            with self.subTest(seed=seed):
                self.assertGradientsMatch(model, batch, 1e-3, np.float32, 1e-3)

    def test_finite_differences_float32_smooth_model(self):
        rng = np.random.default_rng(0)
        model = linear_model(seed=3, classes=("a", "b", "c"), input_shape=(2, 2, 1))
        batch = (rng.standard_normal((6, 2, 2, 1)).astype(np.float32), rng.integers(0, 3, 6))
        self.assertGradientsMatch(model, batch, 1e-3, np.float32, 1e-3)

    def test_zero_weight_bias_gradient_closed_form(self):
        model = constant_model(np.zeros(2))
        batch = (np.ones((3, 1, 1, 1)), np.array([0, 0, 1]))
        bias_grad = gradients(model, batch)[1].bias
        np.testing.assert_allclose(bias_grad, [0.5 - 2 / 3, 0.5 - 1 / 3], atol=1e-6)

    def test_relu_subgradient_at_zero(self):
        layers = [LayerSpec.flatten(), LayerSpec.dense(2), LayerSpec.relu(), LayerSpec.dense(2),
                  LayerSpec.softmax()]
        model = build_model(layers, (1, 1, 1), ("a", "b"), seed=0)
        params = list(model.params)
        # first Dense outputs exactly 0 for every input
        params[1] = LayerParams(Tensor.from_array(np.zeros((1, 2))), Tensor.from_array(np.zeros(2)))
        model = model.with_params(params)
        grads = gradients(model, (np.ones((2, 1, 1, 1)), np.array([0, 1])))
        np.testing.assert_array_equal(grads[1].weights, np.zeros((1, 2)))
        np.testing.assert_array_equal(grads[1].bias, np.zeros(2))

    def test_empty_batch_rejected(self):
        with self.assertRaises(DatasetError):
            gradients(linear_model(), (np.zeros((0, 1, 2, 1)), np.zeros(0)))


class EvaluateTests(SimpleTestCase):
    def test_always_class_zero(self):
        model = constant_model(np.array([5.0, 0.0]))
        data = LabeledDataset(np.zeros((6, 1, 1, 1)), np.zeros(6), ("0", "1"))
        accuracy, _ = evaluate(model, data)
        self.assertEqual(accuracy, 1.0)

    def test_uniform_output_loss_is_log_k(self):
        model = constant_model(np.zeros(3))
        data = LabeledDataset(np.zeros((4, 1, 1, 1)), [0, 1, 2, 1], ("0", "1", "2"))
        _, loss = evaluate(model, data)
        self.assertAlmostEqual(loss, math.log(3), delta=1e-5)

    def test_empty_data(self):
        data = LabeledDataset(np.zeros((0, 1, 1, 1)), [], ("0", "1"))
        with self.assertRaises(DatasetError):
            evaluate(constant_model(np.zeros(2)), data)


class FinetuneMaskedTests(SimpleTestCase):
    def setUp(self):
        self.data = blobs(64, seed=9)
        self.model = small_cnn_for_blobs()
        self.cfg = TrainConfig(epochs=3, seed=2)

    def test_all_ones_mask_matches_train(self):
        trained, _ = train(self.model, self.data, self.data, self.cfg)
        tuned = finetune_masked(self.model, PruneMask.ones(self.model), self.data, self.cfg)
        for a, b in zip(trained.params, tuned.params):
            if a is not None:
                self.assertEqual(a.weights, b.weights)

    def test_zeroed_layer_stays_zero(self):
        mask = PruneMask.ones(self.model)
        masks = dict(mask.masks)
        masks[3] = np.zeros_like(masks[3])
        tuned = finetune_masked(self.model, PruneMask(masks), self.data, self.cfg)
        self.assertFalse(np.any(tuned.params[3].weights.array))
        self.assertTrue(np.any(tuned.params[0].weights.array))

    def test_misaligned_mask(self):
        with self.assertRaises(MaskError):
            finetune_masked(self.model, {3: np.ones((5, 5), dtype=np.uint8)}, self.data, self.cfg)
        with self.assertRaises(MaskError):
            finetune_masked(self.model, {1: np.ones((1,), dtype=np.uint8)}, self.data, self.cfg)


class FinetuneFakeQuantTests(SimpleTestCase):
    def test_on_grid_weights_with_zero_learning_rate_are_unchanged(self):
        model = quantize_weights(small_cnn_for_blobs()).dequantized_model()
        qmodel = quantize_weights(model)
        tuned = finetune_fakequant(model, qmodel, blobs(32, 1), TrainConfig(epochs=1, learning_rate=0.0))
        for a, b in zip(model.params, tuned.params):
            if a is not None:
                self.assertEqual(a.weights, b.weights)

    def test_recovers_on_blobs(self):
        data = blobs(100, seed=4)
        model, _ = train(linear_model(seed=1), data, data, TrainConfig(epochs=3, seed=1))
        tuned = finetune_fakequant(model, quantize_weights(model), data, TrainConfig(epochs=2, seed=1))
        self.assertGreaterEqual(evaluate(tuned, data)[0], 0.9)

    def test_fine_scale_behaves_like_train(self):
        # weights stay far inside the int8 range of a 1e-6 scale, so rounding moves them by <= 5e-7
        rng = np.random.default_rng(0)
        model = linear_model(seed=1)
        params = list(model.params)
        params[1] = LayerParams(Tensor.from_array(rng.uniform(-1e-5, 1e-5, (2, 2))), params[1].bias)
        model = model.with_params(params)
        data = blobs(64, seed=3)
        cfg = TrainConfig(epochs=3, learning_rate=1e-5, optimizer="sgd", seed=4)

        trained, _ = train(model, data, data, cfg)
        tuned = finetune_fakequant(model, {1: 1e-6}, data, cfg)
        np.testing.assert_allclose(tuned.params[1].weights.array, trained.params[1].weights.array, atol=1e-7)
        self.assertGreater(float(np.max(np.abs(trained.params[1].weights.array - params[1].weights.array))), 1e-6)
        self.assertAlmostEqual(batch_loss(tuned, data), batch_loss(trained, data), delta=1e-4)

    def test_missing_scale(self):
        model = small_cnn_for_blobs()
        with self.assertRaises(QuantizationError):
            finetune_fakequant(model, {0: 0.1}, blobs(8, 0), TrainConfig(epochs=1))
