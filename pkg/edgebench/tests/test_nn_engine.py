import numpy as np
from django.test import SimpleTestCase

from edgebench.errors import ShapeError
from edgebench.nn_engine import (
    Backend,
    ExecutionPlan,
    LayerKind,
    LayerParams,
    LayerSpec,
    Model,
    apply_layer,
    build_model,
    canonical_cnn,
    conv2d,
    forward,
    forward_activations,
    infer_shapes,
    plan_execution,
    predict,
)
from edgebench.tensor_core import Tensor, tensor_new


def random_image(rng, shape=(28, 28, 1)):
    return Tensor.from_array(rng.random(shape, dtype=np.float32))


def fixed_output_model(probabilities):
    """Dense layer with zero weights whose bias is the requested output."""
    units = len(probabilities)
    return Model(
        layers=(LayerSpec.dense(units),),
        params=(LayerParams(tensor_new([1, units], [0] * units), tensor_new([units], probabilities)),),
        input_shape=(1,),
        class_names=[str(i) for i in range(units)],
    )


class ShapeInferenceTests(SimpleTestCase):
    def test_canonical_shape_chain(self):
        shapes = infer_shapes(canonical_cnn())
        self.assertEqual(shapes[0], (26, 26, 8))
        self.assertEqual(shapes[2], (13, 13, 8))
        self.assertEqual(shapes[5], (5, 5, 16))
        self.assertEqual(shapes[6], (400,))
        self.assertEqual(shapes[-1], (10,))

    def test_dense_weight_mismatch_names_layer(self):
        layers = [LayerSpec.conv2d(8, 3), LayerSpec.maxpool2d(2), LayerSpec.flatten(), LayerSpec.dense(10)]
        model = build_model(layers, (28, 28, 1), [str(i) for i in range(10)])
        params = list(model.params)
        params[3] = LayerParams(Tensor.from_array(np.zeros((1000, 10))), params[3].bias)
        with self.assertRaisesRegex(ShapeError, r"layer 3 .*\[1352, 10\]"):
            infer_shapes(model.with_params(params))

    def test_softmax_must_be_last(self):
        layers = [LayerSpec.flatten(), LayerSpec.softmax(), LayerSpec.dense(2)]
        with self.assertRaisesRegex(ShapeError, "Softmax"):
            build_model(layers, (2,), ["a", "b"])

    def test_output_must_match_class_names(self):
        with self.assertRaisesRegex(ShapeError, "class names"):
            build_model([LayerSpec.dense(3)], (4,), ["a", "b"])

    def test_empty_model_rejected(self):
        with self.assertRaises(ShapeError):
            infer_shapes(Model((), (), (2,), ["a", "b"]))

    def test_invalid_attributes_rejected(self):
        with self.assertRaises(ShapeError):
            LayerSpec.conv2d(0, 3)
        with self.assertRaises(ShapeError):
            LayerSpec.dense(0)


class LayerTests(SimpleTestCase):
    def test_dense_identity(self):
        params = LayerParams(tensor_new([2, 2], [1, 0, 0, 1]), tensor_new([2], [0, 0]))
        for backend in Backend:
            out = apply_layer(LayerSpec.dense(2), tensor_new([2], [1, 2]), params, backend)
            self.assertEqual(out.tolist(), [1.0, 2.0])

    def test_softmax_symmetry(self):
        self.assertEqual(apply_layer(LayerSpec.softmax(), tensor_new([2], [0, 0])).tolist(), [0.5, 0.5])

    def test_softmax_shift_invariant(self):
        logits = np.array([1.0, -2.0, 0.5, 3.0], dtype=np.float32)
        a = apply_layer(LayerSpec.softmax(), Tensor.from_array(logits)).array
        b = apply_layer(LayerSpec.softmax(), Tensor.from_array(logits + 100)).array
        np.testing.assert_allclose(a, b, atol=1e-5)
        self.assertAlmostEqual(float(a.sum()), 1.0, delta=1e-5)

    def test_relu(self):
        self.assertEqual(apply_layer(LayerSpec.relu(), tensor_new([3], [-1, 0, 2])).tolist(), [0.0, 0.0, 2.0])

    def test_maxpool(self):
        x = tensor_new([2, 2, 1], [1, 5, 3, 2])
        self.assertEqual(apply_layer(LayerSpec.maxpool2d(2), x).tolist(), [[[5.0]]])

    def test_layer_without_params_rejected(self):
        with self.assertRaises(ShapeError):
            apply_layer(LayerSpec.dense(2), tensor_new([2], [1, 2]))


class Conv2dTests(SimpleTestCase):
    def test_identity_kernel(self):
        x = tensor_new([3, 3, 1], range(9))
        out = conv2d(x, tensor_new([1, 1, 1, 1], [1]), tensor_new([1], [0]), backend=Backend.REFERENCE)
        self.assertEqual(out, x)

    def test_window_sum(self):
        x = tensor_new([2, 2, 1], [1, 2, 3, 4])
        w = tensor_new([2, 2, 1, 1], [1, 1, 1, 1])
        for backend in Backend:
            self.assertEqual(conv2d(x, w, tensor_new([1], [0]), backend=backend).tolist(), [[[10.0]]])

    def test_backends_agree(self):
        rng = np.random.default_rng(0)
        x = Tensor.from_array(rng.standard_normal((8, 8, 3)))
        w = Tensor.from_array(rng.standard_normal((3, 3, 3, 4)))
        b = Tensor.from_array(rng.standard_normal(4))
        for stride, padding in [(1, 0), (2, 1), (1, 1)]:
            ref = conv2d(x, w, b, stride, padding, Backend.REFERENCE).array
            acc = conv2d(x, w, b, stride, padding, Backend.ACCELERATED).array
            self.assertLess(float(np.max(np.abs(ref - acc))), 1e-5)

    def test_reference_matches_scalar_loops(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 6, 2)).astype(np.float32)
        w = rng.standard_normal((3, 2, 2, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        stride, padding = 2, 1
        padded = np.pad(x.astype(np.float64), ((1, 1), (1, 1), (0, 0)))
        expected = np.zeros((3, 4, 3))
        for oy in range(3):
            for ox in range(4):
                for f in range(3):
                    total = float(b[f])
                    for ky in range(3):
                        for kx in range(2):
                            for c in range(2):
                                total += padded[oy * stride + ky, ox * stride + kx, c] * float(w[ky, kx, c, f])
                    expected[oy, ox, f] = total
        out = conv2d(Tensor.from_array(x), Tensor.from_array(w), Tensor.from_array(b), stride, padding,
                     Backend.REFERENCE)
        np.testing.assert_allclose(out.array, expected, atol=1e-5)

    def test_channel_mismatch(self):
        with self.assertRaisesRegex(ShapeError, "channel"):
            conv2d(tensor_new([3, 3, 2], range(18)), tensor_new([1, 1, 1, 1], [1]), tensor_new([1], [0]))


class PlanTests(SimpleTestCase):
    def setUp(self):
        layers = [LayerSpec.conv2d(2, 3), LayerSpec.relu(), LayerSpec.flatten(), LayerSpec.dense(2),
                  LayerSpec.softmax()]
        self.model = build_model(layers, (4, 4, 1), ["a", "b"], seed=1)

    def test_delegate_split(self):
        plan = plan_execution(self.model, {LayerKind.CONV2D, LayerKind.DENSE})
        self.assertEqual(list(plan), [Backend.ACCELERATED, Backend.REFERENCE, Backend.REFERENCE,
                                      Backend.ACCELERATED, Backend.REFERENCE])

    def test_empty_supported_set(self):
        self.assertEqual(set(plan_execution(self.model, set())), {Backend.REFERENCE})

    def test_everything_supported(self):
        self.assertEqual(set(plan_execution(self.model, set(LayerKind))), {Backend.ACCELERATED})

    def test_plan_length_checked(self):
        x = Tensor.from_array(np.zeros((4, 4, 1)))
        with self.assertRaises(ShapeError):
            forward(self.model, x, ExecutionPlan.uniform(2, Backend.REFERENCE))


class ForwardTests(SimpleTestCase):
    def test_untrained_model_outputs_distribution(self):
        model = canonical_cnn(seed=5)
        probs = forward(model, random_image(np.random.default_rng(1))).array
        self.assertEqual(probs.shape, (10,))
        self.assertAlmostEqual(float(probs.sum()), 1.0, delta=1e-5)
        self.assertTrue(np.all((probs >= 0) & (probs <= 1)))

    def test_backends_agree_on_canonical_cnn(self):
        model = canonical_cnn(seed=2)
        rng = np.random.default_rng(4)
        reference = ExecutionPlan.uniform(len(model.layers), Backend.REFERENCE)
        accelerated = ExecutionPlan.uniform(len(model.layers), Backend.ACCELERATED)
        for _ in range(5):
            x = random_image(rng)
            a = forward(model, x, reference).array
            b = forward(model, x, accelerated).array
            np.testing.assert_allclose(a, b, atol=1e-4)
            self.assertEqual(int(np.argmax(a)), int(np.argmax(b)))

    def test_backends_agree_on_a_thousand_inputs(self):
        model = canonical_cnn(seed=9)
        rng = np.random.default_rng(9)
        reference = ExecutionPlan.uniform(len(model.layers), Backend.REFERENCE)
        accelerated = ExecutionPlan.uniform(len(model.layers), Backend.ACCELERATED)
        disagreements = 0
        for _ in range(1000):
            x = random_image(rng)
            disagreements += int(np.argmax(forward(model, x, reference).array)
                                 != np.argmax(forward(model, x, accelerated).array))
        self.assertEqual(disagreements, 0)

    def test_random_small_models_agree(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            channels = int(rng.integers(1, 5))
            layers = [LayerSpec.conv2d(channels, 2), LayerSpec.relu(), LayerSpec.flatten(), LayerSpec.dense(3)]
            model = build_model(layers, (5, 5, 2), ["a", "b", "c"], seed=seed)
            x = Tensor.from_array(rng.standard_normal((5, 5, 2)))
            a = forward(model, x, ExecutionPlan.uniform(4, Backend.REFERENCE)).array
            b = forward(model, x, ExecutionPlan.uniform(4, Backend.ACCELERATED)).array
            np.testing.assert_allclose(a, b, atol=1e-4)

    def test_deterministic(self):
        model = canonical_cnn(seed=3)
        x = random_image(np.random.default_rng(8))
        self.assertEqual(forward(model, x), forward(model, x))

    def test_zero_weights_give_uniform_output(self):
        model = canonical_cnn(seed=0)
        zeroed = [
            None if p is None else LayerParams(Tensor.from_array(np.zeros(p.weights.shape)),
                                               Tensor.from_array(np.zeros(p.bias.shape)))
            for p in model.params
        ]
        probs = forward(model.with_params(zeroed), random_image(np.random.default_rng(0))).array
        np.testing.assert_allclose(probs, np.full(10, 0.1), atol=1e-6)

    def test_input_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            forward(canonical_cnn(), Tensor.from_array(np.zeros((27, 28, 1))))

    def test_activation_edges(self):
        model = canonical_cnn(seed=0)
        x = random_image(np.random.default_rng(2))
        edges = forward_activations(model, x)
        self.assertEqual(len(edges), len(model.layers) + 1)
        self.assertEqual(edges[0], x)
        self.assertEqual(edges[-1], forward(model, x))


class PredictTests(SimpleTestCase):
    def test_argmax(self):
        model = fixed_output_model([0.1, 0.7, 0.2])
        self.assertEqual(predict(model, tensor_new([1], [1])), 1)

    def test_ties_go_to_lowest_index(self):
        model = fixed_output_model([0.5, 0.5])
        self.assertEqual(predict(model, tensor_new([1], [1])), 0)


class ConstructionTests(SimpleTestCase):
    def test_same_seed_same_weights(self):
        a, b = canonical_cnn(seed=9), canonical_cnn(seed=9)
        for pa, pb in zip(a.params, b.params):
            if pa is not None:
                self.assertEqual(pa.weights, pb.weights)

    def test_he_uniform_bounds(self):
        model = canonical_cnn(seed=1)
        conv = model.params[0].weights.array
        self.assertLessEqual(float(np.max(np.abs(conv))), np.sqrt(6 / 9) + 1e-6)
        self.assertEqual(model.params[0].bias.tolist(), [0.0] * 8)

    def test_parameter_count(self):
        self.assertEqual(canonical_cnn().parameter_count(), 72 + 8 + 1152 + 16 + 4000 + 10)
