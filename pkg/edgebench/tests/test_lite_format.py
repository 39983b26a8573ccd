import struct
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from edgebench.compressor import QuantModel, QuantTensor, calibrate_activations, prune_magnitude, quantize_weights
from edgebench.errors import CalibrationError, LiteFormatError, QuantizationError, UnsupportedVersionError
from edgebench.lite_format import export_lite, from_bytes, import_lite, model_size, read_header, to_bytes
from edgebench.nn_engine import LayerParams, LayerSpec, Model, ModelMetadata, canonical_cnn
from edgebench.tensor_core import Tensor, tensor_new

TINY_HEX = """
50 4c 49 54 01 00 00 00  04 00 74 69 6e 79 00 00
00 00 00 00 00 00 00 00  00 00 00 00 00 00 01 02
00 00 00 02 00 01 00 61  01 00 62 02 00 04 02 00
00 00 06 01 02 02 00 00  00 02 00 00 00 10 00 00
00 00 00 80 3f 00 00 00  00 00 00 00 00 00 00 80
3f 01 01 02 00 00 00 08  00 00 00 00 00 00 00 00
00 00 00
"""


def tiny_model():
    return Model(
        layers=(LayerSpec.dense(2), LayerSpec.softmax()),
        params=(LayerParams(tensor_new([2, 2], [1, 0, 0, 1]), tensor_new([2], [0, 0])), None),
        input_shape=(2,),
        class_names=("a", "b"),
        metadata=ModelMetadata(name="tiny"),
    )


def calibrated(model, count=4, seed=0):
    rng = np.random.default_rng(seed)
    images = [Tensor.from_array(rng.random(model.input_shape)) for _ in range(count)]
    return calibrate_activations(quantize_weights(model), images), images


def patched(data, offset, replacement):
    return data[:offset] + replacement + data[offset + len(replacement):]


class EncodingTests(SimpleTestCase):
    def test_tiny_model_bytes(self):
        self.assertEqual(to_bytes(tiny_model()), bytes.fromhex(TINY_HEX))

    def test_canonical_sizes(self):
        model = canonical_cnn(seed=0)
        qmodel, _ = calibrated(model)
        float_size, quant_size = len(to_bytes(model)), len(to_bytes(qmodel))
        self.assertEqual(float_size, 21275)
        self.assertEqual(quant_size, 5709)
        self.assertLess(quant_size / float_size, 0.3)

    def test_pruned_size_unchanged(self):
        model = canonical_cnn(seed=0)
        pruned, _ = prune_magnitude(model, 0.9)
        self.assertEqual(len(to_bytes(pruned)), len(to_bytes(model)))

    def test_uncalibrated_export_rejected(self):
        with self.assertRaises(CalibrationError):
            to_bytes(quantize_weights(canonical_cnn()))


class RoundTripTests(SimpleTestCase):
    def test_float_model(self):
        model = canonical_cnn(seed=7, name="baseline")
        restored = from_bytes(to_bytes(model))
        self.assertEqual(restored.metadata, model.metadata)
        self.assertEqual(restored.class_names, model.class_names)
        self.assertEqual(restored.layers, model.layers)
        for a, b in zip(model.params, restored.params):
            if a is not None:
                self.assertEqual(a.weights, b.weights)
                self.assertEqual(a.bias, b.bias)

    def test_pruned_metadata(self):
        pruned, _ = prune_magnitude(canonical_cnn(seed=1, name="baseline"), 0.7)
        restored = from_bytes(to_bytes(pruned))
        self.assertAlmostEqual(restored.metadata.sparsity, 0.7, places=6)
        self.assertEqual(restored.metadata.name, "baseline")

    def test_quantized_inference_bit_identical(self):
        qmodel, images = calibrated(canonical_cnn(seed=2))
        restored = from_bytes(to_bytes(qmodel))
        self.assertIsInstance(restored, QuantModel)
        self.assertEqual(restored.activations, qmodel.activations)
        for image in images:
            self.assertEqual(restored.infer(image), qmodel.infer(image))

    def test_reserialization_is_canonical(self):
        qmodel, _ = calibrated(canonical_cnn(seed=3))
        for model in (canonical_cnn(seed=3), qmodel):
            data = to_bytes(model)
            self.assertEqual(to_bytes(from_bytes(data)), data)

    def test_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "tiny.plite"
            written = export_lite(tiny_model(), path)
            self.assertEqual(written, 99)
            self.assertEqual(model_size(path), 99)
            self.assertEqual(to_bytes(import_lite(path)), bytes.fromhex(TINY_HEX))

            header = read_header(path)
            self.assertEqual(header.version, 1)
            self.assertFalse(header.quantized)

    def test_header_of_quantized_file(self):
        qmodel, _ = calibrated(canonical_cnn())
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "quant.plite"
            export_lite(qmodel, path)
            self.assertTrue(read_header(path).quantized)


class MalformedInputTests(SimpleTestCase):
    def setUp(self):
        self.data = bytes.fromhex(TINY_HEX)

    def test_bad_magic(self):
        with self.assertRaisesRegex(LiteFormatError, "magic") as ctx:
            from_bytes(patched(self.data, 0, b"TFL3"))
        self.assertEqual(ctx.exception.offset, 0)

    def test_future_and_zero_versions(self):
        for version in (b"\x02\x00", b"\x00\x00"):
            with self.subTest(version=version), self.assertRaises(UnsupportedVersionError):
                from_bytes(patched(self.data, 4, version))

    def test_unknown_flag_bits(self):
        with self.assertRaises(LiteFormatError) as ctx:
            from_bytes(patched(self.data, 6, b"\x02\x00"))
        self.assertNotIsInstance(ctx.exception, UnsupportedVersionError)
        self.assertEqual(ctx.exception.offset, 6)

    def test_truncation_reports_offset(self):
        with self.assertRaisesRegex(LiteFormatError, "Truncated") as ctx:
            from_bytes(self.data[:0x32])
        self.assertEqual(ctx.exception.offset, 0x32)

    def test_every_prefix_rejected(self):
        for length in range(len(self.data)):
            with self.assertRaises(LiteFormatError):
                from_bytes(self.data[:length])

    def test_trailing_bytes(self):
        with self.assertRaisesRegex(LiteFormatError, "trailing") as ctx:
            from_bytes(self.data + b"\x00")
        self.assertEqual(ctx.exception.offset, 99)

    def test_unknown_layer_kind(self):
        with self.assertRaisesRegex(LiteFormatError, "kind tag 7") as ctx:
            from_bytes(patched(self.data, 0x32, b"\x07"))
        self.assertEqual(ctx.exception.offset, 0x32)

    def test_wrong_dtype_tag(self):
        with self.assertRaisesRegex(LiteFormatError, "dtype"):
            from_bytes(patched(self.data, 0x33, b"\x02"))

    def test_inconsistent_weight_shape(self):
        # Dense declares 3 units against a (2, 2) weight tensor
        with self.assertRaisesRegex(LiteFormatError, "Inconsistent"):
            from_bytes(patched(self.data, 0x2e, b"\x03"))


class QuantizedWeightParamsTests(SimpleTestCase):
    # header and layers (51) + activation edges (2 + 3 * 8) + int8 weight tensor (18)
    SCALE_OFFSET = 95

    def setUp(self):
        qmodel, _ = calibrated(tiny_model())
        self.data = to_bytes(qmodel)
        self.assertEqual(self.data[self.SCALE_OFFSET:self.SCALE_OFFSET + 8],
                         struct.pack("<fi", qmodel.weights[0].scale, 0))

    def test_zero_scale_rejected_at_its_offset(self):
        with self.assertRaisesRegex(LiteFormatError, "scale") as ctx:
            from_bytes(patched(self.data, self.SCALE_OFFSET, struct.pack("<fi", 0.0, 5)))
        self.assertEqual(ctx.exception.offset, self.SCALE_OFFSET)

    def test_non_finite_and_negative_scales(self):
        for scale in (float("nan"), float("inf"), -0.5):
            with self.subTest(scale=scale), self.assertRaises(LiteFormatError):
                from_bytes(patched(self.data, self.SCALE_OFFSET, struct.pack("<fi", scale, 0)))

    def test_nonzero_weight_zero_point(self):
        with self.assertRaisesRegex(LiteFormatError, "zero point"):
            from_bytes(patched(self.data, self.SCALE_OFFSET, struct.pack("<fi", 0.01, 5)))

    def test_quant_tensor_checks_its_params(self):
        with self.assertRaises(QuantizationError):
            QuantTensor(np.zeros((2, 2)), 0.0)
        with self.assertRaises(QuantizationError):
            QuantTensor(np.zeros((2, 2)), 0.1, 3)
