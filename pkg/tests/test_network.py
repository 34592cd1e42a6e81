import math
import unittest

import numpy as np

from nrflab.errors import NumericOverflowError, ShapeError
from nrflab.models.architecture import (
    PRESETS,
    ActivationKind,
    AvgPool,
    BatchNorm,
    Conv2d,
    Dense,
    GlobalAvgPool,
    MaxPool,
    ResidualBlock,
    delta_orthogonal_variant,
    make_architecture,
    resolve_layers,
)
from nrflab.network import (
    LayerWeights,
    apply_activation,
    apply_layer,
    build_network,
    forward,
    infer_shape,
    infer_shapes,
)
from nrflab.rng import DataStream, InitScheme, derive_stream


def _images(count: int, shape=(8, 8, 3), seed: int = 0) -> np.ndarray:
    return derive_stream(seed, 99).uniform(0.0, 1.0, (count, *shape)).astype(np.float32)


def _preset(preset: str, **overrides):
    if preset.startswith("resnet"):
        overrides.setdefault("width_multiplier", 0.125)
    if preset == "resnet_deeper":
        overrides.setdefault("depth", 50)
    return make_architecture(preset, **overrides)


def _naive_conv(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    kh, kw, _, c_out = kernel.shape
    n, h, w, _ = x.shape
    h_out = (h - kh) // stride + 1
    w_out = (w - kw) // stride + 1
    out = np.zeros((n, h_out, w_out, c_out), dtype=np.float64)
    for i in range(h_out):
        for j in range(w_out):
            patch = x[:, i * stride : i * stride + kh, j * stride : j * stride + kw, :].astype(np.float64)
            out[:, i, j, :] = np.tensordot(patch, kernel.astype(np.float64), axes=([1, 2, 3], [0, 1, 2])) + bias
    return out


class ActivationTests(unittest.TestCase):
    x = np.array([-2.0, -0.5, 0.0, 1.5], dtype=np.float32)

    def test_relu_family(self):
        np.testing.assert_array_equal(apply_activation(ActivationKind.relu(), self.x), [0.0, 0.0, 0.0, 1.5])
        np.testing.assert_allclose(apply_activation(ActivationKind.leaky_relu(0.1), self.x), [-0.2, -0.05, 0.0, 1.5])
        scaled = ActivationKind.scaled_leaky_relu(0.5, gain=2.0)
        np.testing.assert_allclose(apply_activation(scaled, self.x), [-2.0, -0.5, 0.0, 3.0])

    def test_smooth_activations(self):
        np.testing.assert_allclose(apply_activation(ActivationKind(name="sigmoid"), np.zeros(2)), [0.5, 0.5])
        np.testing.assert_allclose(apply_activation(ActivationKind(name="tanh"), self.x), np.tanh(self.x), rtol=1e-6)
        np.testing.assert_allclose(
            apply_activation(ActivationKind(name="elu"), self.x), [math.expm1(-2.0), math.expm1(-0.5), 0.0, 1.5], rtol=1e-6
        )
        np.testing.assert_array_equal(apply_activation(ActivationKind(name="identity"), self.x), self.x)

    def test_dtype_is_float32(self):
        self.assertEqual(apply_activation(ActivationKind(name="sigmoid"), self.x).dtype, np.float32)

    def test_scaled_leaky_relu_keeps_unit_second_moment(self):
        kind = ActivationKind.scaled_leaky_relu(0.3)
        self.assertAlmostEqual(kind.gain, math.sqrt(2.0 / 1.09))
        z = derive_stream(0, 0).standard_normal(1_000_000)
        second_moment = float(np.mean(apply_activation(kind, z).astype(np.float64) ** 2))
        self.assertAlmostEqual(second_moment, 1.0, delta=0.02)


class LayerTests(unittest.TestCase):
    def test_valid_conv_matches_loops(self):
        stream = derive_stream(5, 0)
        x = stream.standard_normal((2, 6, 7, 3)).astype(np.float32)
        kernel = stream.standard_normal((3, 3, 3, 4)).astype(np.float32)
        bias = stream.standard_normal(4).astype(np.float32)
        for stride in (1, 2):
            with self.subTest(stride=stride):
                layer = Conv2d(filters=4, kernel=(3, 3), stride=stride, padding="valid")
                out = apply_layer(layer, x, LayerWeights({"kernel": kernel, "bias": bias}))
                np.testing.assert_allclose(out, _naive_conv(x, kernel, bias, stride), rtol=1e-4, atol=1e-4)

    def test_same_conv_pads_like_tensorflow(self):
        stream = derive_stream(5, 1)
        x = stream.standard_normal((1, 5, 5, 2)).astype(np.float32)
        kernel = stream.standard_normal((3, 3, 2, 1)).astype(np.float32)
        bias = np.zeros(1, dtype=np.float32)
        layer = Conv2d(filters=1, kernel=(3, 3), stride=2, padding="same")
        out = apply_layer(layer, x, LayerWeights({"kernel": kernel, "bias": bias}))
        self.assertEqual(out.shape, (1, 3, 3, 1))
        # total padding is 2, split one before and one after
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        np.testing.assert_allclose(out, _naive_conv(padded, kernel, bias, 2), rtol=1e-4, atol=1e-4)
        self.assertEqual(infer_shape(layer, (5, 5, 2)), (3, 3, 1))

    def test_pooling(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
        np.testing.assert_array_equal(apply_layer(MaxPool(), x)[0, :, :, 0], [[5, 7], [13, 15]])
        np.testing.assert_array_equal(apply_layer(AvgPool(), x)[0, :, :, 0], [[2.5, 4.5], [10.5, 12.5]])
        np.testing.assert_array_equal(apply_layer(GlobalAvgPool(), x), [[7.5]])

    def test_pooling_larger_than_input(self):
        with self.assertRaises(ShapeError):
            infer_shape(MaxPool(window=4), (2, 2, 3))

    def test_default_batchnorm_is_a_uniform_scale(self):
        x = derive_stream(0, 0).standard_normal((3, 2, 2, 4)).astype(np.float32)
        ones, zeros = np.ones(4, dtype=np.float32), np.zeros(4, dtype=np.float32)
        weights = LayerWeights({"scale": ones, "shift": zeros, "mean": zeros, "variance": ones})
        out = apply_layer(BatchNorm(epsilon=1e-3), x, weights)
        np.testing.assert_allclose(out, x / math.sqrt(1.001), rtol=1e-6)

    def test_freshly_built_batchnorm_divides_by_sqrt_one_plus_epsilon(self):
        net = build_network(_preset("resnet18_cifar"), (8, 8, 3), 0, 0)
        self.assertIsInstance(net.layers[1], BatchNorm)
        out = apply_layer(net.layers[1], np.ones((1, 2, 2, 8), np.float32), net.weights[1])
        np.testing.assert_allclose(out, 1.0 / math.sqrt(1.0 + 1e-5), rtol=1e-6)

    def test_dense_shape_check(self):
        weights = LayerWeights({"kernel": np.zeros((4, 2), np.float32), "bias": np.zeros(2, np.float32)})
        with self.assertRaises(ShapeError):
            apply_layer(Dense(units=2), np.zeros((1, 5), np.float32), weights)


class BuildNetworkTests(unittest.TestCase):
    def test_parameter_count_of_linear_preset(self):
        net = build_network(make_architecture("linear"), (2, 2, 3), 0, 0)
        self.assertEqual(net.parameter_count, 13)
        self.assertEqual(net.output_dim, 1)

    def test_same_stream_same_weights(self):
        arch = make_architecture("cnn_s")
        a = build_network(arch, (8, 8, 3), 7, 3)
        b = build_network(arch, (8, 8, 3), 7, 3)
        for wa, wb in zip(a.weights, b.weights):
            for name in wa.arrays:
                np.testing.assert_array_equal(wa.arrays[name], wb.arrays[name])

    def test_cnn_s_first_conv_kernel(self):
        net = build_network(make_architecture("cnn_s"), (32, 32, 3), 0, 0)
        self.assertEqual(net.weights[0].arrays["kernel"].shape, (5, 5, 3, 32))
        self.assertEqual(float(np.abs(net.weights[0].arrays["bias"]).max()), 0.0)

    def test_data_stream_indices_are_not_network_streams(self):
        for purpose in DataStream:
            with self.subTest(purpose=purpose.name):
                with self.assertRaises(ValueError):
                    build_network(make_architecture("linear"), (2, 2, 3), 0, purpose.stream_index)

    def test_weights_are_read_only(self):
        net = build_network(make_architecture("linear"), (2, 2, 3), 0, 0)
        kernel = net.weights[-1].arrays["kernel"]
        with self.assertRaises(ValueError):
            kernel[0, 0] = 1.0

    def test_architecture_that_does_not_fit(self):
        with self.assertRaises(ShapeError):
            build_network(make_architecture("cnn_s"), (1, 1, 4), 0, 0)

    def test_orthogonal_head_falls_back(self):
        arch = make_architecture("mlp", mlp_hidden=(8,), init_scheme=InitScheme(kind="orthogonal"))
        net = build_network(arch, (1, 1, 8), 0, 0)
        self.assertEqual(len(net.init_fallbacks), 1)
        self.assertIn("lecun_normal", net.init_fallbacks[0])
        hidden = net.weights[1].arrays["kernel"].astype(np.float64)
        np.testing.assert_allclose(hidden.T @ hidden, np.eye(8), atol=1e-5)

    def test_delta_orthogonal_resnet_builds(self):
        arch = delta_orthogonal_variant(make_architecture("resnet18_cifar", width_multiplier=0.125))
        net = build_network(arch, (8, 8, 3), 0, 0)
        self.assertTrue(net.init_fallbacks)
        self.assertEqual(forward(net, _images(2)).shape, (2, 1))


class ForwardTests(unittest.TestCase):
    def test_output_shape(self):
        net = build_network(make_architecture("cnn_s"), (8, 8, 3), 0, 0)
        out = forward(net, _images(5))
        self.assertEqual(out.shape, (5, 1))
        self.assertEqual(out.dtype, np.float32)

    def test_deterministic_and_seed_dependent(self):
        arch = make_architecture("lenet")
        x = _images(3, (16, 16, 3))
        a = forward(build_network(arch, (16, 16, 3), 1, 0), x)
        b = forward(build_network(arch, (16, 16, 3), 1, 0), x)
        c = forward(build_network(arch, (16, 16, 3), 1, 1), x)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))

    def test_chunking_keeps_rows(self):
        net = build_network(make_architecture("cnn_s"), (8, 8, 3), 0, 0)
        x = _images(7)
        np.testing.assert_allclose(forward(net, x, chunk_size=2), forward(net, x), rtol=1e-5, atol=1e-6)

    def test_float64_accumulation_is_close(self):
        net = build_network(make_architecture("cnn_s"), (8, 8, 3), 0, 0)
        x = _images(3)
        np.testing.assert_allclose(forward(net, x, accumulate64=True), forward(net, x), rtol=1e-3, atol=1e-5)

    def test_rows_are_independent(self):
        net = build_network(make_architecture("mlp", mlp_hidden=(16,)), (1, 1, 6), 0, 0)
        x = _images(4, (1, 1, 6))
        np.testing.assert_allclose(forward(net, x)[2:3], forward(net, x[2:3]), rtol=1e-5, atol=1e-6)

    def test_input_shape_mismatch(self):
        net = build_network(make_architecture("linear"), (2, 2, 3), 0, 0)
        with self.assertRaises(ShapeError):
            forward(net, np.zeros((1, 2, 2, 4), np.float32))

    def test_overflow_names_layer_and_seed(self):
        arch = make_architecture(
            "mlp", mlp_hidden=(32,), init_scheme=InitScheme(kind="plain_normal", sigma=1e30, truncation=False)
        )
        net = build_network(arch, (1, 1, 4), 11, 2)
        with np.errstate(over="ignore", invalid="ignore"):
            with self.assertRaises(NumericOverflowError) as ctx:
                forward(net, np.ones((3, 1, 1, 4), np.float32))
        self.assertTrue(ctx.exception.layer.endswith("dense"))
        self.assertEqual(ctx.exception.example, 0)
        self.assertEqual(ctx.exception.seed, (11, 2))

    def test_skip_toggle_changes_output(self):
        x = _images(2)
        on = make_architecture("resnet18_cifar", width_multiplier=0.125)
        off = make_architecture("resnet18_cifar", width_multiplier=0.125, use_skip=False)
        a = forward(build_network(on, (8, 8, 3), 0, 0), x)
        b = forward(build_network(off, (8, 8, 3), 0, 0), x)
        self.assertFalse(np.allclose(a, b))

    def test_default_batchnorm_has_no_effect_beyond_scale(self):
        x = _images(4)
        with_bn = make_architecture("resnet18_cifar", width_multiplier=0.125)
        without_bn = make_architecture("resnet18_cifar", width_multiplier=0.125, use_batchnorm=False)
        a = forward(build_network(with_bn, (8, 8, 3), 3, 0), x).astype(np.float64)
        b = forward(build_network(without_bn, (8, 8, 3), 3, 0), x).astype(np.float64)
        self.assertLess(float(np.max(np.abs(a - b)) / np.max(np.abs(b))), 1e-3)

    def test_linear_preset_is_an_inner_product(self):
        net = build_network(make_architecture("linear"), (4, 4, 3), 9, 2)
        x = _images(5, (4, 4, 3))
        kernel = net.weights[-1].arrays["kernel"].astype(np.float64)
        self.assertEqual(float(np.abs(net.weights[-1].arrays["bias"]).max()), 0.0)
        expected = x.reshape(5, -1).astype(np.float64) @ kernel
        np.testing.assert_allclose(forward(net, x), expected, rtol=1e-5, atol=1e-6)

    def test_relu_networks_are_positively_homogeneous(self):
        x = _images(3)
        for preset in ("linear", "mlp", "cnn_s", "lenet", "resnet18_cifar"):
            net = build_network(_preset(preset, use_batchnorm=False), (8, 8, 3), 4, 1)
            base = forward(net, x).astype(np.float64)
            for c in (0.5, 2.0, 3.0):
                with self.subTest(preset=preset, c=c):
                    scaled = forward(net, np.float32(c) * x).astype(np.float64)
                    atol = 1e-5 * float(np.max(np.abs(c * base)))
                    np.testing.assert_allclose(scaled, c * base, rtol=1e-5, atol=atol)

    def test_zero_input_gives_zero_logits(self):
        zeros = np.zeros((2, 8, 8, 3), np.float32)
        for preset in PRESETS:
            with self.subTest(preset=preset):
                net = build_network(_preset(preset), (8, 8, 3), 0, 0)
                np.testing.assert_array_equal(forward(net, zeros), np.zeros((2, 1), np.float32))

    def test_empty_batch(self):
        net = build_network(make_architecture("cnn_s", output_dim=3), (8, 8, 3), 0, 0)
        out = forward(net, np.zeros((0, 8, 8, 3), np.float32))
        self.assertEqual(out.shape, (0, 3))

    def test_disabled_skip_leaves_exactly_the_inner_path(self):
        for use_skip in (False, True):
            net = build_network(_preset("resnet18_cifar", use_skip=use_skip), (8, 8, 3), 2, 0)
            x = _images(2)
            blocks = 0
            for layer, w in zip(net.layers, net.weights):
                if isinstance(layer, ResidualBlock):
                    blocks += 1
                    inner = x
                    for inner_layer, inner_w in zip(layer.layers, w.inner):
                        inner = apply_layer(inner_layer, inner, inner_w)
                    out = apply_layer(layer, x, w)
                    with self.subTest(use_skip=use_skip, block=blocks):
                        if use_skip:
                            shortcut = x
                            for sc_layer, sc_w in zip(w.shortcut_layers, w.shortcut):
                                shortcut = apply_layer(sc_layer, shortcut, sc_w)
                            np.testing.assert_array_equal(out, inner + shortcut)
                        else:
                            self.assertEqual(w.shortcut, ())
                            np.testing.assert_array_equal(out, inner)
                    x = out
                else:
                    x = apply_layer(layer, x, w)
            self.assertEqual(blocks, 8)


class PresetShapeTests(unittest.TestCase):
    def test_every_preset_at_cifar_and_mnist_shapes(self):
        for shape in ((32, 32, 3), (28, 28, 1)):
            x = _images(2, shape)
            for preset in PRESETS:
                with self.subTest(preset=preset, shape=shape):
                    arch = _preset(preset)
                    self.assertEqual(infer_shapes(resolve_layers(arch), shape), (1,))
                    out = forward(build_network(arch, shape, 0, 0), x)
                    self.assertEqual(out.shape, (2, 1))
                    self.assertTrue(np.isfinite(out).all())

    def test_resnet_shortcut_on_odd_feature_maps(self):
        # 28 -> 14 -> 7 -> 4: the last stage downsamples an odd-sized map
        net = build_network(_preset("resnet18_cifar"), (28, 28, 1), 0, 0)
        strided = [w for layer, w in zip(net.layers, net.weights) if isinstance(layer, ResidualBlock) and w.shortcut]
        self.assertEqual(len(strided), 3)
        self.assertEqual([layers[0].stride for layers in (w.shortcut_layers for w in strided)], [2, 2, 2])
        self.assertEqual(forward(net, _images(1, (28, 28, 1))).shape, (1, 1))


if __name__ == "__main__":
    unittest.main()
