import unittest

import numpy as np

from nrflab.datasets import synth_blobs
from nrflab.errors import DimensionMismatchError, InsufficientExamplesError, UndefinedCosineError
from nrflab.probe import (
    OptSettings,
    ProbeModel,
    accuracy,
    class_cosine,
    predict_proba,
    probability_frame,
    regularized_loss_and_grad,
    top_bottom_classes,
    train_probe,
    tune_l2,
)
from nrflab.rng import derive_stream


def _separable(seed: int = 1):
    train, test = synth_blobs(3, 30, 4, 20.0, seed)
    return train.flat(), train.labels, test.flat(), test.labels


class LossTests(unittest.TestCase):
    def test_gradient_matches_finite_differences(self):
        stream = derive_stream(0, 0)
        x = stream.standard_normal((20, 5))
        labels = np.arange(20) % 3
        params = stream.standard_normal(3 * 5 + 3) * 0.5
        _, grad = regularized_loss_and_grad(params, x, labels, 3, 0.1)
        eps = 1e-6
        numeric = np.zeros_like(params)
        for i in range(params.size):
            step = np.zeros_like(params)
            step[i] = eps
            plus, _ = regularized_loss_and_grad(params + step, x, labels, 3, 0.1)
            minus, _ = regularized_loss_and_grad(params - step, x, labels, 3, 0.1)
            numeric[i] = (plus - minus) / (2 * eps)
        self.assertLess(float(np.max(np.abs(numeric - grad))), 1e-4)

    def test_loss_at_zero_is_log_k(self):
        x = np.ones((4, 2))
        loss, _ = regularized_loss_and_grad(np.zeros(3 * 2 + 3), x, np.array([0, 1, 2, 0]), 3, 1.0)
        self.assertAlmostEqual(loss, np.log(3.0))

    def test_bias_is_not_regularized(self):
        x = np.zeros((2, 1))
        params = np.array([0.0, 0.0, 5.0, -5.0])
        _, grad_small = regularized_loss_and_grad(params, x, np.array([0, 1]), 2, 0.0)
        _, grad_large = regularized_loss_and_grad(params, x, np.array([0, 1]), 2, 100.0)
        np.testing.assert_allclose(grad_small[2:], grad_large[2:])


class TrainProbeTests(unittest.TestCase):
    def test_separable_data_is_fit_perfectly(self):
        x_train, y_train, x_test, y_test = _separable()
        model = train_probe(x_train, y_train, 1e-4)
        self.assertEqual(accuracy(model, x_train, y_train), 1.0)
        self.assertEqual(accuracy(model, x_test, y_test), 1.0)
        self.assertEqual(model.weights.shape, (3, 4))
        self.assertEqual(model.bias.shape, (3,))

    def test_noise_stays_near_chance(self):
        stream = derive_stream(1, 0)
        x = stream.standard_normal((2000, 20))
        labels = stream.generator.integers(0, 10, 2000)
        model = train_probe(x[:1000], labels[:1000], 1.0, num_classes=10)
        self.assertTrue(0.05 <= accuracy(model, x[1000:], labels[1000:]) <= 0.15)

    def test_deterministic(self):
        x_train, y_train, _, _ = _separable()
        a = train_probe(x_train, y_train, 1e-2)
        b = train_probe(x_train, y_train, 1e-2)
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.bias, b.bias)

    def test_diagnostics(self):
        x_train, y_train, _, _ = _separable()
        opt = OptSettings(function_tolerance=0.0)
        model = train_probe(x_train, y_train, 1e-1, opt)
        self.assertEqual(opt.gradient_tolerance, 1e-6)
        self.assertLessEqual(model.diagnostics.gradient_norm, opt.gradient_tolerance)
        self.assertTrue(model.diagnostics.converged)
        self.assertLessEqual(model.diagnostics.iterations, opt.max_iterations)
        self.assertTrue(np.isfinite(model.diagnostics.final_loss))

    def test_constant_features_give_a_uniform_predictor(self):
        x = np.ones((6, 3))
        labels = np.array([0, 1, 0, 1, 0, 1])
        with self.assertLogs("nrflab.probe", level="WARNING"):
            model = train_probe(x, labels, 1e-2)
        np.testing.assert_allclose(predict_proba(model, x), 0.5, atol=1e-4)

    def test_standardized_probe(self):
        x_train, y_train, x_test, y_test = _separable()
        x_train = np.hstack([x_train, np.ones((x_train.shape[0], 1))])
        x_test = np.hstack([x_test, np.ones((x_test.shape[0], 1))])
        model = train_probe(x_train, y_train, 1e-3, standardize=True)
        self.assertEqual(accuracy(model, x_test, y_test), 1.0)

    def test_mismatched_lengths(self):
        with self.assertRaises(DimensionMismatchError):
            train_probe(np.zeros((4, 2)), np.zeros(3, dtype=int), 1.0)
        model = train_probe(np.eye(2), np.array([0, 1]), 1.0)
        with self.assertRaises(DimensionMismatchError):
            predict_proba(model, np.zeros((1, 3)))

    def test_minimum_is_not_improved_by_small_steps(self):
        stream = derive_stream(4, 0)
        x = stream.standard_normal((200, 6))
        labels = np.argmax(x[:, :3] + 0.7 * stream.standard_normal((200, 3)), axis=1)
        model = train_probe(x, labels, 0.1, OptSettings(function_tolerance=0.0))
        params = np.concatenate([model.weights.ravel(), model.bias])
        best, _ = regularized_loss_and_grad(params, x, labels, 3, 0.1)
        for _ in range(20):
            step = stream.standard_normal(params.size)
            step *= 1e-2 / np.linalg.norm(step)
            loss, _ = regularized_loss_and_grad(params + step, x, labels, 3, 0.1)
            self.assertGreaterEqual(loss, best - 1e-10)

    def test_too_few_examples(self):
        with self.assertRaises(InsufficientExamplesError):
            train_probe(np.eye(2), np.array([0, 1]), 1.0, num_classes=3)

    def test_class_without_examples(self):
        with self.assertRaises(InsufficientExamplesError) as ctx:
            train_probe(np.zeros((4, 2)), np.array([0, 0, 2, 2]), 1.0)
        self.assertIn("[1]", str(ctx.exception))

    def test_negative_l2(self):
        with self.assertRaises(ValueError):
            train_probe(np.eye(2), np.array([0, 1]), -1.0)

    def test_probabilities_sum_to_one(self):
        x_train, y_train, x_test, _ = _separable()
        proba = predict_proba(train_probe(x_train, y_train, 1e-2), x_test)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0)


class TuneL2Tests(unittest.TestCase):
    def test_ties_go_to_larger_l2(self):
        x_train, y_train, x_val, y_val = _separable()
        best, model = tune_l2(x_train, y_train, x_val, y_val, [1e-6, 1e-4, 1e-2])
        self.assertEqual(best, 1e-2)
        self.assertEqual(model.l2, 1e-2)

    def test_workers_do_not_change_the_choice(self):
        stream = derive_stream(2, 0)
        x = stream.standard_normal((200, 8))
        labels = (x[:, 0] + 0.5 * stream.standard_normal(200) > 0).astype(int)
        grid = [1e-4, 1e-2, 1.0, 10.0]
        sequential = tune_l2(x[:150], labels[:150], x[150:], labels[150:], grid)
        parallel = tune_l2(x[:150], labels[:150], x[150:], labels[150:], grid, workers=4)
        self.assertEqual(sequential[0], parallel[0])
        np.testing.assert_array_equal(sequential[1].weights, parallel[1].weights)

    def test_single_value_grid(self):
        x_train, y_train, x_val, y_val = _separable()
        best, model = tune_l2(x_train, y_train, x_val, y_val, [0.3])
        self.assertEqual(best, 0.3)
        self.assertEqual(model.l2, 0.3)

    def test_empty_grid(self):
        with self.assertRaises(ValueError):
            tune_l2(np.eye(2), np.array([0, 1]), np.eye(2), np.array([0, 1]), [])


class ClassCosineTests(unittest.TestCase):
    def model(self, weights) -> ProbeModel:
        weights = np.asarray(weights, dtype=np.float64)
        return ProbeModel(weights=weights, bias=np.zeros(weights.shape[0]), l2=0.0)

    def test_cosine_matrix(self):
        cos = class_cosine(self.model([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
        np.testing.assert_array_equal(np.diag(cos), [1.0, 1.0, 1.0])
        np.testing.assert_array_equal(cos, cos.T)
        self.assertAlmostEqual(cos[0, 1], 0.0)
        self.assertAlmostEqual(cos[0, 2], 1 / np.sqrt(2))

    def test_zero_row(self):
        with self.assertRaises(UndefinedCosineError) as ctx:
            class_cosine(self.model([[1.0, 0.0], [0.0, 0.0]]))
        self.assertEqual(ctx.exception.class_index, 1)

    def test_top_and_bottom(self):
        cos = np.array(
            [
                [1.0, 0.5, 0.5, -0.2],
                [0.5, 1.0, 0.1, 0.0],
                [0.5, 0.1, 1.0, 0.3],
                [-0.2, 0.0, 0.3, 1.0],
            ]
        )
        top, bottom = top_bottom_classes(cos, 0, 2)
        self.assertEqual(top, [1, 2])
        self.assertEqual(bottom, [3, 1])
        top, bottom = top_bottom_classes(cos, 3, 1)
        self.assertEqual((top, bottom), ([2], [0]))
        with self.assertRaises(ValueError):
            top_bottom_classes(cos, 0, 4)

    def test_probability_frame(self):
        model = self.model([[1.0, 0.0], [0.0, 1.0]])
        frame = probability_frame(model, np.eye(2), ["cat", "dog"])
        self.assertEqual(list(frame.columns), ["cat", "dog"])
        self.assertGreater(frame.loc[0, "cat"], frame.loc[0, "dog"])
        with self.assertRaises(DimensionMismatchError):
            probability_frame(model, np.eye(2), ["cat"])


if __name__ == "__main__":
    unittest.main()
