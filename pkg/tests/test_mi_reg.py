import math
import unittest

import numpy as np
from scipy.ndimage import gaussian_laplace

from lib.camera_sim import make_clean_image, model_zoo, simulate_camera_model
from lib.errors import DimensionError, ParameterError
from lib.mi_reg import (HistogramSpec, joint_distribution, mi_regularizer, mutual_information, rho_transform,
                        soft_mutual_information)
from lib.tensor import Tape, Tensor


def _bilinear_columns(row, out_width):
    """Half-pixel-center linear resampling of one row, edge-clamped"""
    width = len(row)
    out = np.empty(out_width)
    for j in range(out_width):
        src = min(max((j + 0.5) * width / out_width - 0.5, 0.0), width - 1.0)
        left = int(math.floor(src))
        right = min(left + 1, width - 1)
        frac = src - left
        out[j] = (1 - frac) * row[left] + frac * row[right]
    return out


def _counting_mi(a, b, bins):
    a, b = a.ravel(), b.ravel()
    na = (a - a.min()) / (a.max() - a.min())
    nb = (b - b.min()) / (b.max() - b.min())
    joint = np.zeros((bins, bins))
    for x, y in zip(na, nb):
        i = min(int(math.floor(x * (bins - 1) + 0.5)), bins - 1)
        j = min(int(math.floor(y * (bins - 1) + 0.5)), bins - 1)
        joint[i, j] += 1
    joint /= len(na)
    pa, pb = joint.sum(axis=1), joint.sum(axis=0)
    total = 0.0
    for i in range(bins):
        for j in range(bins):
            if joint[i, j] > 0:
                total += joint[i, j] * math.log(joint[i, j] / (pa[i] * pb[j]))
    return total


class TestRhoTransform(unittest.TestCase):
    def test_constant_gray(self):
        np.testing.assert_allclose(rho_transform(np.full((72, 72, 3), 0.5)), 0.5, atol=1e-9)

    def test_white(self):
        np.testing.assert_allclose(rho_transform(np.ones((72, 72, 3))), 1.0, atol=1e-9)

    def test_vertical_edge_matches_bilinear_oracle(self):
        patch = np.zeros((72, 72, 3))
        patch[:, 36:, :] = 1.0
        out = rho_transform(patch)
        self.assertEqual(out.shape, (56, 56))
        expected = _bilinear_columns(patch[0, :, 0], 56)
        np.testing.assert_allclose(out, np.tile(expected, (56, 1)), atol=1e-6)
        np.testing.assert_allclose(out[:, :28], 0.0, atol=1e-6)
        np.testing.assert_allclose(out[:, 28:], 1.0, atol=1e-6)

    def test_wrong_shape(self):
        with self.assertRaises(DimensionError):
            rho_transform(np.zeros((64, 64, 3)))


class TestMutualInformation(unittest.TestCase):
    def test_self_information_of_balanced_binary(self):
        a = np.array([[0.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
        self.assertAlmostEqual(mutual_information(a, a), math.log(2), places=12)

    def test_product_distribution_is_independent(self):
        a = np.repeat(np.array([0.0, 0.0, 1.0, 1.0])[:, None], 4, axis=1)
        self.assertAlmostEqual(mutual_information(a, a.T), 0.0, places=12)

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(7)
        a, b = rng.random((12, 12)), rng.random((12, 12))
        a[0, 0], b[3, 4] = a[0, 0] + 2.0, b[3, 4] - 1.0
        self.assertAlmostEqual(mutual_information(a, b, HistogramSpec(bins=50)), _counting_mi(a, b, 50), delta=1e-9)

    def test_zero_range_is_zero(self):
        self.assertEqual(mutual_information(np.ones((4, 4)), np.random.default_rng(0).random((4, 4))), 0.0)

    def test_joint_sums_to_one(self):
        rng = np.random.default_rng(8)
        for estimator in ("hard", "soft"):
            joint = joint_distribution(rng.random((9, 9)), rng.random((9, 9)), HistogramSpec(estimator=estimator))
            self.assertAlmostEqual(float(joint.joint.sum()), 1.0, places=9)

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            mutual_information(np.zeros((4, 4)), np.zeros((5, 4)))

    def test_symmetric(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            a, b = rng.random((20, 20)), rng.normal(size=(20, 20))
            self.assertLess(abs(mutual_information(a, b) - mutual_information(b, a)), 1e-9)

    def test_histogram_spec_validation(self):
        with self.assertRaises(ParameterError):
            HistogramSpec(bins=1)
        with self.assertRaises(ParameterError):
            HistogramSpec(estimator="kde")


class TestSoftHardCalibration(unittest.TestCase):
    # measured over 100 such pairs: largest gap 0.167 nats, mean 0.122
    MAX_GAP = 0.3
    MEAN_GAP = 0.2

    def test_estimators_agree_on_camera_patches(self):
        zoo = model_zoo(4, seed=0)
        hard, soft = HistogramSpec(50, "hard"), HistogramSpec(50, "soft", 1.0)
        gaps = []
        for n in range(100):
            rng = np.random.default_rng([12, n])
            image = simulate_camera_model(make_clean_image(72, rng), zoo[n % 4], seed=n)
            reference = rho_transform(image.pixels)
            residual = gaussian_laplace(reference, sigma=1.0)
            gaps.append(abs(mutual_information(reference, residual, hard)
                            - mutual_information(reference, residual, soft)))
        self.assertLess(max(gaps), self.MAX_GAP)
        self.assertLess(float(np.mean(gaps)), self.MEAN_GAP)


class TestSoftGradient(unittest.TestCase):
    def test_matches_central_differences(self):
        rng = np.random.default_rng(9)
        reference, feature = rng.random((6, 6)), rng.random((6, 6))
        spec = HistogramSpec(bins=10, estimator="soft")
        _, grad = soft_mutual_information(reference, feature, spec)
        h = 1e-7
        for index in [(0, 1), (2, 3), (4, 4), (5, 0)]:
            plus, minus = feature.copy(), feature.copy()
            plus[index] += h
            minus[index] -= h
            numeric = (soft_mutual_information(reference, plus, spec)[0]
                       - soft_mutual_information(reference, minus, spec)[0]) / (2 * h)
            self.assertAlmostEqual(grad[index], numeric, delta=1e-4 * max(1.0, abs(numeric)))


class TestMiRegularizer(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(10)
        self.patches = rng.random((3, 72, 72, 3))
        self.features = rng.normal(size=(3, 56, 56))

    def test_batch_of_one_equals_pair_mi(self):
        spec = HistogramSpec()
        value = mi_regularizer(self.patches[:1], Tensor(self.features[:1], dtype=np.float64), spec).item()
        expected = mutual_information(rho_transform(self.patches[0]), self.features[0], spec)
        self.assertAlmostEqual(value, expected, delta=1e-9)

    def test_constant_pre_features_give_zero(self):
        for estimator in ("hard", "soft"):
            value = mi_regularizer(self.patches, np.full((3, 56, 56), 0.3), HistogramSpec(estimator=estimator))
            self.assertEqual(value.item(), 0.0)

    def test_batch_mean(self):
        spec = HistogramSpec()
        value = mi_regularizer(self.patches, Tensor(self.features, dtype=np.float64), spec).item()
        expected = np.mean([mutual_information(rho_transform(p), f, spec)
                            for p, f in zip(self.patches, self.features)])
        self.assertAlmostEqual(value, float(expected), delta=1e-9)

    def test_empty_batch(self):
        with self.assertRaises(ParameterError):
            mi_regularizer(np.zeros((0, 72, 72, 3)), np.zeros((0, 56, 56)))

    def test_soft_mode_records_gradient(self):
        features = Tensor(self.features, requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            value = mi_regularizer(self.patches, features)
        tape.backward(value)
        self.assertEqual(features.grad.shape, (3, 56, 56))
        self.assertTrue(np.all(np.isfinite(features.grad)))
        self.assertGreater(float(np.abs(features.grad).sum()), 0.0)


if __name__ == '__main__':
    unittest.main()
