import unittest

import numpy as np

from lib.camera_sim import (CFA_PATTERNS, CameraModelSpec, cfa_masks, demosaic, fit_to_size, make_clean_image,
                            make_splice, model_zoo, mosaic, quantization_table, quantize_dct, random_splice_mask,
                            simulate_camera_model)
from lib.errors import DimensionError, ParameterError
from lib.image_io import Image


class TestCameraModelSpec(unittest.TestCase):
    def test_dict_round_trip(self):
        spec = CameraModelSpec("m07", "GRBG", "nearest", prnu_seed=5, gamma=2.0, quant_table=2)
        self.assertEqual(CameraModelSpec.from_dict(spec.to_dict()), spec)

    def test_validation(self):
        with self.assertRaises(ParameterError):
            CameraModelSpec("x", gamma=3.0)
        with self.assertRaises(ParameterError):
            CameraModelSpec("x", cfa_pattern="RGBG")
        with self.assertRaises(ParameterError):
            CameraModelSpec("x", quant_table=9)

    def test_zoo_is_deterministic_and_varied(self):
        zoo = model_zoo(4, seed=3)
        self.assertEqual(zoo, model_zoo(4, seed=3))
        self.assertEqual(len({s.model_id for s in zoo}), 4)
        self.assertEqual({s.cfa_pattern for s in zoo}, set(CFA_PATTERNS))
        self.assertNotEqual(zoo[0].demosaic, zoo[1].demosaic)


class TestPipelineStages(unittest.TestCase):
    def test_each_pixel_samples_one_channel(self):
        for pattern in CFA_PATTERNS:
            masks = cfa_masks(6, 8, pattern)
            np.testing.assert_array_equal(masks.sum(axis=2), 1)
            self.assertEqual(int(masks[:, :, 1].sum()), 24)

    def test_demosaic_keeps_samples_and_constants(self):
        flat = np.full((10, 12, 3), 0.4)
        rng = np.random.default_rng(0)
        textured = rng.random((10, 12, 3))
        for algorithm in ("nearest", "bilinear", "edge-weighted"):
            raw, masks = mosaic(flat, "RGGB")
            np.testing.assert_allclose(demosaic(raw, masks, algorithm, "RGGB"), flat, atol=1e-12)
            raw, masks = mosaic(textured, "BGGR")
            out = demosaic(raw, masks, algorithm, "BGGR")
            np.testing.assert_allclose(out[masks], textured[masks])

    def test_unknown_demosaic(self):
        raw, masks = mosaic(np.zeros((4, 4, 3)), "RGGB")
        with self.assertRaises(ParameterError):
            demosaic(raw, masks, "cubic", "RGGB")

    def test_quantization_tables(self):
        self.assertEqual(quantization_table(0)[0, 0], 2.0)
        self.assertEqual(quantization_table(3)[0, 0], 10.0)
        self.assertTrue(np.all(quantization_table(3) >= quantization_table(0)))

    def test_quantize_dct_is_idempotent(self):
        channel = np.random.default_rng(1).random((20, 13)) * 255.0
        table = quantization_table(2)
        once = quantize_dct(channel, table)
        self.assertEqual(once.shape, channel.shape)
        np.testing.assert_allclose(quantize_dct(once, table)[:16, :8], once[:16, :8], atol=1e-8)


class TestSimulateCameraModel(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.clean = make_clean_image(64, np.random.default_rng(4))

    def test_deterministic(self):
        spec = model_zoo(2, seed=0)[1]
        a = simulate_camera_model(self.clean, spec, seed=9)
        b = simulate_camera_model(self.clean, spec, seed=9)
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_demosaic_choice_changes_output(self):
        base = CameraModelSpec("a", "RGGB", "bilinear", prnu_seed=1)
        other = CameraModelSpec("b", "RGGB", "nearest", prnu_seed=1)
        a = simulate_camera_model(self.clean, base).pixels
        b = simulate_camera_model(self.clean, other).pixels
        self.assertGreater(float(np.linalg.norm(a - b)), 0.0)

    def test_stages_and_range(self):
        image, stages = simulate_camera_model(self.clean, CameraModelSpec("a"), return_stages=True)
        self.assertEqual(list(stages), ["mosaic", "demosaic", "prnu", "gamma", "noise", "dct"])
        self.assertEqual(image.pixels.shape, (64, 64, 3))
        self.assertGreaterEqual(float(image.pixels.min()), 0.0)
        self.assertLessEqual(float(image.pixels.max()), 1.0)

    def test_grayscale_rejected(self):
        with self.assertRaises(ParameterError):
            simulate_camera_model(Image(np.zeros((16, 16))), CameraModelSpec("a"))


class TestSplices(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(5)
        self.host = Image(rng.random((16, 16, 3)))
        self.donor = Image(rng.random((16, 16, 3)))

    def test_zero_mask_keeps_host(self):
        out, gt = make_splice(self.host, self.donor, np.zeros((16, 16)))
        np.testing.assert_allclose(out.pixels, self.host.pixels)
        self.assertFalse(gt.any())

    def test_full_mask_gives_donor(self):
        out, gt = make_splice(self.host, self.donor, np.ones((16, 16)))
        np.testing.assert_allclose(out.pixels, self.donor.pixels)
        self.assertTrue(gt.all())

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionError):
            make_splice(self.host, Image(np.zeros((8, 16, 3))), np.zeros((16, 16)))

    def test_random_mask_area(self):
        for seed in range(5):
            mask = random_splice_mask(128, 128, np.random.default_rng(seed))
            self.assertGreaterEqual(mask.mean(), 0.09)
            self.assertLessEqual(mask.mean(), 0.31)

    def test_clean_image_and_fit(self):
        image = make_clean_image(48, np.random.default_rng(6))
        self.assertEqual(image.pixels.shape, (48, 48, 3))
        fitted = fit_to_size(Image(np.random.default_rng(7).random((40, 90))), 64)
        self.assertEqual(fitted.pixels.shape, (64, 64, 3))


if __name__ == '__main__':
    unittest.main()
