import os
import tempfile
import unittest

import numpy as np

from lib.errors import DimensionError, ImageIOError, ParameterError
from lib.gmm import GmmModel
from lib.image_io import Image, load_image
from lib.localizer import (Localizer, ProbabilityMap, axis_positions, clean_map, encode_raw_map, extract_features,
                           load_raw_map, responsibilities_to_map, save_heat_map, save_raw_map,
                           standardize_features, tile_image, upsample_map)
from lib.network import build_model
from utils_cache import FeatureCache


def _bilinear_oracle(values, height, width):
    rows, cols = values.shape
    out = np.empty((height, width))
    for y in range(height):
        sy = min(max((y + 0.5) * rows / height - 0.5, 0.0), rows - 1.0)
        y0 = int(np.floor(sy))
        y1, fy = min(y0 + 1, rows - 1), sy - y0
        for x in range(width):
            sx = min(max((x + 0.5) * cols / width - 0.5, 0.0), cols - 1.0)
            x0 = int(np.floor(sx))
            x1, fx = min(x0 + 1, cols - 1), sx - x0
            top = (1 - fx) * values[y0, x0] + fx * values[y0, x1]
            bottom = (1 - fx) * values[y1, x0] + fx * values[y1, x1]
            out[y, x] = (1 - fy) * top + fy * bottom
    return out


class TestTiling(unittest.TestCase):
    def test_single_patch(self):
        grid, patches = tile_image(np.zeros((72, 72, 3)), 48)
        self.assertEqual(grid.positions, [(0, 0)])
        self.assertEqual(patches.shape, (1, 72, 72, 3))

    def test_exact_fit(self):
        grid, patches = tile_image(np.zeros((120, 120, 3)), 48)
        self.assertEqual(grid.rows, (0, 48))
        self.assertEqual(len(patches), 4)

    def test_clamped_last_position(self):
        self.assertEqual(axis_positions(100, 48), (0, 28))
        grid, _ = tile_image(np.zeros((100, 100, 3)), 48)
        self.assertEqual(grid.positions, [(0, 0), (0, 28), (28, 0), (28, 28)])

    def test_step_24_grid(self):
        grid, _ = tile_image(np.zeros((120, 120, 3)), 24)
        self.assertEqual(grid.shape, (3, 3))
        self.assertEqual(grid.cols, (0, 24, 48))

    def test_patch_content(self):
        image = np.random.default_rng(0).random((100, 130, 3))
        grid, patches = tile_image(image, 40)
        for (top, left), patch in zip(grid.positions, patches):
            np.testing.assert_allclose(patch, image[top:top + 72, left:left + 72], atol=1e-6)

    def test_grayscale_is_replicated(self):
        _, patches = tile_image(Image(np.full((72, 72), 0.25)), 48)
        np.testing.assert_allclose(patches[0], 0.25)

    def test_invalid_inputs(self):
        with self.assertRaises(DimensionError):
            tile_image(np.zeros((71, 200, 3)))
        with self.assertRaises(ParameterError):
            tile_image(np.zeros((80, 80, 3)), 0)
        with self.assertRaises(ParameterError):
            tile_image(np.zeros((80, 80, 3)), 73)


class TestFeatures(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.params = build_model(3, seed=0)

    def test_shape_and_duplicates(self):
        patch = np.random.default_rng(1).random((72, 72, 3)).astype(np.float32)
        other = np.random.default_rng(2).random((72, 72, 3)).astype(np.float32)
        features = extract_features(np.stack([patch, other, patch]), self.params)
        self.assertEqual(features.shape, (3, 100))
        scale = float(np.abs(features).max())
        np.testing.assert_allclose(features[0], features[2], rtol=1e-5, atol=1e-6 * scale)

    def test_chunking_does_not_change_features(self):
        patches = np.random.default_rng(3).random((4, 72, 72, 3)).astype(np.float32)
        whole = extract_features(patches, self.params, chunk=4)
        pieces = extract_features(patches, self.params, chunk=1, workers=2)
        np.testing.assert_allclose(whole, pieces, rtol=1e-4, atol=1e-5 * float(np.abs(whole).max()))

    def test_standardize(self):
        features = np.array([[1.0, 5.0], [3.0, 5.0]])
        np.testing.assert_allclose(standardize_features(features), [[-1.0, 0.0], [1.0, 0.0]])


class TestMapOperations(unittest.TestCase):
    def test_constant_map_survives_cleaning(self):
        for mode in ("opening", "closing"):
            np.testing.assert_array_equal(clean_map(np.full((5, 6), 0.3), mode=mode), np.full((5, 6), 0.3))

    def test_isolated_cell_is_suppressed(self):
        values = np.full((7, 7), 0.1)
        values[3, 3] = 0.9
        np.testing.assert_allclose(clean_map(values), 0.1)
        hole = np.full((7, 7), 0.8)
        hole[3, 3] = 0.0
        np.testing.assert_allclose(clean_map(hole, mode="closing"), 0.8)

    def test_opening_is_idempotent_and_anti_extensive(self):
        values = np.random.default_rng(13).random((12, 14))
        opened = clean_map(values)
        np.testing.assert_array_equal(clean_map(opened), opened)
        self.assertTrue(np.all(opened <= values))
        closed = clean_map(values, mode="closing")
        np.testing.assert_array_equal(clean_map(closed, mode="closing"), closed)
        self.assertTrue(np.all(closed >= values))

    def test_cleaning_keeps_probability_map_type(self):
        cleaned = clean_map(ProbabilityMap(np.random.default_rng(14).random((6, 6))))
        self.assertIsInstance(cleaned, ProbabilityMap)
        self.assertIsNone(cleaned.image_map)

    def test_binary_mask(self):
        prob_map = ProbabilityMap(np.array([[0.2, 0.5], [0.9, 0.49]]))
        np.testing.assert_array_equal(prob_map.binary_mask(), [[False, True], [True, False]])
        np.testing.assert_array_equal(prob_map.binary_mask(0.0), np.ones((2, 2), dtype=bool))
        upsampled = ProbabilityMap(np.zeros((2, 2)), image_map=np.full((3, 3), 0.7))
        self.assertEqual(upsampled.binary_mask(0.6).shape, (3, 3))

    def test_unknown_morphology(self):
        with self.assertRaises(ParameterError):
            clean_map(np.zeros((3, 3)), mode="tophat")

    def test_upsample_constant_and_identity(self):
        np.testing.assert_allclose(upsample_map(np.full((2, 3), 0.7), 9, 11).values, 0.7)
        values = np.random.default_rng(4).random((4, 5))
        np.testing.assert_allclose(upsample_map(values, 4, 5).values, values)

    def test_upsample_matches_bilinear_oracle(self):
        values = np.array([[0.0, 1.0], [0.5, 0.25]])
        np.testing.assert_allclose(upsample_map(values, 4, 4).values, _bilinear_oracle(values, 4, 4), atol=1e-12)

    def test_upsample_uses_patch_centers(self):
        grid, _ = tile_image(np.zeros((120, 120, 3)), 48)
        coarse = ProbabilityMap(np.array([[0.0, 1.0], [0.0, 1.0]]), grid=grid)
        full = upsample_map(coarse, 120, 120).values
        self.assertEqual(full.shape, (120, 120))
        self.assertEqual(full[10, 35], 0.0)
        self.assertEqual(full[10, 84], 1.0)
        self.assertAlmostEqual(full[10, 59], 23.5 / 48)

    def test_upsample_rejects_shrinking(self):
        with self.assertRaises(DimensionError):
            upsample_map(np.zeros((4, 4)), 3, 8)

    def test_responsibilities_to_map_uses_smaller_component(self):
        grid, _ = tile_image(np.zeros((120, 120, 3)), 48)
        features = np.array([[0.0], [0.0], [0.0], [10.0]])
        model = GmmModel(np.array([0.75, 0.25]), np.array([[0.0], [10.0]]), np.ones((2, 1)))
        prob = responsibilities_to_map(model, features, grid)
        self.assertEqual(prob.grid_map.shape, (2, 2))
        self.assertGreater(prob.grid_map[1, 1], 0.99)
        self.assertLess(prob.grid_map[0, 0], 0.01)


class TestLocalizer(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.params = build_model(2, seed=1)
        rng = np.random.default_rng(5)
        cls.image = Image(rng.random((120, 120, 3)))

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_full_resolution_probability_map(self):
        prob = Localizer(self.params, step=24, restarts=5, seed=0).localize(self.image)
        self.assertEqual(prob.values.shape, (120, 120))
        self.assertEqual(prob.grid_map.shape, (3, 3))
        self.assertTrue(np.all((prob.values >= 0.0) & (prob.values <= 1.0)))

    def test_grid_is_logged(self):
        localizer = Localizer(self.params, step=24, restarts=2, seed=0)
        with self.assertLogs("lib.localizer", level="INFO") as logs:
            localizer.features(self.image)
        self.assertTrue(any("3×3 (step 24; rows [0, 24, 48], cols [0, 24, 48])" in line for line in logs.output))

    def test_same_seed_gives_identical_raw_map(self):
        paths = [os.path.join(self.tmp.name, f"{k}.srmap") for k in range(2)]
        for path in paths:
            save_raw_map(Localizer(self.params, step=24, restarts=5, seed=3).localize(self.image), path)
        with open(paths[0], "rb") as a, open(paths[1], "rb") as b:
            self.assertEqual(a.read(), b.read())

    def test_feature_cache_is_reused(self):
        cache = FeatureCache()
        localizer = Localizer(self.params, step=24, restarts=2, cache=cache, model_digest="m")
        first = localizer.localize(self.image)
        second = localizer.localize(self.image)
        self.assertEqual((cache.hits, cache.misses), (1, 1))
        np.testing.assert_array_equal(first.values, second.values)
        Localizer(self.params, step=36, restarts=2, cache=cache, model_digest="m").features(self.image)
        self.assertEqual(cache.misses, 2)

    def test_too_small_for_segmentation(self):
        with self.assertRaises(ParameterError):
            Localizer(self.params, step=48, restarts=2).localize(Image(np.zeros((72, 72, 3))))


class TestMapFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_raw_map_layout(self):
        blob = encode_raw_map(np.array([[0.5, 1.0, 0.0]]))
        self.assertEqual(blob[:6], b"SRMAP1")
        self.assertEqual(int.from_bytes(blob[6:10], "little"), 3)
        self.assertEqual(int.from_bytes(blob[10:14], "little"), 1)
        self.assertEqual(len(blob), 14 + 12)

    def test_raw_map_round_trip_and_errors(self):
        path = os.path.join(self.tmp.name, "m.srmap")
        values = np.random.default_rng(6).random((5, 7))
        save_raw_map(values, path)
        np.testing.assert_array_equal(load_raw_map(path), values.astype(np.float32))
        with open(path, "r+b") as handle:
            handle.write(b"XX")
        with self.assertRaises(ImageIOError):
            load_raw_map(path)

    def test_heat_map_png(self):
        path = os.path.join(self.tmp.name, "heat.png")
        save_heat_map(np.array([[0.0, 1.0], [0.5, 0.25]]), path)
        heat = load_image(path)
        self.assertEqual(heat.channels, 1)
        np.testing.assert_array_equal(heat.to_uint8()[:, :, 0], [[0, 255], [128, 64]])


if __name__ == '__main__':
    unittest.main()
