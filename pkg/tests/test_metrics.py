import os
import tempfile
import unittest

import numpy as np

from lib.errors import DegenerateMaskError, DimensionError, ImageIOError, ParameterError
from lib.image_io import save_image
from lib.localizer import save_heat_map, save_raw_map
from lib.metrics import (ConfusionCounts, DatasetEvaluator, DatasetResult, ScoreRecord, evaluate_dataset, f1_score,
                         format_table, index_dir, load_mask_file, mcc, metric_curve, optimal_threshold_score, roc_auc,
                         threshold_candidates)


def _dense_best(scores, gt, metric):
    best = 0.0
    for t in np.linspace(0.0, 1.0, 2001):
        counts = ConfusionCounts.from_masks(scores >= t, gt)
        best = max(best, counts.f1() if metric == "F1" else counts.mcc())
    return best


class TestBinaryMetrics(unittest.TestCase):
    def test_f1(self):
        gt = np.array([1, 1, 1, 0, 0])
        self.assertEqual(f1_score(gt, gt), 1.0)
        self.assertEqual(f1_score(1 - gt, gt), 0.0)
        self.assertAlmostEqual(f1_score(np.array([1, 1, 0, 1, 0]), gt), 2 / 3)

    def test_mcc(self):
        gt = np.array([[1, 1, 0], [0, 1, 0]])
        self.assertAlmostEqual(mcc(gt, gt), 1.0)
        self.assertAlmostEqual(mcc(1 - gt, gt), -1.0)
        counts = ConfusionCounts.from_masks(np.array([1, 1, 0, 1, 0, 0, 0]), np.array([1, 1, 1, 0, 0, 0, 0]))
        self.assertEqual((counts.tp, counts.fp, counts.tn, counts.fn), (2, 1, 3, 1))
        self.assertAlmostEqual(counts.mcc(), 5 / 12)

    def test_empty_marginal_gives_zero_mcc(self):
        gt = np.array([1, 0, 0])
        self.assertEqual(mcc(np.zeros(3), gt), 0.0)
        self.assertEqual(mcc(np.ones(3), gt), 0.0)

    def test_degenerate_and_mismatched_masks(self):
        with self.assertRaises(DegenerateMaskError):
            f1_score(np.ones(4), np.zeros(4))
        with self.assertRaises(DegenerateMaskError):
            mcc(np.ones(4), np.zeros(4))
        with self.assertRaises(DimensionError):
            f1_score(np.ones((2, 2)), np.ones((2, 3)))


class TestRocAuc(unittest.TestCase):
    def test_known_values(self):
        gt = np.array([0, 0, 1, 1])
        self.assertAlmostEqual(roc_auc(np.array([0.1, 0.4, 0.35, 0.8]), gt), 0.75)
        self.assertAlmostEqual(roc_auc(np.full(4, 0.3), gt), 0.5)
        self.assertAlmostEqual(roc_auc(gt.astype(float), gt), 1.0)

    def test_needs_both_classes(self):
        with self.assertRaises(DegenerateMaskError):
            roc_auc(np.random.default_rng(0).random(5), np.ones(5))
        with self.assertRaises(DegenerateMaskError):
            roc_auc(np.random.default_rng(0).random(5), np.zeros(5))


class TestOptimalThreshold(unittest.TestCase):
    def test_candidates(self):
        np.testing.assert_allclose(threshold_candidates(np.array([0.2, 0.6, 0.2])), [0.0, 0.4, 1.0])

    def test_curve_uses_greater_or_equal(self):
        curve = metric_curve(np.array([0.5, 0.2]), np.array([True, False]), np.array([0.5, 0.51]), "F1")
        np.testing.assert_allclose(curve, [1.0, 0.0])
        with self.assertRaises(ParameterError):
            metric_curve(np.zeros(2), np.array([True, False]), np.array([0.5]), "IoU")

    def test_ties_go_to_lowest_threshold(self):
        score, threshold = optimal_threshold_score(np.array([0.9, 0.1]), np.array([1, 0]))
        self.assertEqual((score, threshold), (1.0, 0.5))

    def test_matches_dense_sweep(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            gt = rng.random(8) < 0.5
            gt[0], gt[1] = True, False
            scores = rng.integers(0, 256, size=8) / 255.0
            for metric in ("F1", "MCC"):
                best, _ = optimal_threshold_score(scores, gt, metric)
                self.assertAlmostEqual(best, _dense_best(scores, gt, metric), places=12)


class TestMetricInvariances(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(21)
        self.scores = rng.random((10, 12))
        self.gt = rng.random((10, 12)) < 0.3
        self.gt[0, 0], self.gt[0, 1] = True, False

    def test_complemented_scores_flip_auc(self):
        self.assertAlmostEqual(roc_auc(1.0 - self.scores, self.gt), 1.0 - roc_auc(self.scores, self.gt), places=12)
        coarse = np.round(self.scores, 1)
        self.assertAlmostEqual(roc_auc(1.0 - coarse, self.gt), 1.0 - roc_auc(coarse, self.gt), places=12)

    def test_spatial_permutation(self):
        order = np.random.default_rng(22).permutation(self.scores.size)
        scores = self.scores.ravel()[order].reshape(12, 10)
        gt = self.gt.ravel()[order].reshape(12, 10)
        pred = self.scores >= 0.5
        self.assertEqual(f1_score(pred.ravel()[order], gt.ravel()), f1_score(pred, self.gt))
        self.assertEqual(mcc(pred.ravel()[order], gt.ravel()), mcc(pred, self.gt))
        self.assertAlmostEqual(roc_auc(scores, gt), roc_auc(self.scores, self.gt), places=12)
        for metric in ("F1", "MCC"):
            self.assertEqual(optimal_threshold_score(scores, gt, metric)[0],
                             optimal_threshold_score(self.scores, self.gt, metric)[0])

    def test_strictly_increasing_transform(self):
        warped = np.sqrt(self.scores)
        self.assertAlmostEqual(roc_auc(warped, self.gt), roc_auc(self.scores, self.gt), places=12)
        for metric in ("F1", "MCC"):
            self.assertEqual(optimal_threshold_score(warped, self.gt, metric)[0],
                             optimal_threshold_score(self.scores, self.gt, metric)[0])


class TestDatasetResult(unittest.TestCase):
    def test_means_and_summary(self):
        result = DatasetResult("per-image", [ScoreRecord("a", 0.4, 0.2, 0.5, 0.5, 0.5),
                                             ScoreRecord("b", 0.8, 0.6, 0.9, 0.5, 0.5)])
        means = result.means()
        self.assertAlmostEqual(means["f1"], 0.6)
        self.assertAlmostEqual(means["mcc"], 0.4)
        self.assertAlmostEqual(means["auc"], 0.7)
        summary = result.to_json()["summary"]
        self.assertEqual(summary["scored"], 2)
        self.assertNotIn("global_thresholds", summary)

    def test_empty_means_are_nan(self):
        self.assertTrue(np.isnan(DatasetResult("per-image").means()["f1"]))

    def test_table_sorted_by_step(self):
        table = format_table([{"step": 48, "f1": 0.5, "mcc": 0.25, "auc": 0.75},
                              {"step": 24, "f1": 0.6, "mcc": 0.3, "auc": 0.8}])
        lines = table.splitlines()
        self.assertEqual(lines[0].split(), ["Step", "F1", "MCC", "ROC-AUC"])
        self.assertEqual(lines[1].split(), ["24", "0.600", "0.300", "0.800"])
        self.assertEqual(lines[2].split()[0], "48")


class TestDatasetEvaluator(unittest.TestCase):
    def test_skips_single_class_ground_truth(self):
        items = [("good", np.array([[0.9, 0.1]]), np.array([[1, 0]])),
                 ("blank", np.array([[0.9, 0.1]]), np.zeros((1, 2)))]
        result = DatasetEvaluator().evaluate_pairs(items)
        self.assertEqual([r.image_id for r in result.records], ["good"])
        self.assertEqual(result.skipped[0]["image"], "blank")
        self.assertIn("single class", result.skipped[0]["reason"])

    def test_global_threshold_mode(self):
        items = [("a", np.array([[0.8, 0.6]]), np.array([[1, 0]])),
                 ("b", np.array([[0.4, 0.2]]), np.array([[1, 0]]))]
        per_image = DatasetEvaluator("per-image").evaluate_pairs(items)
        self.assertAlmostEqual(per_image.means()["f1"], 1.0)
        shared = DatasetEvaluator("global").evaluate_pairs(items)
        self.assertAlmostEqual(shared.global_thresholds["F1"], 0.3)
        self.assertAlmostEqual(shared.records[0].f1, 2 / 3)
        self.assertAlmostEqual(shared.records[1].f1, 1.0)
        self.assertAlmostEqual(shared.means()["f1"], 5 / 6)
        self.assertIn("global_thresholds", shared.summary())

    def test_parallel_scoring_matches_serial(self):
        rng = np.random.default_rng(2)
        items = []
        for k in range(6):
            gt = rng.random((6, 6)) < 0.4
            gt[0, 0], gt[0, 1] = True, False
            items.append((f"img{k}", rng.random((6, 6)), gt))
        serial = DatasetEvaluator(workers=1).evaluate_pairs(items)
        parallel = DatasetEvaluator(workers=3).evaluate_pairs(items)
        self.assertEqual(serial.to_json(), parallel.to_json())

    def test_unknown_threshold_mode(self):
        with self.assertRaises(ParameterError):
            DatasetEvaluator("oracle")


class TestDirectoryEvaluation(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.maps = os.path.join(self.tmp.name, "maps")
        self.masks = os.path.join(self.tmp.name, "masks")
        os.makedirs(self.maps)
        mask = np.zeros((16, 16))
        mask[4:10, 3:12] = 1.0
        save_image(mask, os.path.join(self.masks, "a.png"))
        save_raw_map(mask, os.path.join(self.maps, "a.srmap"))
        save_heat_map(1.0 - mask, os.path.join(self.maps, "a.png"))
        save_image(mask, os.path.join(self.masks, "b.png"))
        save_raw_map(mask, os.path.join(self.maps, "c.srmap"))
        save_image(np.zeros((16, 16)), os.path.join(self.masks, "z.png"))
        save_raw_map(mask, os.path.join(self.maps, "z.srmap"))

    def tearDown(self):
        self.tmp.cleanup()

    def test_index_prefers_raw_maps(self):
        index = index_dir(self.maps, (".srmap", ".png"))
        self.assertTrue(index["a"].endswith("a.srmap"))
        with self.assertRaises(ImageIOError):
            index_dir(os.path.join(self.tmp.name, "absent"), (".png",))

    def test_mask_is_binarized(self):
        mask = load_mask_file(os.path.join(self.masks, "a.png"))
        self.assertEqual(mask.dtype, bool)
        self.assertEqual(int(mask.sum()), 54)

    def test_evaluate_dataset(self):
        result = evaluate_dataset(self.maps, self.masks)
        self.assertEqual([r.image_id for r in result.records], ["a"])
        self.assertEqual(result.unmatched, ["map:c", "mask:b"])
        self.assertEqual([s["image"] for s in result.skipped], ["z"])
        summary = result.summary()
        self.assertEqual((summary["f1"], summary["mcc"], summary["auc"]), (1.0, 1.0, 1.0))
        self.assertEqual((summary["scored"], summary["skipped"], summary["unmatched"]), (1, 1, 2))


if __name__ == '__main__':
    unittest.main()
