#!/usr/bin/env python3
"""
Pixel-Level Scoring
F1, MCC and ROC-AUC against ground-truth masks, optimal-threshold search,
and dataset-level aggregation with a results JSON and a sweep table.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from lib.errors import DegenerateMaskError, DimensionError, ImageIOError, ParameterError
from lib.image_io import load_image
from lib.localizer import load_raw_map

logger = logging.getLogger(__name__)

METRICS = ("F1", "MCC")
THRESHOLD_MODES = ("per-image", "global")
MAP_SUFFIXES = (".srmap", ".png")
MASK_SUFFIXES = (".png", ".pgm", ".ppm")
MAX_GLOBAL_CANDIDATES = 1001


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_masks(cls, pred_mask: np.ndarray, gt_mask: np.ndarray) -> "ConfusionCounts":
        pred, gt = _binary_pair(pred_mask, gt_mask)
        tp = int(np.count_nonzero(pred & gt))
        fp = int(np.count_nonzero(pred & ~gt))
        fn = int(np.count_nonzero(~pred & gt))
        return cls(tp, fp, int(pred.size) - tp - fp - fn, fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def f1(self) -> float:
        denominator = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denominator if denominator else 0.0

    def mcc(self) -> float:
        factors = (self.tp + self.fp) * (self.tp + self.fn) * (self.tn + self.fp) * (self.tn + self.fn)
        if factors == 0:
            return 0.0
        return (self.tp * self.tn - self.fp * self.fn) / float(np.sqrt(float(factors)))


def _binary_pair(pred_mask: np.ndarray, gt_mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred_mask).astype(bool), np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred.ravel(), gt.ravel()


def _require_positive(gt: np.ndarray) -> None:
    if not np.any(gt):
        raise DegenerateMaskError("ground truth has no positive pixels")


def _require_both_classes(gt: np.ndarray) -> None:
    if np.all(gt) or not np.any(gt):
        raise DegenerateMaskError("ground truth contains a single class")


def f1_score(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2TP / (2TP + FP + FN)"""
    _require_positive(np.asarray(gt_mask).astype(bool))
    return ConfusionCounts.from_masks(pred_mask, gt_mask).f1()


def mcc(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Matthews correlation; 0 when any marginal is empty"""
    _require_positive(np.asarray(gt_mask).astype(bool))
    return ConfusionCounts.from_masks(pred_mask, gt_mask).mcc()


def _score_pair(prob_map: np.ndarray, gt_mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(prob_map, dtype=np.float64)
    gt = np.asarray(gt_mask).astype(bool)
    if scores.shape != gt.shape:
        raise DimensionError(f"probability map {scores.shape} and ground truth {gt.shape} differ in shape")
    _require_both_classes(gt)
    return scores.ravel(), gt.ravel()


def roc_auc(prob_map: np.ndarray, gt_mask: np.ndarray) -> float:
    """Mann-Whitney AUC with ties counted one half"""
    scores, gt = _score_pair(prob_map, gt_mask)
    ranks = rankdata(scores)
    positives = int(gt.sum())
    negatives = gt.size - positives
    return float((ranks[gt].sum() - positives * (positives + 1) / 2.0) / (positives * negatives))


def metric_curve(prob_map: np.ndarray, gt_mask: np.ndarray, thresholds: np.ndarray, metric: str) -> np.ndarray:
    """Metric value of prob ≥ t for every threshold t"""
    if metric not in METRICS:
        raise ParameterError(f"Unknown metric '{metric}' (expected one of {METRICS})")
    scores, gt = np.asarray(prob_map, dtype=np.float64).ravel(), np.asarray(gt_mask).astype(bool).ravel()
    positives, negatives = np.sort(scores[gt]), np.sort(scores[~gt])
    thresholds = np.asarray(thresholds, dtype=np.float64)
    tp = (positives.size - np.searchsorted(positives, thresholds, side="left")).astype(np.float64)
    fp = (negatives.size - np.searchsorted(negatives, thresholds, side="left")).astype(np.float64)
    fn = positives.size - tp
    tn = negatives.size - fp
    if metric == "F1":
        denominator = 2 * tp + fp + fn
        return np.divide(2 * tp, denominator, out=np.zeros_like(tp), where=denominator > 0)
    factors = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    return np.divide(tp * tn - fp * fn, np.sqrt(factors), out=np.zeros_like(tp), where=factors > 0)


def threshold_candidates(scores: np.ndarray) -> np.ndarray:
    """{0, 1} plus midpoints between consecutive unique values, ascending"""
    unique = np.unique(np.asarray(scores, dtype=np.float64))
    midpoints = (unique[:-1] + unique[1:]) / 2.0
    return np.unique(np.concatenate([[0.0, 1.0], midpoints]))


def optimal_threshold_score(prob_map: np.ndarray, gt_mask: np.ndarray, metric: str = "F1") -> Tuple[float, float]:
    """(best score, threshold); ties go to the lowest threshold"""
    scores, gt = _score_pair(prob_map, gt_mask)
    candidates = threshold_candidates(scores)
    curve = metric_curve(scores, gt, candidates, metric)
    best = int(np.argmax(curve))
    return float(curve[best]), float(candidates[best])


@dataclass
class ScoreRecord:
    image_id: str
    f1: float
    mcc: float
    auc: float
    f1_threshold: float
    mcc_threshold: float


@dataclass
class DatasetResult:
    threshold_mode: str
    records: List[ScoreRecord] = field(default_factory=list)
    skipped: List[Dict[str, str]] = field(default_factory=list)
    unmatched: List[str] = field(default_factory=list)
    global_thresholds: Optional[Dict[str, float]] = None

    def means(self) -> Dict[str, float]:
        if not self.records:
            return {"f1": float("nan"), "mcc": float("nan"), "auc": float("nan")}
        return {name: float(np.mean([getattr(r, name) for r in self.records])) for name in ("f1", "mcc", "auc")}

    def summary(self) -> Dict:
        means = self.means()
        block = {
            "f1": means["f1"], "mcc": means["mcc"], "auc": means["auc"],
            "scored": len(self.records), "skipped": len(self.skipped), "unmatched": len(self.unmatched),
            "threshold_mode": self.threshold_mode,
        }
        if self.global_thresholds is not None:
            block["global_thresholds"] = self.global_thresholds
        return block

    def to_json(self) -> Dict:
        return {
            "images": [asdict(r) for r in self.records],
            "skipped": self.skipped,
            "unmatched": self.unmatched,
            "summary": self.summary(),
        }


def format_table(rows: Sequence[Dict]) -> str:
    """Step / F1 / MCC / ROC-AUC table, ascending by step"""
    lines = [f"{'Step':>6}  {'F1':>6}  {'MCC':>6}  {'ROC-AUC':>7}"]
    for row in sorted(rows, key=lambda r: r["step"]):
        lines.append(f"{row['step']:>6}  {row['f1']:>6.3f}  {row['mcc']:>6.3f}  {row['auc']:>7.3f}")
    return "\n".join(lines)


def load_map_file(path: str) -> np.ndarray:
    if path.lower().endswith(".srmap"):
        return load_raw_map(path)
    return load_image(path).pixels[:, :, 0].astype(np.float64)


def load_mask_file(path: str) -> np.ndarray:
    """Masks are binarized at 0.5"""
    return load_image(path).pixels.mean(axis=2) > 0.5


def index_dir(directory: str, suffixes: Tuple[str, ...]) -> Dict[str, str]:
    if not os.path.isdir(directory):
        raise ImageIOError(f"{directory}: directory does not exist")
    index: Dict[str, str] = {}
    for name in sorted(os.listdir(directory)):
        stem, suffix = os.path.splitext(name)
        if suffix.lower() not in suffixes:
            continue
        # raw maps take precedence over heat-map PNGs of the same stem
        if stem in index and index[stem].lower().endswith(".srmap"):
            continue
        index[stem] = os.path.join(directory, name)
    return index


class DatasetEvaluator:
    """Scores filename-matched map/mask pairs and aggregates dataset means"""

    def __init__(self, threshold_mode: str = "per-image", workers: int = 1,
                 logger: Optional[logging.Logger] = None):
        if threshold_mode not in THRESHOLD_MODES:
            raise ParameterError(f"Unknown threshold mode '{threshold_mode}'")
        self.threshold_mode = threshold_mode
        self.workers = max(1, workers)
        self.logger = logger or logging.getLogger(__name__)

    def _score(self, item: Tuple[str, np.ndarray, np.ndarray]) -> Tuple[str, Optional[ScoreRecord], str]:
        image_id, prob, gt = item
        try:
            best_f1, t_f1 = optimal_threshold_score(prob, gt, "F1")
            best_mcc, t_mcc = optimal_threshold_score(prob, gt, "MCC")
            auc = roc_auc(prob, gt)
        except (DegenerateMaskError, DimensionError) as e:
            return image_id, None, str(e)
        return image_id, ScoreRecord(image_id, best_f1, best_mcc, auc, t_f1, t_mcc), ""

    def _map(self, fn, items):
        if self.workers == 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            return list(executor.map(fn, items))

    def _apply_global_thresholds(self, result: DatasetResult,
                                 items: Dict[str, Tuple[np.ndarray, np.ndarray]]) -> None:
        scored = [items[r.image_id] for r in result.records]
        pooled = np.concatenate([prob.ravel() for prob, _ in scored])
        candidates = threshold_candidates(pooled)
        if candidates.size > MAX_GLOBAL_CANDIDATES:
            candidates = np.unique(np.quantile(candidates, np.linspace(0.0, 1.0, MAX_GLOBAL_CANDIDATES)))
        chosen: Dict[str, float] = {}
        for metric in METRICS:
            mean_curve = np.mean([metric_curve(prob, gt, candidates, metric) for prob, gt in scored], axis=0)
            chosen[metric] = float(candidates[int(np.argmax(mean_curve))])
        for record in result.records:
            prob, gt = items[record.image_id]
            record.f1 = float(metric_curve(prob, gt, [chosen["F1"]], "F1")[0])
            record.mcc = float(metric_curve(prob, gt, [chosen["MCC"]], "MCC")[0])
            record.f1_threshold, record.mcc_threshold = chosen["F1"], chosen["MCC"]
        result.global_thresholds = chosen

    def evaluate_pairs(self, items: Sequence[Tuple[str, np.ndarray, np.ndarray]],
                       unmatched: Sequence[str] = ()) -> DatasetResult:
        result = DatasetResult(self.threshold_mode, unmatched=list(unmatched))
        for image_id, record, reason in self._map(self._score, items):
            if record is None:
                self.logger.warning(f"⚠️ Skipping {image_id}: {reason}")
                result.skipped.append({"image": image_id, "reason": reason})
            else:
                result.records.append(record)
        if self.threshold_mode == "global" and result.records:
            self._apply_global_thresholds(result, {i: (p, g) for i, p, g in items})
        means = result.means()
        self.logger.info(f"📊 Scored {len(result.records)} images (skipped {len(result.skipped)}, "
                         f"unmatched {len(result.unmatched)}): F1={means['f1']:.3f} "
                         f"MCC={means['mcc']:.3f} ROC-AUC={means['auc']:.3f}")
        return result

    def evaluate_dirs(self, maps_dir: str, masks_dir: str) -> DatasetResult:
        maps = index_dir(maps_dir, MAP_SUFFIXES)
        masks = index_dir(masks_dir, MASK_SUFFIXES)
        unmatched = sorted([f"map:{s}" for s in maps if s not in masks] + [f"mask:{s}" for s in masks if s not in maps])
        for entry in unmatched:
            self.logger.warning(f"⚠️ Unmatched file {entry}")
        items = [(stem, load_map_file(maps[stem]), load_mask_file(masks[stem])) for stem in sorted(maps) if stem in masks]
        return self.evaluate_pairs(items, unmatched)


def evaluate_dataset(maps_dir: str, masks_dir: str, threshold_mode: str = "per-image",
                     workers: int = 1) -> DatasetResult:
    return DatasetEvaluator(threshold_mode, workers).evaluate_dirs(maps_dir, masks_dir)
