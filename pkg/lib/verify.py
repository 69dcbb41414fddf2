#!/usr/bin/env python3
"""
Self-Verification Suites
Gradient checks against central finite differences, histogram-MI
properties, EM monotonicity and recovery, and metric oracles. Each suite
reports the names of the cases that failed.
"""

import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from lib.gmm import em_single_run, gmm_em_fit, random_init
from lib.metrics import ConfusionCounts, f1_score, mcc, metric_curve, optimal_threshold_score, roc_auc
from lib.mi_reg import HistogramSpec, joint_distribution, mi_regularizer, mutual_information
from lib.network import rf_penalty
from lib.tensor import (
    BatchNormStats, Tape, Tensor, add, backward, batch_norm, conv2d, dense, dropout, one_hot, precision,
    reduce_sum, relu, reshape, scale, softmax_cross_entropy, sqrt, square, sum_of_squares,
)

logger = logging.getLogger(__name__)

ArrayBuilder = Callable[[np.random.Generator], List[np.ndarray]]
Objective = Callable[..., Tensor]


@dataclass
class GradientCase:
    """A scalar objective of some input arrays; `build` draws one random instance"""
    name: str
    build: ArrayBuilder
    objective: Objective
    tolerance: float = 1e-5
    step: float = 1e-3
    max_coords: Optional[int] = None


@dataclass
class SuiteResult:
    name: str
    checks: int = 0
    failures: List[str] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures


def _scalarize(out: Tensor, offset: np.ndarray) -> Tensor:
    return sum_of_squares([add(out, Tensor(offset))])


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    values = rng.normal(size=shape)
    return np.where(np.abs(values) < margin, np.sign(values + 1e-12) * margin * 2, values)


def default_gradient_cases() -> List[GradientCase]:
    offsets: Dict[str, np.ndarray] = {}

    def offset(key: str, shape) -> np.ndarray:
        if key not in offsets or offsets[key].shape != tuple(shape):
            offsets[key] = np.random.default_rng(len(key)).normal(size=shape)
        return offsets[key]

    def conv_case(padding: str, k: int) -> GradientCase:
        def build(rng):
            return [rng.normal(size=(2, 7, 7, 2)), rng.normal(size=(k, k, 2, 3)), rng.normal(size=3)]

        def objective(x, w, b):
            out = conv2d(x, w, b, padding=padding)
            return _scalarize(out, offset(f"conv-{padding}-{k}", out.shape))
        return GradientCase(f"conv2d[{padding},k={k}]", build, objective)

    def bn_case(mode: str) -> GradientCase:
        def build(rng):
            return [rng.normal(size=(4, 3, 3, 2)), rng.uniform(0.5, 1.5, size=2), rng.normal(size=2)]

        def objective(x, s, t):
            stats = BatchNormStats(np.array([0.1, -0.2]), np.array([0.8, 1.3])) if mode == "infer" else None
            out = batch_norm(x, s, t, mode, stats)
            return _scalarize(out, offset(f"bn-{mode}", out.shape))
        return GradientCase(f"batch_norm[{mode}]", build, objective)

    def unary(name: str, fn: Callable[[Tensor], Tensor], build: ArrayBuilder) -> GradientCase:
        def objective(x):
            out = fn(x)
            return _scalarize(out, offset(name, out.shape))
        return GradientCase(name, build, objective)

    def ce_build(rng):
        return [rng.normal(size=(5, 4))]

    def ce_objective(logits):
        labels = np.array([0, 3, 1, 2, 1])
        return softmax_cross_entropy(logits, one_hot(labels, 4))

    def dense_build(rng):
        return [rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=4)]

    def dense_objective(x, w, b):
        out = dense(x, w, b)
        return _scalarize(out, offset("dense", out.shape))

    def rf_build(rng):
        return [rng.normal(0.0, 0.1, size=(5, 5, 3, 4))]

    def rf_objective(bank):
        return rf_penalty({"rf.w": bank})

    def mi_build(rng):
        return [rng.uniform(0.0, 1.0, size=(2, 56, 56))]

    mi_patches = np.random.default_rng(11).uniform(0.0, 1.0, size=(2, 72, 72, 3))

    def mi_objective(pre):
        return mi_regularizer(mi_patches, pre, HistogramSpec(estimator="soft"))

    return [
        conv_case("valid", 3), conv_case("valid", 5), conv_case("same", 3),
        bn_case("train"), bn_case("infer"),
        unary("relu", relu, lambda rng: [_away_from_zero(rng, (3, 4))]),
        unary("dropout", lambda x: dropout(x, 0.8, "train", 7), lambda rng: [rng.normal(size=(3, 6))]),
        GradientCase("dense", dense_build, dense_objective),
        GradientCase("softmax_cross_entropy", ce_build, ce_objective),
        unary("add", lambda x: add(x, x), lambda rng: [rng.normal(size=(2, 3))]),
        unary("scale", lambda x: scale(x, -1.7), lambda rng: [rng.normal(size=(2, 3))]),
        unary("reduce_sum", lambda x: reduce_sum(x, axis=(0, 2)), lambda rng: [rng.normal(size=(2, 3, 4))]),
        unary("square", square, lambda rng: [rng.normal(size=(3, 3))]),
        unary("sqrt", sqrt, lambda rng: [rng.uniform(0.5, 2.0, size=(3, 3))]),
        unary("reshape", lambda x: reshape(x, (6, 2)), lambda rng: [rng.normal(size=(3, 4))]),
        GradientCase("sum_of_squares", lambda rng: [rng.normal(size=(2, 2)), rng.normal(size=3)],
                     lambda a, b: sum_of_squares([a, b])),
        GradientCase("rf_penalty", rf_build, rf_objective),
        GradientCase("mi_regularizer[soft]", mi_build, mi_objective, tolerance=1e-4, step=1e-6, max_coords=40),
    ]


def gradient_error(case: GradientCase, rng: np.random.Generator) -> float:
    """Relative error ‖g_auto − g_fd‖ / max(‖g_auto‖, ‖g_fd‖) over the checked coordinates"""
    with precision("float64"):
        arrays = [np.array(a, dtype=np.float64) for a in case.build(rng)]
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            out = case.objective(*tensors)
        backward(tape, out, tensors)
        auto_parts, numeric_parts = [], []
        for array, tensor in zip(arrays, tensors):
            coords = list(np.ndindex(array.shape))
            if case.max_coords is not None and len(coords) > case.max_coords:
                picks = rng.choice(len(coords), size=case.max_coords, replace=False)
                coords = [coords[p] for p in picks]
            for coord in coords:
                original = array[coord]
                values = []
                for sign in (1.0, -1.0):
                    array[coord] = original + sign * case.step
                    values.append(case.objective(*[Tensor(a) for a in arrays]).item())
                array[coord] = original
                numeric_parts.append((values[0] - values[1]) / (2.0 * case.step))
                auto_parts.append(tensor.grad[coord])
    auto, numeric = np.asarray(auto_parts), np.asarray(numeric_parts)
    scale_ = max(np.linalg.norm(auto), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(auto - numeric) / scale_)


def run_gradient_suite(cases: Optional[Sequence[GradientCase]] = None, instances: int = 20,
                       seed: int = 0) -> SuiteResult:
    result = SuiteResult("gradients")
    started = time.perf_counter()
    for case in cases if cases is not None else default_gradient_cases():
        rng = np.random.default_rng(np.random.SeedSequence([seed, len(case.name)]))
        worst = max(gradient_error(case, rng) for _ in range(instances))
        result.checks += instances
        if not worst < case.tolerance:
            result.failures.append(f"{case.name}: relative error {worst:.3e} ≥ {case.tolerance:g}")
    result.seconds = time.perf_counter() - started
    return result


def hard_entropy(image: np.ndarray, bins: int = 50) -> float:
    marginal = joint_distribution(image, image, HistogramSpec(bins)).marginal_a
    marginal = marginal[marginal > 0]
    return float(-(marginal * np.log(marginal)).sum())


def independent_pair(rng: np.random.Generator, size: int = 56) -> np.ndarray:
    """Images whose hard joint histogram factorizes exactly: a varies by row, b by column"""
    rows = rng.uniform(0.0, 1.0, size=size)
    cols = rng.uniform(0.0, 1.0, size=size)
    return np.stack([np.repeat(rows[:, None], size, axis=1), np.repeat(cols[None, :], size, axis=0)])


def run_mi_suite(trials: int = 1000, seed: int = 0) -> SuiteResult:
    result = SuiteResult("mutual-information")
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    spec = HistogramSpec(50, "hard")
    for trial in range(trials):
        a = rng.uniform(0.0, 1.0, size=(16, 16)) ** rng.uniform(0.5, 2.0)
        b = np.clip(a + rng.normal(0.0, rng.uniform(0.0, 0.5), size=a.shape), 0.0, 1.0)
        self_mi = mutual_information(a, a, spec)
        if abs(self_mi - hard_entropy(a)) > 1e-9:
            result.failures.append(f"MI(X,X) != H(X) in trial {trial}")
        if mutual_information(a, b, spec) < 0.0:
            result.failures.append(f"negative hard MI in trial {trial}")
        first, second = independent_pair(rng, 12)
        if abs(mutual_information(first, second, spec)) > 1e-9:
            result.failures.append(f"non-zero MI for an independent pair in trial {trial}")
        result.checks += 3
        if len(result.failures) > 10:
            break
    result.seconds = time.perf_counter() - started
    return result


def two_cluster_data(rng: np.random.Generator, per_cluster: int = 100) -> np.ndarray:
    return np.concatenate([rng.normal(-10.0, 0.1, per_cluster), rng.normal(10.0, 0.1, per_cluster)])[:, None]


def run_em_suite(datasets: int = 50, restarts: int = 100, seed: int = 0) -> SuiteResult:
    result = SuiteResult("em")
    started = time.perf_counter()
    streams = np.random.SeedSequence(seed).spawn(datasets + 1)
    for index in range(datasets):
        rng = np.random.default_rng(streams[index])
        data = rng.normal(size=(int(rng.integers(8, 40)), int(rng.integers(1, 4))))
        data[: len(data) // 3] += rng.normal(0.0, 3.0, size=data.shape[1])
        for restart in range(restarts):
            history = em_single_run(data, random_init(data, rng)).history
            drops = np.diff(history)
            result.checks += 1
            if np.any(drops < -1e-9):
                result.failures.append(f"log-likelihood decreased (dataset {index}, restart {restart}, "
                                       f"min step {drops.min():.3e})")
                break

    rng = np.random.default_rng(streams[-1])
    data = two_cluster_data(rng)
    truth = np.repeat([0, 1], 100)
    model = gmm_em_fit(data, restarts=min(restarts, 10), seed=seed)
    assigned = model.responsibilities(data).argmax(axis=1)
    accuracy = max(np.mean(assigned == truth), np.mean(assigned != truth))
    result.checks += 1
    if accuracy < 0.99:
        result.failures.append(f"two-cluster recovery accuracy {accuracy:.3f} < 0.99")
    result.seconds = time.perf_counter() - started
    return result


def _enumerated_counts(pred: Sequence[bool], gt: Sequence[bool]) -> ConfusionCounts:
    tp = fp = tn = fn = 0
    for p, g in zip(pred, gt):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, tn, fn)


def pairwise_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    positives, negatives = scores[labels], scores[~labels]
    wins = (positives[:, None] > negatives[None, :]).sum() + 0.5 * (positives[:, None] == negatives[None, :]).sum()
    return float(wins / (positives.size * negatives.size))


def dense_sweep(scores: np.ndarray, labels: np.ndarray, metric: str) -> float:
    return float(metric_curve(scores, labels, np.arange(256) / 255.0, metric).max())


def run_metric_suite(instances: int = 1000, exhaustive: bool = True, seed: int = 0) -> SuiteResult:
    result = SuiteResult("metrics")
    started = time.perf_counter()
    masks = [np.array(bits, dtype=bool) for bits in itertools.product([False, True], repeat=9)]
    gts = [m for m in masks if m.any()]
    if not exhaustive:
        gts = gts[::16]
    for gt in gts:
        for pred in masks:
            oracle = _enumerated_counts(pred, gt)
            result.checks += 1
            if f1_score(pred.reshape(3, 3), gt.reshape(3, 3)) != oracle.f1() or \
                    mcc(pred.reshape(3, 3), gt.reshape(3, 3)) != oracle.mcc():
                result.failures.append(f"F1/MCC mismatch for pred={pred.astype(int).tolist()} "
                                       f"gt={gt.astype(int).tolist()}")
                break

    rng = np.random.default_rng(seed)
    for trial in range(instances):
        labels = rng.random(64) < rng.uniform(0.2, 0.8)
        labels[0], labels[1] = True, False
        scores = np.round(rng.random(64), int(rng.integers(1, 4)))
        result.checks += 1
        if abs(roc_auc(scores, labels) - pairwise_auc(scores, labels)) > 1e-12:
            result.failures.append(f"ROC-AUC disagrees with the pairwise oracle in trial {trial}")
            break
    for trial in range(max(1, instances // 10)):
        labels = rng.random(8) < 0.5
        labels[0], labels[1] = True, False
        scores = rng.integers(0, 256, size=8) / 255.0
        for metric in ("F1", "MCC"):
            result.checks += 1
            best, _ = optimal_threshold_score(scores, labels, metric)
            if abs(best - dense_sweep(scores, labels, metric)) > 1e-12:
                result.failures.append(f"optimal {metric} disagrees with the dense sweep in trial {trial}")
    result.seconds = time.perf_counter() - started
    return result


def run_self_check(quick: bool = False, seed: int = 0,
                   gradient_cases: Optional[Sequence[GradientCase]] = None,
                   log: Optional[logging.Logger] = None) -> List[SuiteResult]:
    log = log or logger
    suites = [
        lambda: run_gradient_suite(gradient_cases, instances=3 if quick else 20, seed=seed),
        lambda: run_mi_suite(trials=100 if quick else 1000, seed=seed),
        lambda: run_em_suite(datasets=5 if quick else 50, restarts=10 if quick else 100, seed=seed),
        lambda: run_metric_suite(instances=100 if quick else 1000, exhaustive=not quick, seed=seed),
    ]
    results = []
    for suite in suites:
        outcome = suite()
        results.append(outcome)
        if outcome.passed:
            log.info(f"✅ {outcome.name}: {outcome.checks} checks passed ({outcome.seconds:.1f}s)")
        else:
            for failure in outcome.failures:
                log.error(f"❌ {outcome.name}: {failure}")
    return results
