#!/usr/bin/env python3
"""
Mutual-Information Regularizer
Histogram MI between the gray, resized input patch ρ(P) and the network's
pre-feature image p. Hard counting is the reference estimator; soft
(triangular-kernel) binning gives a differentiable stand-in for training.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import xlogy
from skimage.transform import resize

from lib.errors import DimensionError, ParameterError
from lib.tensor import Tensor, record_op

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
PATCH_SHAPE = (72, 72, 3)
PRE_FEATURE_SHAPE = (56, 56)


@dataclass(frozen=True)
class HistogramSpec:
    """Bin layout and estimator for histogram MI"""
    bins: int = 50
    estimator: str = "hard"
    kernel_width: float = 1.0  # soft kernel half-width, in bins

    def __post_init__(self):
        if self.bins < 2:
            raise ParameterError(f"need at least 2 bins, got {self.bins}")
        if self.estimator not in ("hard", "soft"):
            raise ParameterError(f"Unknown MI estimator '{self.estimator}'")
        if self.kernel_width < 0.5:
            raise ParameterError("soft kernel width must be at least half a bin")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.bins)


@dataclass
class JointDistribution:
    """B×B joint probability table; marginals are its row and column sums"""
    joint: np.ndarray

    @property
    def marginal_a(self) -> np.ndarray:
        return self.joint.sum(axis=1)

    @property
    def marginal_b(self) -> np.ndarray:
        return self.joint.sum(axis=0)

    def mutual_information(self) -> float:
        p = self.joint
        outer = np.outer(self.marginal_a, self.marginal_b)
        mask = p > 0
        return float(np.sum(p[mask] * np.log(p[mask] / outer[mask])))


def rho_transform(patch: np.ndarray) -> np.ndarray:
    """72×72×3 RGB patch -> 56×56 Rec.601 luminance, bilinear resize"""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != PATCH_SHAPE:
        raise DimensionError(f"rho_transform expects a {PATCH_SHAPE} patch, got {patch.shape}")
    gray = patch @ LUMA_WEIGHTS
    small = resize(gray, PRE_FEATURE_SHAPE, order=1, mode="edge", anti_aliasing=False)
    return np.clip(small, 0.0, 1.0)


def normalize_range(image: np.ndarray) -> Optional[np.ndarray]:
    """Min-max normalize to [0,1]; None for a zero-range image"""
    values = np.asarray(image, dtype=np.float64).ravel()
    low, high = values.min(), values.max()
    if high <= low:
        return None
    return (values - low) / (high - low)


def hard_bin_indices(values: np.ndarray, bins: int) -> np.ndarray:
    """Nearest bin center among linspace(0, 1, bins)"""
    return np.clip(np.floor(values * (bins - 1) + 0.5).astype(np.int64), 0, bins - 1)


def soft_bin_weights(values: np.ndarray, spec: HistogramSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample normalized triangular-kernel weights and their derivative w.r.t. the value"""
    width = spec.kernel_width / (spec.bins - 1)
    diff = values[:, None] - spec.centers[None, :]
    inside = np.abs(diff) < width
    kernel = np.where(inside, 1.0 - np.abs(diff) / width, 0.0)
    dkernel = np.where(inside, -np.sign(diff) / width, 0.0)
    total = kernel.sum(axis=1, keepdims=True)
    weights = kernel / total
    dweights = (dkernel - weights * dkernel.sum(axis=1, keepdims=True)) / total
    return weights, dweights


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"MI needs equally shaped images, got {a.shape} and {b.shape}")
    if a.size < 4:
        raise ParameterError("MI needs at least 4 pixels")


def joint_distribution(a: np.ndarray, b: np.ndarray, spec: HistogramSpec = HistogramSpec()) -> JointDistribution:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    na = normalize_range(a)
    nb = normalize_range(b)
    na = np.zeros(a.size) if na is None else na
    nb = np.zeros(b.size) if nb is None else nb
    bins = spec.bins
    if spec.estimator == "hard":
        flat = hard_bin_indices(na, bins) * bins + hard_bin_indices(nb, bins)
        counts = np.bincount(flat, minlength=bins * bins).astype(np.float64)
        return JointDistribution((counts / a.size).reshape(bins, bins))
    wa, _ = soft_bin_weights(na, spec)
    wb, _ = soft_bin_weights(nb, spec)
    return JointDistribution(wa.T @ wb / a.size)


def mutual_information(a: np.ndarray, b: np.ndarray, spec: HistogramSpec = HistogramSpec()) -> float:
    """Histogram MI in nats; 0 when either image has zero range"""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    if normalize_range(a) is None or normalize_range(b) is None:
        return 0.0
    value = joint_distribution(a, b, spec).mutual_information()
    return max(value, 0.0) if spec.estimator == "hard" else value


def _soft_mi_and_grad(reference: np.ndarray, pre_feature: np.ndarray, spec: HistogramSpec,
                      with_grad: bool) -> Tuple[float, Optional[np.ndarray]]:
    ref = normalize_range(reference)
    x = np.asarray(pre_feature, dtype=np.float64).ravel()
    lo, hi = int(np.argmin(x)), int(np.argmax(x))
    spread = x[hi] - x[lo]
    if ref is None or spread <= 0:
        return 0.0, (np.zeros(pre_feature.shape) if with_grad else None)

    xn = (x - x[lo]) / spread
    wa, _ = soft_bin_weights(ref, spec)
    wb, dwb = soft_bin_weights(xn, spec)
    count = x.size
    joint = wa.T @ wb / count
    pa, pb = wa.mean(axis=0), wb.mean(axis=0)
    value = float(xlogy(joint, joint).sum() - xlogy(pa, pa).sum() - xlogy(pb, pb).sum())
    if not with_grad:
        return value, None

    # zero-mass cells only meet zero kernel derivatives
    log_joint = np.log(np.where(joint > 0, joint, 1.0))
    log_pb = np.log(np.where(pb > 0, pb, 1.0))
    d_wb = (wa @ (log_joint + 1.0) - (log_pb + 1.0)) / count
    g_norm = (d_wb * dwb).sum(axis=1)
    grad = g_norm / spread
    grad[lo] += np.sum(g_norm * (xn - 1.0)) / spread
    grad[hi] -= np.sum(g_norm * xn) / spread
    return value, grad.reshape(pre_feature.shape)


def soft_mutual_information(reference: np.ndarray, pre_feature: np.ndarray,
                            spec: HistogramSpec = HistogramSpec(estimator="soft")) -> Tuple[float, np.ndarray]:
    """Soft-binned MI and its gradient with respect to pre_feature"""
    reference = np.asarray(reference, dtype=np.float64)
    pre_feature = np.asarray(pre_feature, dtype=np.float64)
    _check_pair(reference, pre_feature)
    value, grad = _soft_mi_and_grad(reference, pre_feature, spec, with_grad=True)
    return value, grad


def mi_regularizer(patches: Union[np.ndarray, Sequence[np.ndarray]], pre_features: Union[Tensor, np.ndarray],
                   spec: HistogramSpec = HistogramSpec(estimator="soft")) -> Tensor:
    """R_MI = mean over the batch of MI(ρ(P_i), p_i); soft mode is differentiable w.r.t. pre_features"""
    features = pre_features if isinstance(pre_features, Tensor) else Tensor(pre_features)
    count = len(patches)
    if count == 0:
        raise ParameterError("mi_regularizer needs a non-empty batch")
    if count != features.shape[0]:
        raise DimensionError(f"{count} patches but {features.shape[0]} pre-feature images")
    references = [rho_transform(p) for p in patches]
    for ref in references:
        if ref.shape != features.shape[1:]:
            raise DimensionError(f"pre-feature images must be {ref.shape}, got {features.shape[1:]}")

    if spec.estimator == "hard":
        values = [mutual_information(r, f, spec) for r, f in zip(references, features.data)]
        return Tensor(float(np.mean(values)), dtype=features.data.dtype)

    with_grad = features.requires_grad
    values, grads = [], []
    for ref, feature in zip(references, features.data):
        value, grad = _soft_mi_and_grad(ref, feature, spec, with_grad)
        values.append(value)
        grads.append(grad)
    result = Tensor(float(np.mean(values)), dtype=features.data.dtype)
    if not with_grad:
        return result
    stacked = (np.stack(grads) / count).astype(features.data.dtype)
    return record_op("mi_regularizer", (features,), result, lambda g: (stacked * g,))
