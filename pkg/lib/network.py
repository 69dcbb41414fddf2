#!/usr/bin/env python3
"""
SpliceRadar Network
Eighteen-layer camera-model CNN: a constrained 5×5 rich-filter bank, five
valid-padded conv blocks (A), twelve same-padded skip blocks (B), a 3×3
bottleneck producing the 56×56 pre-feature image, and FC1/FC2/FC3.
Also defines the rich-filter penalty, the weight norm and the combined loss.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from lib.errors import DimensionError, ParameterError
from lib.tensor import (
    BatchNormStats, Tensor, add, batch_norm, conv2d, dense, dropout, get_dtype,
    one_hot, reduce_sum, relu, reshape, scale, softmax_cross_entropy, sqrt,
    square, sum_of_squares,
)

logger = logging.getLogger(__name__)

PATCH_SIZE = 72
PRE_FEATURE_SIZE = 56
RF_FILTERS = 64
RF_SUPPORT = 5
BLOCK_A_COUNT = 5
BLOCK_B_COUNT = 12
WIDTH = 19
FC1_UNITS = 75
FEATURE_DIM = 100
KEEP_PROB = 0.8
FLATTEN_ORDER = "row-major-hw"

# Recomputed by hand from param_shapes(); regression constant
PARAMETER_COUNT_C27 = 354143

MiRegFn = Callable[[np.ndarray, Tensor], Tensor]


def _conv_block_names(prefix: str) -> Tuple[str, ...]:
    return (f"{prefix}.w", f"{prefix}.b", f"{prefix}.bn.scale", f"{prefix}.bn.shift")


def block_a_prefixes() -> Tuple[str, ...]:
    return tuple(f"a{i}" for i in range(1, BLOCK_A_COUNT + 1))


def block_b_prefixes() -> Tuple[Tuple[str, str], ...]:
    return tuple((f"b{j}.1", f"b{j}.2") for j in range(1, BLOCK_B_COUNT + 1))


def param_shapes(num_classes: int) -> "OrderedDict[str, Tuple[int, ...]]":
    """Trainable parameter inventory in manifest order"""
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["rf.w"] = (RF_SUPPORT, RF_SUPPORT, 3, RF_FILTERS)
    channels_in = RF_FILTERS
    for prefix in block_a_prefixes():
        w, b, s, t = _conv_block_names(prefix)
        shapes[w] = (3, 3, channels_in, WIDTH)
        shapes[b] = shapes[s] = shapes[t] = (WIDTH,)
        channels_in = WIDTH
    for pair in block_b_prefixes():
        for prefix in pair:
            w, b, s, t = _conv_block_names(prefix)
            shapes[w] = (3, 3, WIDTH, WIDTH)
            shapes[b] = shapes[s] = shapes[t] = (WIDTH,)
    shapes["bottleneck.w"] = (3, 3, WIDTH, 1)
    shapes["bottleneck.b"] = (1,)
    shapes["fc1.w"] = (PRE_FEATURE_SIZE * PRE_FEATURE_SIZE, FC1_UNITS)
    shapes["fc1.b"] = (FC1_UNITS,)
    shapes["fc2.w"] = (FC1_UNITS, FEATURE_DIM)
    shapes["fc2.b"] = (FEATURE_DIM,)
    shapes["fc3.w"] = (FEATURE_DIM, num_classes)
    shapes["fc3.b"] = (num_classes,)
    return shapes


def batch_norm_layers() -> Tuple[str, ...]:
    names = [f"{p}.bn" for p in block_a_prefixes()]
    for pair in block_b_prefixes():
        names.extend(f"{p}.bn" for p in pair)
    return tuple(names)


@dataclass
class ModelParams:
    """Full parameter inventory: trainable tensors plus batch-norm running statistics"""
    num_classes: int
    weights: "OrderedDict[str, Tensor]"
    bn_stats: "OrderedDict[str, BatchNormStats]"

    def trainable(self) -> Dict[str, Tensor]:
        return self.weights

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]


@dataclass
class ForwardOutputs:
    pre_feature: Tensor  # M×56×56
    features: Tensor     # M×100, FC2 output
    logits: Tensor       # M×C


@dataclass
class LossTerms:
    total: Tensor
    ce: float
    rf: float
    mi: float
    l2: float
    outputs: ForwardOutputs


def build_model(num_classes: int, seed: Optional[int] = 0, zero_sum_rf: bool = False) -> ModelParams:
    """Fan-in scaled normal init for every weight, the rich-filter bank included.

    The bank starts off the constraint and the penalty pulls it in during
    training; zero_sum_rf projects it onto the constraint (zero sum per
    filter and channel) at step 0 instead.
    """
    if num_classes < 2:
        raise ParameterError(f"need at least 2 camera models, got C={num_classes}")
    rng = np.random.default_rng(seed)
    dtype = get_dtype()
    weights: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in param_shapes(num_classes).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[:-1]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            if name == "rf.w" and zero_sum_rf:
                data -= data.mean(axis=(0, 1), keepdims=True)
        elif name.endswith(".bn.scale"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        weights[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    bn_stats = OrderedDict((name, BatchNormStats.fresh(WIDTH)) for name in batch_norm_layers())
    return ModelParams(num_classes, weights, bn_stats)


def count_parameters(params: ModelParams) -> int:
    return int(sum(t.size for t in params.weights.values()))


def _patches_of(batch) -> np.ndarray:
    patches = getattr(batch, "patches", batch)
    patches = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    if patches.ndim != 4 or patches.shape[1:] != (PATCH_SIZE, PATCH_SIZE, 3):
        raise DimensionError(f"expected M×{PATCH_SIZE}×{PATCH_SIZE}×3 patches, got {patches.shape}")
    return patches


def _conv_bn(h: Tensor, params: ModelParams, prefix: str, padding: str, mode: str) -> Tensor:
    w, b, s, t = _conv_block_names(prefix)
    h = conv2d(h, params[w], params[b], padding=padding)
    return batch_norm(h, params[s], params[t], mode, params.bn_stats[f"{prefix}.bn"])


def forward(batch, params: ModelParams, mode: str = "infer",
            rng: Optional[np.random.Generator] = None, keep_prob: float = KEEP_PROB) -> ForwardOutputs:
    """Forward pass over a PatchBatch (or an M×72×72×3 array)"""
    patches = _patches_of(batch)
    count = patches.shape[0]
    h = conv2d(Tensor(patches), params["rf.w"], padding="valid")
    for prefix in block_a_prefixes():
        h = relu(_conv_bn(h, params, prefix, "valid", mode))
    for first, second in block_b_prefixes():
        s1 = relu(_conv_bn(h, params, first, "same", mode))
        h = relu(add(s1, _conv_bn(s1, params, second, "same", mode)))
    pre = conv2d(h, params["bottleneck.w"], params["bottleneck.b"], padding="valid")
    if pre.shape[1:3] != (PRE_FEATURE_SIZE, PRE_FEATURE_SIZE):
        raise DimensionError(f"pre-feature image is {pre.shape[1:3]}, expected 56×56")

    pre_feature = reshape(pre, (count, PRE_FEATURE_SIZE, PRE_FEATURE_SIZE))
    flat = reshape(pre, (count, PRE_FEATURE_SIZE * PRE_FEATURE_SIZE))
    hidden = dense(flat, params["fc1.w"], params["fc1.b"])
    hidden = relu(dropout(hidden, keep_prob, mode, rng))
    features = dense(hidden, params["fc2.w"], params["fc2.b"])
    logits = dense(relu(features), params["fc3.w"], params["fc3.b"])
    return ForwardOutputs(pre_feature, features, logits)


def predict_proba(batch, params: ModelParams) -> np.ndarray:
    logits = forward(batch, params, mode="infer").logits.data.astype(np.float64)
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    return exp / exp.sum(axis=1, keepdims=True)


def rf_penalty(params: ModelParams, channel_mode: str = "summed") -> Tensor:
    """R_RF = sqrt(Σ_k (Σ_{m,n} w_k(m,n))²), one constraint per filter (or per filter and channel)"""
    bank = params["rf.w"]
    if channel_mode == "summed":
        sums = reduce_sum(bank, axis=(0, 1, 2))
    elif channel_mode == "per_channel":
        sums = reduce_sum(bank, axis=(0, 1))
    else:
        raise ParameterError(f"Unknown rf channel mode '{channel_mode}'")
    return sqrt(reduce_sum(square(sums)))


def regularized_names(params: ModelParams, scope: str = "weights") -> Tuple[str, ...]:
    if scope == "weights":
        return tuple(n for n in params.weights if n.endswith(".w"))
    if scope == "all":
        return tuple(params.weights)
    raise ParameterError(f"Unknown l2 scope '{scope}'")


def weight_norm(params: ModelParams, scope: str = "weights") -> Tensor:
    """‖W‖₂: Euclidean norm over convolution and FC weights (or every trainable tensor)"""
    return sqrt(sum_of_squares([params[n] for n in regularized_names(params, scope)]))


def total_loss(batch, params: ModelParams, rf_weight: float = 1.0, mi_weight: float = 1.0,
               l2_weight: float = 5e-4, mi_reg_fn: Optional[MiRegFn] = None, mode: str = "train",
               rng: Optional[np.random.Generator] = None, l2_scope: str = "weights",
               channel_mode: str = "summed", keep_prob: float = KEEP_PROB) -> LossTerms:
    """L = L_CE + λ·R_RF + γ·R_MI + ω·‖W‖₂"""
    for label, value in (("lambda", rf_weight), ("gamma", mi_weight), ("omega", l2_weight)):
        if value < 0:
            raise ParameterError(f"{label} must be non-negative, got {value}")
    labels = getattr(batch, "labels", None)
    if labels is None:
        raise ParameterError("total_loss needs a labelled PatchBatch")
    outputs = forward(batch, params, mode=mode, rng=rng, keep_prob=keep_prob)
    ce = softmax_cross_entropy(outputs.logits, one_hot(labels, params.num_classes))
    rf = rf_penalty(params, channel_mode)
    l2 = weight_norm(params, l2_scope)
    mi = mi_reg_fn(_patches_of(batch), outputs.pre_feature) if mi_reg_fn is not None else Tensor(0.0)

    total = add(add(ce, scale(rf, rf_weight)), add(scale(mi, mi_weight), scale(l2, l2_weight)))
    return LossTerms(total, ce.item(), rf.item(), mi.item(), l2.item(), outputs)
