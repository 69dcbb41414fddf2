#!/usr/bin/env python3
"""
Tensor Core
Minimal dense-tensor engine with reverse-mode automatic differentiation.
Provides the layer primitives the SpliceRadar network is built from
(conv2d, batch_norm, relu, dropout, dense, softmax_cross_entropy), a few
generic helpers used by the losses, and the Adam optimizer.

Tensors are NHWC. Primitives record onto the innermost active Tape of the
calling thread; outside a tape they run as plain inference.
"""

import contextlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax, softmax

from lib.errors import ContractError, DimensionError, NumericError, ParameterError

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.99
# Column matrices up to this size are kept for the weight gradient; larger ones are rebuilt
COL_CACHE_BYTES = 64 * 1024 * 1024

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_settings = {"dtype": np.float32, "debug": False}
_local = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, Sequence[float]]


def set_precision(name: str) -> None:
    """Select the scalar type used for new tensors (float32 or float64)"""
    if name not in _PRECISIONS:
        raise ParameterError(f"Unknown precision '{name}', expected one of {sorted(_PRECISIONS)}")
    _settings["dtype"] = _PRECISIONS[name]


def get_dtype() -> type:
    return _settings["dtype"]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch precision, e.g. to float64 for gradient checks"""
    previous = _settings["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _settings["dtype"] = previous


def set_debug(enabled: bool) -> None:
    """Assert finite outputs after every forward primitive"""
    _settings["debug"] = bool(enabled)


class Tensor:
    """N-dimensional array with optional gradient tape participation"""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None, dtype: Optional[type] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or get_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, factor: float) -> "Tensor":
        return scale(self, factor)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{label})"


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of primitive applications; single writer"""

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, loss: Tensor, leaves: Optional[Sequence[Tensor]] = None) -> List[Tensor]:
        return backward(self, loss, leaves)


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def _as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(op: str, inputs: Sequence[Tensor], output: Tensor,
            backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    if _settings["debug"] and not np.all(np.isfinite(output.data)):
        raise NumericError(f"{op} produced non-finite values")
    stack = _tape_stack()
    if stack and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        stack[-1].entries.append(TapeEntry(op, tuple(inputs), output, backward_fn))
    return output


# Primitives defined outside this module (the MI regularizer) record through this
record_op = _record


def backward(tape: Tape, loss: Tensor, leaves: Optional[Sequence[Tensor]] = None) -> List[Tensor]:
    """Populate .grad of every requires_grad leaf by reverse traversal of the tape.

    Leaves recorded on the tape (or passed explicitly) that the loss does not
    depend on receive a zero gradient.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss, got {shape}")

    produced = {id(entry.output) for entry in tape.entries}
    if id(loss) not in produced:
        raise ContractError("loss was not produced through this tape")

    leaf_map: Dict[int, Tensor] = {}
    for entry in tape.entries:
        for tensor in entry.inputs:
            if tensor.requires_grad and id(tensor) not in produced:
                leaf_map[id(tensor)] = tensor
    for tensor in leaves or ():
        if tensor.requires_grad:
            leaf_map[id(tensor)] = tensor

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        grad_out = grads.pop(id(entry.output), None)
        if grad_out is None:
            continue
        for tensor, grad_in in zip(entry.inputs, entry.backward(grad_out)):
            if grad_in is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grads[key] + grad_in if key in grads else grad_in

    for key, tensor in leaf_map.items():
        grad = grads.get(key)
        if grad is None:
            tensor.grad = np.zeros_like(tensor.data)
        else:
            tensor.grad = np.asarray(grad, dtype=tensor.data.dtype).reshape(tensor.shape)
    return list(leaf_map.values())


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------

def _im2col(padded: np.ndarray, k: int) -> np.ndarray:
    """Contiguous (M·Ho·Wo)×(k·k·C) column matrix, columns ordered (row, col, channel)"""
    count, height, width, channels = padded.shape
    out_h, out_w = height - k + 1, width - k + 1
    cols = np.empty((count, out_h, out_w, k, k, channels), dtype=padded.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = padded[:, i:i + out_h, j:j + out_w, :]
    return cols.reshape(count * out_h * out_w, k * k * channels)


def _col2im(cols: np.ndarray, shape: Tuple[int, ...], k: int) -> np.ndarray:
    """Scatter-add a column-matrix gradient back onto the padded input"""
    count, height, width, channels = shape
    out_h, out_w = height - k + 1, width - k + 1
    blocks = cols.reshape(count, out_h, out_w, k, k, channels)
    image = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            image[:, i:i + out_h, j:j + out_w, :] += blocks[:, :, :, i, j, :]
    return image


def conv2d(x: ArrayLike, kernels: ArrayLike, bias: Optional[ArrayLike] = None,
           padding: str = "valid") -> Tensor:
    """Stride-1 2-D convolution of an H×W×Cin (or M×H×W×Cin) input with k×k×Cin×Cout kernels"""
    x, w = _as_tensor(x), _as_tensor(kernels)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d expects H×W×C or M×H×W×C input, got shape {x.shape}")
    if w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
        raise DimensionError(f"conv2d kernels must be k×k×Cin×Cout with odd k, got {w.shape}")
    k = w.shape[0]
    if xd.shape[3] != w.shape[2]:
        raise DimensionError(f"conv2d input has {xd.shape[3]} channels but kernels expect {w.shape[2]}")

    if padding == "same":
        pad = k // 2
        xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    elif padding == "valid":
        pad = 0
        if xd.shape[1] < k or xd.shape[2] < k:
            raise DimensionError(f"valid conv2d needs input of at least {k}×{k}, got {xd.shape[1]}×{xd.shape[2]}")
        xp = xd
    else:
        raise ParameterError(f"Unknown padding mode '{padding}'")

    cols = _im2col(xp, k)
    kernel_matrix = w.data.reshape(k * k * w.shape[2], w.shape[3])
    out = (cols @ kernel_matrix).reshape(xp.shape[0], xp.shape[1] - k + 1, xp.shape[2] - k + 1, w.shape[3])
    cached = cols if w.requires_grad and cols.nbytes <= COL_CACHE_BYTES else None
    del cols
    inputs: Tuple[Tensor, ...] = (x, w)
    b = None
    if bias is not None:
        b = _as_tensor(bias)
        if b.shape != (w.shape[3],):
            raise DimensionError(f"conv2d bias must have shape ({w.shape[3]},), got {b.shape}")
        out = out + b.data
        inputs = (x, w, b)
    result = Tensor(out[0] if single else out, dtype=xd.dtype)

    def _backward(grad: np.ndarray):
        g = grad[None] if single else grad
        gx = gw = gb = None
        g2 = g.reshape(-1, w.shape[3])
        if w.requires_grad:
            cols_in = cached if cached is not None else _im2col(xp, k)
            gw = (cols_in.T @ g2).reshape(w.shape)
        if x.requires_grad:
            gxp = _col2im(g2 @ kernel_matrix.T, xp.shape, k)
            if pad:
                gxp = gxp[:, pad:-pad, pad:-pad, :]
            gx = gxp[0] if single else gxp
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 1, 2))
        return (gx, gw, gb)[:len(inputs)]

    return _record("conv2d", inputs, result, _backward)


@dataclass
class BatchNormStats:
    """Running per-channel statistics of a batch-norm layer"""
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, momentum: float = BN_MOMENTUM) -> "BatchNormStats":
        return cls(np.zeros(channels, dtype=get_dtype()), np.ones(channels, dtype=get_dtype()), momentum)


def batch_norm(x: ArrayLike, scale: ArrayLike, shift: ArrayLike, mode: str = "train",
               running_stats: Optional[BatchNormStats] = None, eps: float = BN_EPS) -> Tensor:
    """Per-channel (last axis) batch normalization"""
    x, gamma, beta = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(f"batch_norm scale/shift must have shape ({channels},)")
    axes = tuple(range(x.ndim - 1))

    if mode == "train":
        if x.shape[0] < 2:
            raise ParameterError("batch_norm in train mode needs a batch of at least 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_stats is not None:
            m = running_stats.momentum
            running_stats.mean[...] = m * running_stats.mean + (1.0 - m) * mean
            running_stats.var[...] = m * running_stats.var + (1.0 - m) * var
    elif mode == "infer":
        if running_stats is None:
            raise ParameterError("batch_norm in infer mode needs running statistics")
        mean = running_stats.mean.astype(x.data.dtype)
        var = running_stats.var.astype(x.data.dtype)
    else:
        raise ParameterError(f"Unknown batch_norm mode '{mode}'")

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean) * inv_std
    result = Tensor(x_hat * gamma.data + beta.data, dtype=x.data.dtype)
    count = x.size // channels

    def _backward(grad: np.ndarray):
        g_gamma = (grad * x_hat).sum(axis=axes) if gamma.requires_grad else None
        g_beta = grad.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            g_hat = grad * gamma.data
            if mode == "train":
                gx = inv_std / count * (count * g_hat - g_hat.sum(axis=axes)
                                        - x_hat * (g_hat * x_hat).sum(axis=axes))
            else:
                gx = g_hat * inv_std
        return gx, g_gamma, g_beta

    return _record("batch_norm", (x, gamma, beta), result, _backward)


def relu(x: ArrayLike) -> Tensor:
    x = _as_tensor(x)
    active = x.data > 0
    result = Tensor(np.where(active, x.data, 0), dtype=x.data.dtype)
    return _record("relu", (x,), result, lambda g: (g * active,))


def dropout(x: ArrayLike, keep_prob: float, mode: str = "train",
            rng: Union[None, int, np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity in infer mode or when keep_prob == 1"""
    if not 0.0 < keep_prob <= 1.0:
        raise ParameterError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    x = _as_tensor(x)
    if mode not in ("train", "infer"):
        raise ParameterError(f"Unknown dropout mode '{mode}'")
    if mode == "infer" or keep_prob == 1.0:
        return x
    generator = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    mask = (generator.random(x.shape) < keep_prob).astype(x.data.dtype) / x.data.dtype.type(keep_prob)
    result = Tensor(x.data * mask, dtype=x.data.dtype)
    return _record("dropout", (x,), result, lambda g: (g * mask,))


def dense(x: ArrayLike, weights: ArrayLike, bias: ArrayLike) -> Tensor:
    """Affine map x·W + b for x of shape M×D and W of shape D×N"""
    x, w, b = _as_tensor(x), _as_tensor(weights), _as_tensor(bias)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"dense bias must have shape ({w.shape[1]},), got {b.shape}")
    result = Tensor(x.data @ w.data + b.data, dtype=x.data.dtype)

    def _backward(grad: np.ndarray):
        gx = grad @ w.data.T if x.requires_grad else None
        gw = x.data.T @ grad if w.requires_grad else None
        gb = grad.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _record("dense", (x, w, b), result, _backward)


def one_hot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ParameterError(f"labels must lie in [0, {num_classes})")
    encoded = np.zeros((labels.size, num_classes), dtype=get_dtype())
    encoded[np.arange(labels.size), labels] = 1
    return encoded


def softmax_cross_entropy(logits: ArrayLike, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -y·log(softmax(logits))"""
    z = _as_tensor(logits)
    y = np.asarray(labels, dtype=z.data.dtype)
    if z.ndim != 2 or y.shape != z.shape:
        raise DimensionError(f"logits {z.shape} and labels {y.shape} must both be M×C")
    if z.shape[1] < 2:
        raise ParameterError("softmax_cross_entropy needs at least 2 classes")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ParameterError("every label row must be one-hot")

    batch = z.shape[0]
    log_p = log_softmax(z.data, axis=1)
    result = Tensor(-(y * log_p).sum() / batch, dtype=z.data.dtype)

    def _backward(grad: np.ndarray):
        return ((softmax(z.data, axis=1) - y) * (grad / batch),)

    return _record("softmax_cross_entropy", (z,), result, _backward)


# ---------------------------------------------------------------------------
# Generic helpers used by the losses
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    result = Tensor(a.data + b.data, dtype=a.data.dtype)
    return _record("add", (a, b), result, lambda g: (g, g))


def scale(x: ArrayLike, factor: float) -> Tensor:
    x = _as_tensor(x)
    result = Tensor(x.data * factor, dtype=x.data.dtype)
    return _record("scale", (x,), result, lambda g: (g * factor,))


def reduce_sum(x: ArrayLike, axis: Union[None, int, Tuple[int, ...]] = None) -> Tensor:
    x = _as_tensor(x)
    result = Tensor(x.data.sum(axis=axis), dtype=x.data.dtype)

    def _backward(grad: np.ndarray):
        expanded = grad if axis is None else np.expand_dims(grad, axis)
        return (np.broadcast_to(expanded, x.shape).copy(),)

    return _record("reduce_sum", (x,), result, _backward)


def square(x: ArrayLike) -> Tensor:
    x = _as_tensor(x)
    result = Tensor(x.data * x.data, dtype=x.data.dtype)
    return _record("square", (x,), result, lambda g: (2.0 * x.data * g,))


def sqrt(x: ArrayLike) -> Tensor:
    """Elementwise square root; the gradient at exactly 0 is taken as 0"""
    x = _as_tensor(x)
    if np.any(x.data < 0):
        raise ParameterError("sqrt of a negative value")
    root = np.sqrt(x.data)

    def _backward(grad: np.ndarray):
        safe = np.where(root > 0, root, 1)
        return (np.where(root > 0, 0.5 * grad / safe, 0),)

    return _record("sqrt", (x,), Tensor(root, dtype=x.data.dtype), _backward)


def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    result = Tensor(x.data.reshape(shape), dtype=x.data.dtype)
    return _record("reshape", (x,), result, lambda g: (g.reshape(x.shape),))


def sum_of_squares(tensors: Sequence[Tensor]) -> Tensor:
    """Σ over all tensors of Σ t²"""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        return Tensor(0.0)
    total = sum(float(np.sum(np.square(t.data, dtype=np.float64))) for t in tensors)
    result = Tensor(total, dtype=tensors[0].data.dtype)
    return _record("sum_of_squares", tensors, result,
                   lambda g: tuple(2.0 * t.data * g for t in tensors))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter Adam moments plus step counter and hyperparameters"""
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Optional[Dict[str, np.ndarray]],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place. Aborts before touching anything on non-finite gradients."""
    resolved: Dict[str, np.ndarray] = {}
    for name, param in params.items():
        grad = grads.get(name) if grads is not None else param.grad
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise DimensionError(f"gradient for {name} has shape {grad.shape}, parameter has {param.shape}")
        if not np.all(np.isfinite(grad)):
            bad = int(np.size(grad) - np.count_nonzero(np.isfinite(grad)))
            raise NumericError(f"non-finite gradient for {name} ({bad} entries); Adam step aborted")
        resolved[name] = grad

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, param in params.items():
        grad = resolved[name].astype(param.data.dtype, copy=False)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data -= update.astype(param.data.dtype, copy=False)
    return state
