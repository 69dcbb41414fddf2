#!/usr/bin/env python3
"""
Checkpoint Format
A versioned text manifest (format version, C, scalar type, flatten order,
one line per array with its shape) terminated by an `end` line, followed by
the little-endian float32 arrays concatenated in manifest order.
"""

import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from lib.errors import CheckpointError
from lib.network import FLATTEN_ORDER, ModelParams, batch_norm_layers, param_shapes
from lib.tensor import AdamState, BatchNormStats, Tensor, get_dtype
from utils_cache import array_digest
from utils_files import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = "SRCKPT"
FORMAT_VERSION = 1
SCALAR_TYPE = "float32-le"
END_MARKER = "end"
_WIRE = np.dtype("<f4")


@dataclass
class Checkpoint:
    params: ModelParams
    adam: Optional[AdamState] = None
    meta: Dict[str, Any] = field(default_factory=dict)


def _shape_text(shape: Tuple[int, ...]) -> str:
    return ",".join(str(d) for d in shape) if shape else "scalar"


def _parse_shape(text: str) -> Tuple[int, ...]:
    return () if text == "scalar" else tuple(int(d) for d in text.split(","))


def _arrays(params: ModelParams, adam: Optional[AdamState]) -> List[Tuple[str, str, np.ndarray]]:
    arrays = [("param", name, t.data) for name, t in params.weights.items()]
    for name, stats in params.bn_stats.items():
        arrays.append(("bn.mean", name, stats.mean))
        arrays.append(("bn.var", name, stats.var))
    if adam is not None:
        for name in params.weights:
            if name in adam.m:
                arrays.append(("adam.m", name, adam.m[name]))
                arrays.append(("adam.v", name, adam.v[name]))
    return arrays


def encode_checkpoint(params: ModelParams, adam: Optional[AdamState] = None,
                      meta: Optional[Dict[str, Any]] = None) -> bytes:
    lines = [
        MAGIC,
        f"format_version {FORMAT_VERSION}",
        f"num_classes {params.num_classes}",
        f"scalar {SCALAR_TYPE}",
        f"flatten_order {FLATTEN_ORDER}",
        f"meta {json.dumps(meta or {}, sort_keys=True)}",
    ]
    if adam is not None:
        lines.append(f"adam {adam.t} {adam.lr!r} {adam.beta1!r} {adam.beta2!r} {adam.eps!r}")
    arrays = _arrays(params, adam)
    lines.extend(f"{kind} {name} {_shape_text(np.shape(data))}" for kind, name, data in arrays)
    lines.append(END_MARKER)
    header = ("\n".join(lines) + "\n").encode("utf-8")
    payload = b"".join(np.ascontiguousarray(data, dtype=_WIRE).tobytes() for _, _, data in arrays)
    return header + payload


def save_checkpoint(params: ModelParams, adam_state: Optional[AdamState], path: str,
                    meta: Optional[Dict[str, Any]] = None) -> None:
    """Atomic write; float32 state round-trips bit-identically"""
    atomic_write_bytes(path, encode_checkpoint(params, adam_state, meta))
    logger.debug(f"Saved checkpoint {path}")


def _split_header(blob: bytes, path: str) -> Tuple[List[str], bytes]:
    marker = f"\n{END_MARKER}\n".encode("utf-8")
    cut = blob.find(marker)
    if not blob.startswith(MAGIC.encode("utf-8")) or cut < 0:
        raise CheckpointError(f"{path}: not a checkpoint or manifest truncated")
    return blob[:cut].decode("utf-8").split("\n"), blob[cut + len(marker):]


def decode_checkpoint(blob: bytes, path: str = "<memory>") -> Checkpoint:
    lines, payload = _split_header(blob, path)
    header: Dict[str, str] = {}
    entries: List[Tuple[str, str, Tuple[int, ...]]] = []
    try:
        for line in lines[1:]:
            key, _, rest = line.partition(" ")
            if key in ("param", "bn.mean", "bn.var", "adam.m", "adam.v"):
                name, shape = rest.split(" ")
                entries.append((key, name, _parse_shape(shape)))
            else:
                header[key] = rest
        version = int(header["format_version"])
        num_classes = int(header["num_classes"])
        meta = json.loads(header.get("meta", "{}"))
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint manifest ({e})") from e

    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    if header.get("scalar") != SCALAR_TYPE:
        raise CheckpointError(f"{path}: unsupported scalar type {header.get('scalar')!r}")
    if header.get("flatten_order") != FLATTEN_ORDER:
        raise CheckpointError(f"{path}: flatten order {header.get('flatten_order')!r} is incompatible")
    if num_classes < 2:
        raise CheckpointError(f"{path}: manifest lists C={num_classes}")

    expected = sum(int(np.prod(shape)) for _, _, shape in entries) * _WIRE.itemsize
    if len(payload) < expected:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(payload)} of {expected} data bytes)")
    if len(payload) > expected:
        raise CheckpointError(f"{path}: {len(payload) - expected} unexpected trailing bytes")

    shapes = param_shapes(num_classes)
    dtype = get_dtype()
    weights: "OrderedDict[str, Tensor]" = OrderedDict()
    bn_means: Dict[str, np.ndarray] = {}
    bn_vars: Dict[str, np.ndarray] = {}
    moments: Dict[str, Dict[str, np.ndarray]] = {"adam.m": {}, "adam.v": {}}
    offset = 0
    for kind, name, shape in entries:
        count = int(np.prod(shape))
        data = np.frombuffer(payload, dtype=_WIRE, count=count, offset=offset).reshape(shape).astype(dtype)
        offset += count * _WIRE.itemsize
        if kind == "param":
            if shapes.get(name) != shape:
                raise CheckpointError(
                    f"{path}: parameter {name} has shape {shape}, C={num_classes} requires {shapes.get(name)}")
            weights[name] = Tensor(data, requires_grad=True, name=name)
        elif kind == "bn.mean":
            bn_means[name] = data
        elif kind == "bn.var":
            bn_vars[name] = data
        else:
            moments[kind][name] = data

    if list(weights) != list(shapes):
        missing = sorted(set(shapes) - set(weights))
        raise CheckpointError(f"{path}: parameter inventory mismatch (missing {missing[:3]})")
    bn_stats: "OrderedDict[str, BatchNormStats]" = OrderedDict()
    for name in batch_norm_layers():
        if name not in bn_means or name not in bn_vars:
            raise CheckpointError(f"{path}: missing running statistics for {name}")
        bn_stats[name] = BatchNormStats(bn_means[name], bn_vars[name])

    adam = None
    if "adam" in header:
        fields = header["adam"].split(" ")
        adam = AdamState(lr=float(fields[1]), beta1=float(fields[2]), beta2=float(fields[3]),
                         eps=float(fields[4]), t=int(fields[0]), m=moments["adam.m"], v=moments["adam.v"])
    return Checkpoint(ModelParams(num_classes, weights, bn_stats), adam, meta)


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.isfile(path):
        raise CheckpointError(f"{path}: checkpoint not found")
    with open(path, "rb") as handle:
        blob = handle.read()
    return decode_checkpoint(blob, path)


def checkpoint_digest(path: str) -> str:
    """Content digest used to key cached features"""
    with open(path, "rb") as handle:
        return array_digest(np.frombuffer(handle.read(), dtype=np.uint8))
