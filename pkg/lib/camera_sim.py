#!/usr/bin/env python3
"""
Camera-Model Simulator
Synthesizes camera-model signatures on clean RGB images:
CFA mosaic -> demosaic -> PRNU -> gamma -> read noise -> 8×8 DCT quantization.
Also provides procedural clean sources and splice composition.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn
from skimage.draw import disk, ellipse, rectangle
from skimage.transform import resize
from skimage.util import view_as_blocks

from lib.errors import DimensionError, ParameterError
from lib.image_io import Image

logger = logging.getLogger(__name__)

CFA_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
DEMOSAIC_ALGORITHMS = ("nearest", "bilinear", "edge-weighted")
TABLE_QUALITIES = {0: 95, 1: 90, 2: 80, 3: 70}
BLOCK = 8

# JPEG Annex K luminance table
BASE_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

_CHANNEL_INDEX = {"R": 0, "G": 1, "B": 2}
_BILINEAR_KERNEL = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4.0


@dataclass(frozen=True)
class CameraModelSpec:
    """Imaging-pipeline parameters that make up one synthetic camera model"""
    model_id: str
    cfa_pattern: str = "RGGB"
    demosaic: str = "bilinear"
    prnu_seed: int = 0
    prnu_amplitude: float = 0.005
    gamma: float = 2.2
    quant_table: int = 0
    read_noise: float = 0.002

    def __post_init__(self):
        if self.cfa_pattern not in CFA_PATTERNS:
            raise ParameterError(f"{self.model_id}: unknown CFA pattern '{self.cfa_pattern}'")
        if self.demosaic not in DEMOSAIC_ALGORITHMS:
            raise ParameterError(f"{self.model_id}: unknown demosaic algorithm '{self.demosaic}'")
        if not 0.001 <= self.prnu_amplitude <= 0.02:
            raise ParameterError(f"{self.model_id}: PRNU amplitude {self.prnu_amplitude} outside [0.001, 0.02]")
        if not 1.8 <= self.gamma <= 2.4:
            raise ParameterError(f"{self.model_id}: gamma {self.gamma} outside [1.8, 2.4]")
        if self.quant_table not in TABLE_QUALITIES:
            raise ParameterError(f"{self.model_id}: unknown quantization table {self.quant_table}")
        if self.read_noise < 0:
            raise ParameterError(f"{self.model_id}: read noise must be non-negative")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "CameraModelSpec":
        return cls(**data)


def model_zoo(count: int, seed: int = 0) -> List[CameraModelSpec]:
    """Deterministic specs; consecutive models differ in CFA and demosaic"""
    rng = np.random.default_rng(seed)
    gammas = np.linspace(1.8, 2.4, count) if count > 1 else np.array([2.2])
    specs = []
    for i in range(count):
        specs.append(CameraModelSpec(
            model_id=f"m{i:02d}",
            cfa_pattern=CFA_PATTERNS[i % len(CFA_PATTERNS)],
            demosaic=DEMOSAIC_ALGORITHMS[i % len(DEMOSAIC_ALGORITHMS)],
            prnu_seed=int(rng.integers(0, 2 ** 31 - 1)),
            prnu_amplitude=round(float(rng.uniform(0.002, 0.02)), 6),
            gamma=round(float(gammas[i]), 6),
            quant_table=i % len(TABLE_QUALITIES),
        ))
    return specs


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------

def cfa_masks(height: int, width: int, pattern: str) -> np.ndarray:
    """H×W×3 boolean sampling masks for a 2×2 CFA pattern"""
    masks = np.zeros((height, width, 3), dtype=bool)
    for index, letter in enumerate(pattern):
        dy, dx = divmod(index, 2)
        masks[dy::2, dx::2, _CHANNEL_INDEX[letter]] = True
    return masks


def mosaic(rgb: np.ndarray, pattern: str) -> Tuple[np.ndarray, np.ndarray]:
    masks = cfa_masks(rgb.shape[0], rgb.shape[1], pattern)
    return (rgb * masks).sum(axis=2), masks


def _normalized_interpolation(raw: np.ndarray, mask: np.ndarray) -> np.ndarray:
    weights = mask.astype(np.float64)
    numerator = ndimage.convolve(raw * weights, _BILINEAR_KERNEL, mode="mirror")
    denominator = ndimage.convolve(weights, _BILINEAR_KERNEL, mode="mirror")
    return np.where(mask, raw, numerator / denominator)


def _demosaic_nearest(raw: np.ndarray, masks: np.ndarray, pattern: str) -> np.ndarray:
    height, width = raw.shape
    out = np.empty((height, width, 3))
    for channel in range(3):
        index = next(i for i, letter in enumerate(pattern) if _CHANNEL_INDEX[letter] == channel)
        dy, dx = divmod(index, 2)
        plane = raw[dy::2, dx::2]
        up = np.repeat(np.repeat(plane, 2, axis=0), 2, axis=1)
        up = np.pad(up, ((0, max(0, height - up.shape[0])), (0, max(0, width - up.shape[1]))), mode="edge")
        out[:, :, channel] = np.where(masks[:, :, channel], raw, up[:height, :width])
    return out


def _demosaic_bilinear(raw: np.ndarray, masks: np.ndarray) -> np.ndarray:
    return np.stack([_normalized_interpolation(raw, masks[:, :, c]) for c in range(3)], axis=2)


def _demosaic_edge_weighted(raw: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Gradient-directed green, then color-difference interpolation of red and blue"""
    padded = np.pad(raw, 1, mode="reflect")
    up, down = padded[:-2, 1:-1], padded[2:, 1:-1]
    left, right = padded[1:-1, :-2], padded[1:-1, 2:]
    grad_h, grad_v = np.abs(left - right), np.abs(up - down)
    green_h, green_v = (left + right) / 2.0, (up + down) / 2.0
    directed = np.where(grad_h < grad_v, green_h, np.where(grad_v < grad_h, green_v, (green_h + green_v) / 2.0))
    green = np.where(masks[:, :, 1], raw, directed)

    out = np.empty(raw.shape + (3,))
    out[:, :, 1] = green
    for channel in (0, 2):
        mask = masks[:, :, channel]
        difference = _normalized_interpolation(np.where(mask, raw - green, 0.0), mask)
        out[:, :, channel] = np.where(mask, raw, green + difference)
    return out


def demosaic(raw: np.ndarray, masks: np.ndarray, algorithm: str, pattern: str) -> np.ndarray:
    if algorithm == "nearest":
        return _demosaic_nearest(raw, masks, pattern)
    if algorithm == "bilinear":
        return _demosaic_bilinear(raw, masks)
    if algorithm == "edge-weighted":
        return _demosaic_edge_weighted(raw, masks)
    raise ParameterError(f"Unknown demosaic algorithm '{algorithm}'")


def prnu_field(height: int, width: int, spec: CameraModelSpec) -> np.ndarray:
    """Multiplicative sensor pattern in [-a, a], fixed per camera model"""
    rng = np.random.default_rng(spec.prnu_seed)
    return rng.uniform(-spec.prnu_amplitude, spec.prnu_amplitude, size=(height, width))


def quantization_table(table_id: int) -> np.ndarray:
    """Annex K luminance table scaled to the table's quality (IJG scaling)"""
    if table_id not in TABLE_QUALITIES:
        raise ParameterError(f"Unknown quantization table {table_id}")
    quality = TABLE_QUALITIES[table_id]
    factor = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((BASE_LUMA_TABLE * factor + 50.0) / 100.0), 1, 255)


def quantize_dct(channel: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Blockwise 8×8 DCT quantization of a 0..255 channel; idempotent, no clamping"""
    height, width = channel.shape
    padded = np.pad(channel - 128.0, ((0, -height % BLOCK), (0, -width % BLOCK)), mode="edge")
    blocks = view_as_blocks(padded, (BLOCK, BLOCK))
    coefficients = dctn(blocks, axes=(2, 3), norm="ortho")
    quantized = table * np.round(coefficients / table)
    restored = idctn(quantized, axes=(2, 3), norm="ortho")
    rows, cols = blocks.shape[:2]
    merged = restored.transpose(0, 2, 1, 3).reshape(rows * BLOCK, cols * BLOCK)
    return merged[:height, :width] + 128.0


def simulate_camera_model(clean: Image, spec: CameraModelSpec, seed: int = 0,
                          return_stages: bool = False) -> Union[Image, Tuple[Image, Dict[str, np.ndarray]]]:
    """Apply a camera model's imaging pipeline; deterministic given (spec, seed)"""
    if clean.channels != 3:
        raise ParameterError("simulate_camera_model needs a 3-channel image")
    rgb = clean.pixels.astype(np.float64)
    height, width = rgb.shape[:2]
    stages: Dict[str, np.ndarray] = {}

    raw, masks = mosaic(rgb, spec.cfa_pattern)
    stages["mosaic"] = raw
    full = demosaic(raw, masks, spec.demosaic, spec.cfa_pattern)
    stages["demosaic"] = full
    full = full * (1.0 + prnu_field(height, width, spec))[:, :, None]
    stages["prnu"] = full
    full = np.clip(full, 0.0, 1.0) ** (1.0 / spec.gamma)
    stages["gamma"] = full
    if spec.read_noise > 0:
        full = full + np.random.default_rng(seed).normal(0.0, spec.read_noise, size=full.shape)
    stages["noise"] = full

    table = quantization_table(spec.quant_table)
    compressed = np.stack([quantize_dct(full[:, :, c] * 255.0, table) for c in range(3)], axis=2) / 255.0
    stages["dct"] = compressed
    result = Image(np.clip(compressed, 0.0, 1.0))
    return (result, stages) if return_stages else result


# ---------------------------------------------------------------------------
# Clean sources and splices
# ---------------------------------------------------------------------------

def _value_noise(size: int, channels: int, rng: np.random.Generator, octaves: int = 5) -> np.ndarray:
    total = np.zeros((size, size, channels))
    for octave in range(octaves):
        cells = 2 ** (octave + 1)
        grid = rng.random((cells + 1, cells + 1, channels))
        total += 0.5 ** octave * resize(grid, (size, size, channels), order=3, mode="reflect", anti_aliasing=False)
    low, high = total.min(axis=(0, 1)), total.max(axis=(0, 1))
    return (total - low) / np.where(high > low, high - low, 1.0)


def make_clean_image(size: int, rng: np.random.Generator) -> Image:
    """Multi-octave value noise with random discs and rectangles"""
    luminance = _value_noise(size, 1, rng)
    chroma = _value_noise(size, 3, rng, octaves=3)
    canvas = 0.7 * luminance + 0.3 * chroma
    for _ in range(int(rng.integers(3, 9))):
        color = rng.random(3)
        if rng.random() < 0.5:
            center = rng.integers(0, size, size=2)
            radius = rng.uniform(size * 0.03, size * 0.15)
            rr, cc = disk(tuple(center), radius, shape=(size, size))
        else:
            start = rng.integers(0, size - 2, size=2)
            extent = rng.integers(2, max(3, size // 3), size=2)
            rr, cc = rectangle(tuple(start), extent=tuple(extent), shape=(size, size))
        canvas[rr, cc] = 0.6 * color + 0.4 * canvas[rr, cc]
    return Image(np.clip(canvas, 0.0, 1.0))


def fit_to_size(image: Image, size: int) -> Image:
    """Center crop (upscaling first if needed) to size×size RGB"""
    pixels = image.pixels if image.channels == 3 else np.repeat(image.pixels, 3, axis=2)
    short = min(pixels.shape[:2])
    if short < size:
        factor = size / short
        target = (int(np.ceil(pixels.shape[0] * factor)), int(np.ceil(pixels.shape[1] * factor)), 3)
        pixels = resize(pixels, target, order=1, mode="edge", anti_aliasing=False)
    top = (pixels.shape[0] - size) // 2
    left = (pixels.shape[1] - size) // 2
    return Image(pixels[top:top + size, left:left + size])


def make_splice(host: Image, donor: Image, mask: Union[Image, np.ndarray]) -> Tuple[Image, np.ndarray]:
    """composite = host·(1−mask) + donor·mask; returns the composite and the ground-truth mask"""
    mask_array = mask.pixels[:, :, 0] if isinstance(mask, Image) else np.asarray(mask)
    if mask_array.ndim == 3:
        mask_array = mask_array[:, :, 0]
    if host.pixels.shape != donor.pixels.shape or mask_array.shape != host.pixels.shape[:2]:
        raise DimensionError(
            f"splice needs equal dimensions: host {host.pixels.shape}, donor {donor.pixels.shape}, mask {mask_array.shape}")
    gt = mask_array > 0.5
    weights = gt[:, :, None].astype(np.float32)
    return Image(host.pixels * (1.0 - weights) + donor.pixels * weights), gt


def random_splice_mask(height: int, width: int, rng: np.random.Generator,
                       area_range: Tuple[float, float] = (0.1, 0.3), attempts: int = 20) -> np.ndarray:
    """Elliptical or rectangular region covering a fraction of the image within area_range"""
    low, high = area_range
    if not 0.0 < low <= high < 1.0:
        raise ParameterError(f"invalid splice area range {area_range}")
    best, best_gap = None, np.inf
    for _ in range(attempts):
        target = rng.uniform(low, high) * height * width
        aspect = rng.uniform(0.6, 1.6)
        mask = np.zeros((height, width), dtype=bool)
        if rng.random() < 0.5:
            semi_r = min(np.sqrt(target / (np.pi * aspect)), height / 2 - 1)
            semi_c = min(target / (np.pi * semi_r), width / 2 - 1)
            center = (rng.uniform(semi_r, height - semi_r), rng.uniform(semi_c, width - semi_c))
            rr, cc = ellipse(center[0], center[1], semi_r, semi_c, shape=(height, width))
        else:
            rows = int(min(np.sqrt(target * aspect), height - 1))
            cols = int(min(target / max(rows, 1), width - 1))
            start = (int(rng.integers(0, height - rows + 1)), int(rng.integers(0, width - cols + 1)))
            rr, cc = rectangle(start, extent=(rows, cols), shape=(height, width))
        mask[rr, cc] = True
        fraction = mask.mean()
        if low <= fraction <= high:
            return mask
        gap = min(abs(fraction - low), abs(fraction - high))
        if gap < best_gap:
            best, best_gap = mask, gap
    return best
