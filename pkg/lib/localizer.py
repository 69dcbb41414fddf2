#!/usr/bin/env python3
"""
Blind Splice Localizer
Tiles an image into overlapping 72×72 patches, extracts FC2 features, fits a
two-component Gaussian mixture, and turns the smaller component's
responsibilities into a cleaned, upsampled tamper-probability map.
"""

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage
from skimage.morphology import disk

from lib.errors import DimensionError, ImageIOError, ParameterError
from lib.gmm import GmmModel, gmm_em_fit, tamper_component
from lib.image_io import Image, save_image
from lib.network import PATCH_SIZE, ModelParams, forward
from utils_cache import FeatureCache, array_digest
from utils_files import atomic_write_bytes

logger = logging.getLogger(__name__)

DEFAULT_STEP = 48
DEFAULT_RESTARTS = 100
MORPHOLOGY_MODES = ("opening", "closing")
RAW_MAGIC = b"SRMAP1"
_RAW_HEADER = struct.Struct("<6sII")


@dataclass(frozen=True)
class PatchGrid:
    step: int
    rows: Tuple[int, ...]  # top coordinates
    cols: Tuple[int, ...]  # left coordinates
    height: int
    width: int

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.rows), len(self.cols)

    @property
    def positions(self) -> List[Tuple[int, int]]:
        """Row-major (top, left) pairs"""
        return [(r, c) for r in self.rows for c in self.cols]

    def row_centers(self) -> np.ndarray:
        return np.asarray(self.rows, dtype=np.float64) + (PATCH_SIZE - 1) / 2.0

    def col_centers(self) -> np.ndarray:
        return np.asarray(self.cols, dtype=np.float64) + (PATCH_SIZE - 1) / 2.0


@dataclass
class ProbabilityMap:
    grid_map: np.ndarray
    image_map: Optional[np.ndarray] = None
    grid: Optional[PatchGrid] = None

    def __post_init__(self):
        self.grid_map = np.clip(np.asarray(self.grid_map, dtype=np.float64), 0.0, 1.0)
        if self.image_map is not None:
            self.image_map = np.clip(np.asarray(self.image_map, dtype=np.float64), 0.0, 1.0)

    @property
    def values(self) -> np.ndarray:
        return self.image_map if self.image_map is not None else self.grid_map

    def binary_mask(self, threshold: float = 0.5) -> np.ndarray:
        return self.values >= threshold


def axis_positions(extent: int, step: int) -> Tuple[int, ...]:
    """0, step, 2·step, … plus a final position clamped to extent − 72"""
    last = extent - PATCH_SIZE
    positions = list(range(0, last + 1, step))
    if positions[-1] != last:
        positions.append(last)
    return tuple(positions)


def _pixels(image: Union[Image, np.ndarray]) -> np.ndarray:
    pixels = image.pixels if isinstance(image, Image) else np.asarray(image, dtype=np.float32)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    return pixels


def tile_image(image: Union[Image, np.ndarray], step: int = DEFAULT_STEP) -> Tuple[PatchGrid, np.ndarray]:
    pixels = _pixels(image)
    height, width = pixels.shape[:2]
    if height < PATCH_SIZE or width < PATCH_SIZE:
        raise DimensionError(f"image {height}×{width} is smaller than the {PATCH_SIZE}×{PATCH_SIZE} patch")
    if not 1 <= step <= PATCH_SIZE:
        raise ParameterError(f"step must lie in [1, {PATCH_SIZE}], got {step}")
    grid = PatchGrid(step, axis_positions(height, step), axis_positions(width, step), height, width)
    patches = np.stack([pixels[r:r + PATCH_SIZE, c:c + PATCH_SIZE] for r, c in grid.positions])
    return grid, patches.astype(np.float32)


def extract_features(patches: np.ndarray, params: ModelParams, chunk: int = 25, workers: int = 1) -> np.ndarray:
    """Inference-mode FC2 activations, one 100-dim row per patch"""
    patches = np.asarray(patches)
    starts = list(range(0, len(patches), chunk))

    def _run(start: int) -> np.ndarray:
        return forward(patches[start:start + chunk], params, mode="infer").features.data

    if workers <= 1 or len(starts) <= 1:
        parts = [_run(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(_run, starts))
    return np.concatenate(parts).astype(np.float64)


def standardize_features(features: np.ndarray) -> np.ndarray:
    """Per-dimension z-score over the image's patches; constant dimensions map to 0"""
    std = features.std(axis=0)
    return (features - features.mean(axis=0)) / np.where(std > 1e-12, std, 1.0)


def responsibilities_to_map(gmm: GmmModel, features: np.ndarray, grid: PatchGrid) -> ProbabilityMap:
    resp = gmm.responsibilities(features)
    if resp.shape[0] != len(grid.positions):
        raise DimensionError(f"{resp.shape[0]} feature rows for a {grid.shape[0]}×{grid.shape[1]} grid")
    tampered = tamper_component(gmm, resp)
    return ProbabilityMap(resp[:, tampered].reshape(grid.shape), grid=grid)


def clean_map(prob_map: Union[ProbabilityMap, np.ndarray], radius: int = 2,
              mode: str = "opening") -> Union[ProbabilityMap, np.ndarray]:
    """Grayscale opening (or closing) of the patch-grid map with a disk footprint"""
    if mode not in MORPHOLOGY_MODES:
        raise ParameterError(f"Unknown morphology mode '{mode}'")
    values = prob_map.grid_map if isinstance(prob_map, ProbabilityMap) else np.asarray(prob_map, dtype=np.float64)
    operator = ndimage.grey_opening if mode == "opening" else ndimage.grey_closing
    cleaned = operator(values, footprint=disk(radius).astype(bool))
    if isinstance(prob_map, ProbabilityMap):
        return ProbabilityMap(cleaned, grid=prob_map.grid)
    return cleaned


def _centers(count: int, extent: int) -> np.ndarray:
    return (np.arange(count) + 0.5) * extent / count - 0.5


def upsample_map(prob_map: Union[ProbabilityMap, np.ndarray], height: int, width: int,
                 grid: Optional[PatchGrid] = None) -> ProbabilityMap:
    """Separable linear interpolation between cell centers, constant beyond the outermost centers"""
    if isinstance(prob_map, ProbabilityMap):
        grid = grid or prob_map.grid
        values = prob_map.grid_map
    else:
        values = np.asarray(prob_map, dtype=np.float64)
    rows, cols = values.shape
    if height < rows or width < cols:
        raise DimensionError(f"cannot upsample a {rows}×{cols} map to {height}×{width}")
    if grid is not None:
        row_centers, col_centers = grid.row_centers(), grid.col_centers()
    else:
        row_centers, col_centers = _centers(rows, height), _centers(cols, width)

    ys, xs = np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64)
    by_row = np.stack([np.interp(ys, row_centers, values[:, j]) for j in range(cols)], axis=1)
    full = np.stack([np.interp(xs, col_centers, by_row[i]) for i in range(height)], axis=0)
    return ProbabilityMap(values, full, grid)


class Localizer:
    """tile → extract → fit → responsibilities → clean → upsample"""

    def __init__(self, params: ModelParams, step: int = DEFAULT_STEP, restarts: int = DEFAULT_RESTARTS,
                 seed: int = 0, workers: int = 1, morphology: str = "opening", radius: int = 2,
                 standardize: bool = True, cache: Optional[FeatureCache] = None, model_digest: str = "",
                 logger: Optional[logging.Logger] = None):
        if morphology not in MORPHOLOGY_MODES:
            raise ParameterError(f"Unknown morphology mode '{morphology}'")
        self.params = params
        self.step = step
        self.restarts = restarts
        self.seed = seed
        self.workers = max(1, workers)
        self.morphology = morphology
        self.radius = radius
        self.standardize = standardize
        self.cache = cache
        self.model_digest = model_digest
        self.logger = logger or logging.getLogger(__name__)

    def features(self, image: Union[Image, np.ndarray]) -> Tuple[PatchGrid, np.ndarray]:
        grid, patches = tile_image(image, self.step)
        self.logger.info(f"📐 Patch grid {grid.shape[0]}×{grid.shape[1]} (step {grid.step}; "
                         f"rows {list(grid.rows)}, cols {list(grid.cols)})")
        key = None
        if self.cache is not None:
            key = FeatureCache.make_key(array_digest(_pixels(image)), self.model_digest, grid.step, grid.positions)
            cached = self.cache.get(key)
            if cached is not None:
                return grid, cached
        features = extract_features(patches, self.params, workers=self.workers)
        if key is not None:
            self.cache.put(key, features)
        return grid, features

    def localize(self, image: Union[Image, np.ndarray]) -> ProbabilityMap:
        grid, features = self.features(image)
        if self.standardize:
            features = standardize_features(features)
        gmm = gmm_em_fit(features, restarts=self.restarts, seed=self.seed, workers=self.workers)
        self.logger.debug(f"EM weights {np.round(gmm.weights, 4).tolist()}, ll={gmm.log_likelihood:.3f}")
        coarse = clean_map(responsibilities_to_map(gmm, features, grid), self.radius, self.morphology)
        return upsample_map(coarse, grid.height, grid.width)


def localize(image: Union[Image, np.ndarray], params: ModelParams, step: int = DEFAULT_STEP,
             restarts: int = DEFAULT_RESTARTS, seed: int = 0, **kwargs) -> ProbabilityMap:
    return Localizer(params, step=step, restarts=restarts, seed=seed, **kwargs).localize(image)


# ---------------------------------------------------------------------------
# Map files
# ---------------------------------------------------------------------------

def encode_raw_map(values: np.ndarray) -> bytes:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise DimensionError(f"raw maps are 2-D, got shape {values.shape}")
    height, width = values.shape
    return _RAW_HEADER.pack(RAW_MAGIC, width, height) + np.ascontiguousarray(values, dtype="<f4").tobytes()


def save_raw_map(values: Union[ProbabilityMap, np.ndarray], path: str) -> None:
    """SRMAP1: magic, u32 width, u32 height, then H×W float32, all little-endian"""
    array = values.values if isinstance(values, ProbabilityMap) else values
    atomic_write_bytes(path, encode_raw_map(array))


def load_raw_map(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as e:
        raise ImageIOError(f"{path}: cannot read raw map ({e})") from e
    if len(blob) < _RAW_HEADER.size:
        raise ImageIOError(f"{path}: truncated raw map header")
    magic, width, height = _RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise ImageIOError(f"{path}: not an SRMAP1 file")
    expected = _RAW_HEADER.size + width * height * 4
    if len(blob) != expected:
        raise ImageIOError(f"{path}: raw map is {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=_RAW_HEADER.size)
    return data.reshape(height, width).astype(np.float64)


def save_heat_map(values: Union[ProbabilityMap, np.ndarray], path: str) -> None:
    """8-bit grayscale PNG of probability × 255"""
    array = values.values if isinstance(values, ProbabilityMap) else np.asarray(values)
    save_image(Image(array.astype(np.float32)), path)
