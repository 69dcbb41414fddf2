#!/usr/bin/env python3
"""
Synthetic Camera-Model Corpus
Builds `<root>/<model_id>/<nnnn>.png` plus a `corpus.json` manifest with
train/val/test splits, samples random patches for training, and produces
host/donor splice sets for localization experiments.
"""

import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from lib.camera_sim import (
    CameraModelSpec, fit_to_size, make_clean_image, make_splice, model_zoo,
    random_splice_mask, simulate_camera_model,
)
from lib.errors import CorpusError, ParameterError
from lib.image_io import Image, load_image, save_image
from utils_files import atomic_write_json, is_empty_dir, read_json

logger = logging.getLogger(__name__)

PATCH = 72
MANIFEST_NAME = "corpus.json"
SPLICE_MANIFEST_NAME = "splices.json"
CORPUS_FORMAT = "splice-radar-corpus/1"
DEFAULT_VAL_FRACTION = 0.002
DEFAULT_TEST_FRACTION = 0.001
SPLITS = ("train", "val", "test")


@dataclass
class PatchBatch:
    """M patches (M×72×72×3 in [0,1]) with camera-model labels"""
    patches: np.ndarray
    labels: np.ndarray
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.patches = np.asarray(self.patches)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.patches.ndim != 4 or self.patches.shape[1:] != (PATCH, PATCH, 3):
            raise ParameterError(f"patches must be M×72×72×3, got {self.patches.shape}")
        if len(self.labels) != len(self.patches):
            raise ParameterError(f"{len(self.patches)} patches but {len(self.labels)} labels")
        if self.num_classes is not None and len(self.labels) and (
                self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ParameterError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class CorpusEntry:
    label: int
    path: str  # relative to the corpus root
    seed: int


@dataclass
class CorpusSplit:
    """One split of a corpus; images load lazily and stay cached as uint8"""
    name: str
    root: str
    entries: List[CorpusEntry]
    num_classes: int
    _cache: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def image(self, index: int) -> np.ndarray:
        with self._lock:
            cached = self._cache.get(index)
        if cached is not None:
            return cached
        entry = self.entries[index]
        image = load_image(os.path.join(self.root, entry.path))
        if image.channels != 3:
            raise CorpusError(f"{entry.path}: corpus images must be RGB")
        if image.height < PATCH or image.width < PATCH:
            raise CorpusError(f"{entry.path}: image {image.height}×{image.width} is smaller than {PATCH}×{PATCH}")
        pixels = image.to_uint8()
        with self._lock:
            self._cache[index] = pixels
        return pixels

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)


@dataclass
class Corpus:
    root: str
    models: List[CameraModelSpec]
    seed: int
    size: int
    splits: Dict[str, CorpusSplit]

    @property
    def num_classes(self) -> int:
        return len(self.models)

    def split(self, name: str) -> CorpusSplit:
        if name not in self.splits:
            raise CorpusError(f"corpus has no '{name}' split")
        return self.splits[name]


def split_counts(images: int, val_fraction: float = DEFAULT_VAL_FRACTION,
                 test_fraction: float = DEFAULT_TEST_FRACTION) -> Tuple[int, int, int]:
    """(train, val, test) image counts per model; val and test floor at 1 image"""
    for name, value in (("val_fraction", val_fraction), ("test_fraction", test_fraction)):
        if not 0.0 < value < 1.0:
            raise ParameterError(f"{name} must lie in (0,1), got {value}")
    val = max(1, int(round(images * val_fraction)))
    test = max(1, int(round(images * test_fraction)))
    train = images - val - test
    if train < 1:
        raise CorpusError(f"{images} images per model leave no training images after val/test splits")
    return train, val, test


def load_source_images(directory: str, size: int) -> List[Image]:
    """User-supplied PNG/PPM sources, center-cropped (or upscaled) to size×size"""
    if not os.path.isdir(directory):
        raise CorpusError(f"{directory}: source directory does not exist")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith((".png", ".ppm", ".pnm")))
    if not names:
        raise CorpusError(f"{directory}: no PNG/PPM source images")
    return [fit_to_size(load_image(os.path.join(directory, n)), size) for n in names]


def image_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


class CorpusBuilder:
    """Writes a synthetic camera-model corpus to disk"""

    def __init__(self, out_dir: str, models: int = 4, images_per_model: int = 200, size: int = 256,
                 seed: int = 0, workers: int = 1, sources: Optional[Sequence[Image]] = None,
                 val_fraction: float = DEFAULT_VAL_FRACTION, test_fraction: float = DEFAULT_TEST_FRACTION,
                 force: bool = False, logger: Optional[logging.Logger] = None):
        self.logger = logger or logging.getLogger(__name__)
        if models < 2:
            raise CorpusError(f"need ≥ 2 camera models, got {models}")
        if images_per_model < 3:
            raise CorpusError("need at least 3 images per model (train, val and test)")
        if size < PATCH:
            raise CorpusError(f"image size {size} is smaller than the {PATCH}-pixel patch")
        self.out_dir = out_dir
        self.specs = model_zoo(models, seed)
        self.images_per_model = images_per_model
        self.size = size
        self.seed = seed
        self.workers = max(1, workers)
        self.sources = list(sources) if sources else None
        self.val_fraction = val_fraction
        self.test_fraction = test_fraction
        self.force = force
        self.counts = split_counts(images_per_model, val_fraction, test_fraction)

    def _clean_source(self, model_index: int, image_index: int, rng: np.random.Generator) -> Image:
        if self.sources:
            return self.sources[(model_index * self.images_per_model + image_index) % len(self.sources)]
        return make_clean_image(self.size, rng)

    def _render(self, job: Tuple[int, int]) -> CorpusEntry:
        model_index, image_index = job
        spec = self.specs[model_index]
        rng = image_rng(self.seed, model_index, image_index)
        clean = self._clean_source(model_index, image_index, rng)
        noise_seed = int(rng.integers(0, 2 ** 31 - 1))
        relative = f"{spec.model_id}/{image_index:04d}.png"
        save_image(simulate_camera_model(clean, spec, noise_seed), os.path.join(self.out_dir, relative))
        return CorpusEntry(model_index, relative, noise_seed)

    def _assign_splits(self, entries: List[CorpusEntry]) -> Dict[str, List[CorpusEntry]]:
        _, val, test = self.counts
        splits: Dict[str, List[CorpusEntry]] = {name: [] for name in SPLITS}
        for model_index in range(len(self.specs)):
            own = [e for e in entries if e.label == model_index]
            order = image_rng(self.seed, model_index, 1 << 20).permutation(len(own))
            for rank, position in enumerate(order):
                name = "test" if rank < test else "val" if rank < test + val else "train"
                splits[name].append(own[position])
        for name in SPLITS:
            splits[name].sort(key=lambda e: e.path)
        return splits

    def build(self) -> Corpus:
        if not is_empty_dir(self.out_dir) and not self.force:
            raise CorpusError(f"{self.out_dir} exists and is not empty (use --force to overwrite)")
        os.makedirs(self.out_dir, exist_ok=True)
        jobs = [(m, i) for m in range(len(self.specs)) for i in range(self.images_per_model)]
        self.logger.info(f"🚀 Synthesizing {len(jobs)} images: {len(self.specs)} models × "
                         f"{self.images_per_model} images of {self.size}×{self.size}")
        if self.workers == 1:
            entries = [self._render(job) for job in jobs]
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as executor:
                entries = list(executor.map(self._render, jobs))

        splits = self._assign_splits(entries)
        manifest = {
            "format": CORPUS_FORMAT,
            "seed": self.seed,
            "size": self.size,
            "images_per_model": self.images_per_model,
            "val_fraction": self.val_fraction,
            "test_fraction": self.test_fraction,
            "models": [s.to_dict() for s in self.specs],
            "splits": {name: [e.__dict__ for e in items] for name, items in splits.items()},
        }
        atomic_write_json(os.path.join(self.out_dir, MANIFEST_NAME), manifest)
        train, val, test = self.counts
        self.logger.info(f"✅ Corpus written to {self.out_dir} (per model: {train} train / {val} val / {test} test)")
        return load_corpus(self.out_dir)


def build_corpus(out_dir: str, models: int = 4, images_per_model: int = 200, size: int = 256,
                 seed: int = 0, **kwargs) -> Corpus:
    return CorpusBuilder(out_dir, models, images_per_model, size, seed, **kwargs).build()


def load_corpus(root: str) -> Corpus:
    path = os.path.join(root, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise CorpusError(f"{path}: corpus manifest not found")
    try:
        manifest = read_json(path)
        if manifest.get("format") != CORPUS_FORMAT:
            raise CorpusError(f"{path}: unsupported corpus format {manifest.get('format')!r}")
        models = [CameraModelSpec.from_dict(m) for m in manifest["models"]]
        splits = {
            name: CorpusSplit(name, root, [CorpusEntry(**e) for e in manifest["splits"].get(name, [])], len(models))
            for name in SPLITS
        }
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, CorpusError):
            raise
        raise CorpusError(f"{path}: malformed corpus manifest ({e})") from e
    if len(models) < 2:
        raise CorpusError(f"{path}: need ≥ 2 camera models, manifest lists {len(models)}")
    seen = {m.model_id for m in models}
    if len(seen) != len(models):
        raise CorpusError(f"{path}: camera model ids must be unique")
    return Corpus(root, models, int(manifest["seed"]), int(manifest["size"]), splits)


def sample_patches(split: CorpusSplit, count: int, seed) -> PatchBatch:
    """Uniform random image, then uniform random top-left position; with replacement"""
    if len(split) == 0:
        raise CorpusError(f"split '{split.name}' is empty")
    if count < 1:
        raise ParameterError(f"patch count must be positive, got {count}")
    rng = np.random.default_rng(seed)
    patches = np.empty((count, PATCH, PATCH, 3), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    for k in range(count):
        index = int(rng.integers(len(split)))
        pixels = split.image(index)
        top = int(rng.integers(0, pixels.shape[0] - PATCH + 1))
        left = int(rng.integers(0, pixels.shape[1] - PATCH + 1))
        patches[k] = pixels[top:top + PATCH, left:left + PATCH] / np.float32(255.0)
        labels[k] = split.entries[index].label
    return PatchBatch(patches, labels, split.num_classes)


def grid_positions(height: int, width: int) -> List[Tuple[int, int]]:
    """Center plus the four corners"""
    bottom, right = height - PATCH, width - PATCH
    return [(bottom // 2, right // 2), (0, 0), (0, right), (bottom, 0), (bottom, right)]


def validation_batch(split: CorpusSplit) -> PatchBatch:
    """Deterministic five-patch grid per image of the split"""
    if len(split) == 0:
        raise CorpusError(f"split '{split.name}' is empty")
    patches, labels = [], []
    for index, entry in enumerate(split.entries):
        pixels = split.image(index)
        for top, left in grid_positions(*pixels.shape[:2]):
            patches.append(pixels[top:top + PATCH, left:left + PATCH] / np.float32(255.0))
            labels.append(entry.label)
    return PatchBatch(np.stack(patches).astype(np.float32), np.array(labels), split.num_classes)


def build_splice_set(out_dir: str, models: Sequence[CameraModelSpec], count: int, size: int = 256,
                     seed: int = 0, sources: Optional[Sequence[Image]] = None,
                     area_range: Tuple[float, float] = (0.1, 0.3)) -> List[Dict]:
    """N splices with donor model ≠ host model into images/ and masks/ plus splices.json"""
    if len(models) < 2:
        raise CorpusError(f"need ≥ 2 camera models for splicing, got {len(models)}")
    records = []
    for n in range(count):
        rng = image_rng(seed, 1 << 24, n)
        host_index = int(rng.integers(len(models)))
        donor_index = int((host_index + rng.integers(1, len(models))) % len(models))
        if sources:
            picks = rng.choice(len(sources), size=2, replace=len(sources) < 2)
            host_clean, donor_clean = sources[picks[0]], sources[picks[1]]
        else:
            host_clean, donor_clean = make_clean_image(size, rng), make_clean_image(size, rng)
        host = simulate_camera_model(host_clean, models[host_index], int(rng.integers(0, 2 ** 31 - 1)))
        donor = simulate_camera_model(donor_clean, models[donor_index], int(rng.integers(0, 2 ** 31 - 1)))
        mask = random_splice_mask(host.height, host.width, rng, area_range)
        composite, gt = make_splice(host, donor, mask)
        name = f"splice_{n:04d}.png"
        save_image(composite, os.path.join(out_dir, "images", name))
        save_image(Image(gt.astype(np.float32)), os.path.join(out_dir, "masks", name))
        records.append({"name": name, "host": models[host_index].model_id,
                        "donor": models[donor_index].model_id, "area": round(float(gt.mean()), 6)})
    atomic_write_json(os.path.join(out_dir, SPLICE_MANIFEST_NAME), {"seed": seed, "splices": records})
    logger.info(f"✅ Wrote {count} splices to {out_dir}")
    return records
