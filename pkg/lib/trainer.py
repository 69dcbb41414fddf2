#!/usr/bin/env python3
"""
Surrogate-Task Trainer
Camera-model identification training with the combined loss, a constant
then exponentially decaying learning rate, per-epoch validation and
best/last checkpoints. Patches are sampled by a producer thread feeding a
bounded queue.
"""

import logging
import math
import os
import queue
import threading
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Dict, Iterator, List, Optional

import numpy as np

from lib.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from lib.corpus import Corpus, CorpusSplit, PatchBatch, sample_patches, validation_batch
from lib.errors import CorpusError, NumericError, ParameterError
from lib.mi_reg import HistogramSpec, mi_regularizer
from lib.network import KEEP_PROB, ModelParams, build_model, predict_proba, total_loss
from lib.tensor import AdamState, Tape, backward, adam_step, precision
from utils_files import append_json_line, atomic_write_text
from utils_time import Stopwatch, format_duration

logger = logging.getLogger(__name__)

REPORT_NAME = "report.jsonl"
BEST_NAME = "best.ckpt"
LAST_NAME = "last.ckpt"

PredictFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults are the desk-scale preset"""
    batch_size: int = 50
    patches_per_epoch: int = 10_000
    epochs: int = 20
    lr: float = 1e-4
    lr_decay_factor: float = 0.9
    constant_lr_epochs: int = 12
    rf_weight: float = 1.0
    mi_weight: float = 1.0
    l2_weight: float = 5e-4
    seed: int = 0
    val_fraction: float = 0.002
    test_fraction: float = 0.001
    keep_prob: float = KEEP_PROB
    mi_bins: int = 50
    mi_estimator: str = "soft"
    mi_kernel_width: float = 1.0
    l2_scope: str = "weights"
    rf_channel_mode: str = "summed"
    precision: str = "float32"
    queue_depth: int = 4
    zero_sum_rf_init: bool = False
    resume_from: str = ""

    def __post_init__(self):
        positive = ("batch_size", "patches_per_epoch", "epochs", "lr", "lr_decay_factor", "queue_depth")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be at least 2 for batch normalization")
        if not 0 <= self.constant_lr_epochs <= self.epochs:
            raise ParameterError(f"constant_lr_epochs must lie in [0, epochs], got {self.constant_lr_epochs}")
        for name in ("val_fraction", "test_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ParameterError(f"{name} must lie in (0,1), got {getattr(self, name)}")
        for name in ("rf_weight", "mi_weight", "l2_weight"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ParameterError(f"keep_prob must lie in (0,1], got {self.keep_prob}")
        if self.precision not in ("float32", "float64"):
            raise ParameterError(f"Unknown precision '{self.precision}'")
        HistogramSpec(self.mi_bins, self.mi_estimator, self.mi_kernel_width)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        values = dict(patches_per_epoch=100_000, epochs=130, constant_lr_epochs=80)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def with_overrides(self, **overrides) -> "TrainConfig":
        return replace(self, **overrides)

    def to_dict(self) -> Dict:
        return asdict(self)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.patches_per_epoch / self.batch_size)

    @property
    def histogram_spec(self) -> HistogramSpec:
        return HistogramSpec(self.mi_bins, self.mi_estimator, self.mi_kernel_width)


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Constant for the first constant_lr_epochs (1-based), then × decay per later epoch"""
    if epoch < 1:
        raise ParameterError(f"epochs are 1-based, got {epoch}")
    if epoch <= config.constant_lr_epochs:
        return config.lr
    return config.lr * config.lr_decay_factor ** (epoch - config.constant_lr_epochs)


@dataclass
class LossBreakdown:
    ce: float
    rf: float
    mi: float
    l2: float
    total: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    steps: int
    ce: float
    rf: float
    mi: float
    l2: float
    total: float
    val_accuracy: float
    seconds: float = 0.0

    def to_json(self) -> Dict:
        """Report line; wall-clock stays out so identical runs give identical files"""
        record = asdict(self)
        record.pop("seconds")
        return record


@dataclass
class TrainReport:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_accuracy: float = -1.0

    @property
    def final(self) -> Optional[EpochRecord]:
        return self.records[-1] if self.records else None


def validate(params: ModelParams, split, predict_fn: Optional[PredictFn] = None, chunk: int = 25) -> float:
    """Patch-level top-1 accuracy over the center+corners grid of every image in the split"""
    batch = split if isinstance(split, PatchBatch) else validation_batch(split)
    if len(batch) == 0:
        raise CorpusError("validation split is empty")
    predict = predict_fn or (lambda patches: predict_proba(patches, params))
    correct = 0
    for start in range(0, len(batch), chunk):
        scores = np.asarray(predict(batch.patches[start:start + chunk]))
        correct += int(np.sum(np.argmax(scores, axis=1) == batch.labels[start:start + chunk]))
    return correct / len(batch)


class _BatchProducer:
    """Samples one epoch of batches on a background thread, strictly in order"""

    _DONE = object()

    def __init__(self, split: CorpusSplit, config: TrainConfig, epoch: int):
        self.split = split
        self.config = config
        self.epoch = epoch
        self.queue: "queue.Queue" = queue.Queue(maxsize=config.queue_depth)
        self.stop = threading.Event()
        self.thread = threading.Thread(target=self._run, name=f"patch-sampler-{epoch}", daemon=True)

    def _put(self, item) -> bool:
        while not self.stop.is_set():
            try:
                self.queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self) -> None:
        try:
            for k in range(self.config.steps_per_epoch):
                seed = np.random.SeedSequence([self.config.seed, self.epoch, k])
                if not self._put(sample_patches(self.split, self.config.batch_size, seed)):
                    return
        except BaseException as e:  # surfaced on the consumer side
            self._put(e)
            return
        self._put(self._DONE)

    def __iter__(self) -> Iterator[PatchBatch]:
        self.thread.start()
        try:
            while True:
                item = self.queue.get()
                if item is self._DONE:
                    return
                if isinstance(item, BaseException):
                    raise item
                yield item
        finally:
            self.stop.set()
            self.thread.join()


class Trainer:
    """Owns the model, the optimizer state and the step counter"""

    def __init__(self, config: TrainConfig, corpus: Optional[Corpus] = None, out_dir: Optional[str] = None,
                 params: Optional[ModelParams] = None, num_classes: Optional[int] = None,
                 logger: Optional[logging.Logger] = None):
        self.config = config
        self.corpus = corpus
        self.out_dir = out_dir
        self.logger = logger or logging.getLogger(__name__)

        classes = corpus.num_classes if corpus is not None else num_classes
        if params is None and classes is None:
            raise ParameterError("Trainer needs a corpus, explicit params or num_classes")
        if params is None:
            with precision(config.precision):
                params = build_model(classes, config.seed, zero_sum_rf=config.zero_sum_rf_init)
        self.params = params
        self.adam = AdamState(lr=config.lr)
        self.step_count = 0
        self.epoch = 0
        self.best_accuracy = -1.0
        self.best_epoch = 0
        spec = config.histogram_spec
        self.mi_reg_fn = lambda patches, pre: mi_regularizer(patches, pre, spec)
        if config.resume_from:
            with precision(config.precision):
                self.restore(load_checkpoint(config.resume_from))
            self.logger.info(f"📂 Resumed from {config.resume_from} at epoch {self.epoch}, step {self.step_count}")

    # -- state ---------------------------------------------------------------

    def state_meta(self) -> Dict:
        return {"step": self.step_count, "epoch": self.epoch, "seed": self.config.seed,
                "best_accuracy": self.best_accuracy, "best_epoch": self.best_epoch}

    def save(self, path: str) -> None:
        save_checkpoint(self.params, self.adam, path, self.state_meta())

    def restore(self, checkpoint: Checkpoint) -> None:
        if self.corpus is not None and checkpoint.params.num_classes != self.corpus.num_classes:
            raise ParameterError(
                f"checkpoint has C={checkpoint.params.num_classes}, corpus has {self.corpus.num_classes} models")
        self.params = checkpoint.params
        self.adam = checkpoint.adam or AdamState(lr=self.config.lr)
        meta = checkpoint.meta
        self.step_count = int(meta.get("step", 0))
        self.epoch = int(meta.get("epoch", 0))
        self.best_accuracy = float(meta.get("best_accuracy", -1.0))
        self.best_epoch = int(meta.get("best_epoch", 0))

    # -- optimization --------------------------------------------------------

    def step(self, batch: PatchBatch) -> LossBreakdown:
        """One Adam step on the combined loss; dropout is keyed on the global step"""
        config = self.config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, self.step_count, 0xD0]))
        with precision(config.precision):
            with Tape() as tape:
                terms = total_loss(batch, self.params, config.rf_weight, config.mi_weight, config.l2_weight,
                                   mi_reg_fn=self.mi_reg_fn, mode="train", rng=rng, l2_scope=config.l2_scope,
                                   channel_mode=config.rf_channel_mode, keep_prob=config.keep_prob)
            total = terms.total.item()
            if not np.isfinite(total):
                raise NumericError(f"non-finite loss at step {self.step_count} (ce={terms.ce}, mi={terms.mi})")
            backward(tape, terms.total, leaves=list(self.params.weights.values()))
            adam_step(self.params.weights, None, self.adam)
        self.step_count += 1
        return LossBreakdown(terms.ce, terms.rf, terms.mi, terms.l2, total)

    def validate(self, split: Optional[CorpusSplit] = None) -> float:
        with precision(self.config.precision):
            return validate(self.params, split if split is not None else self.corpus.split("val"))

    def _run_epoch(self, epoch: int) -> EpochRecord:
        self.adam.lr = learning_rate(self.config, epoch)
        watch = Stopwatch()
        sums = np.zeros(5)
        steps = 0
        for batch in _BatchProducer(self.corpus.split("train"), self.config, epoch):
            b = self.step(batch)
            sums += (b.ce, b.rf, b.mi, b.l2, b.total)
            steps += 1
        means = sums / max(steps, 1)
        accuracy = self.validate()
        return EpochRecord(epoch, self.adam.lr, steps, *[float(v) for v in means], accuracy, watch.elapsed())

    def train(self) -> TrainReport:
        if self.corpus is None or self.out_dir is None:
            raise ParameterError("train() needs a corpus and an output directory")
        train_split = self.corpus.split("train")
        if self.corpus.num_classes < 2 or len(train_split) == 0:
            raise CorpusError("training needs ≥ 2 camera models with ≥ 1 train image each")
        missing = set(range(self.corpus.num_classes)) - set(train_split.labels().tolist())
        if missing:
            raise CorpusError(f"camera models {sorted(missing)} have no training images")

        os.makedirs(self.out_dir, exist_ok=True)
        report_path = os.path.join(self.out_dir, REPORT_NAME)
        if self.epoch == 0:
            atomic_write_text(report_path, "")
        report = TrainReport(best_epoch=self.best_epoch, best_accuracy=self.best_accuracy)
        self.logger.info(f"🚀 Training C={self.corpus.num_classes} for epochs {self.epoch + 1}..{self.config.epochs} "
                         f"({self.config.steps_per_epoch} steps of M={self.config.batch_size})")

        for epoch in range(self.epoch + 1, self.config.epochs + 1):
            try:
                record = self._run_epoch(epoch)
            except NumericError as e:
                self.logger.error(f"❌ Epoch {epoch} aborted: {e}; last good checkpoint kept at "
                                  f"{os.path.join(self.out_dir, LAST_NAME)}")
                raise
            self.epoch = epoch
            if record.val_accuracy > self.best_accuracy:
                self.best_accuracy, self.best_epoch = record.val_accuracy, epoch
                self.save(os.path.join(self.out_dir, BEST_NAME))
            self.save(os.path.join(self.out_dir, LAST_NAME))
            append_json_line(report_path, record.to_json())
            report.records.append(record)
            self.logger.info(f"📊 Epoch {epoch}/{self.config.epochs} lr={record.lr:.3g} ce={record.ce:.4f} "
                             f"rf={record.rf:.4f} mi={record.mi:.4f} l2={record.l2:.2f} total={record.total:.4f} "
                             f"val_acc={record.val_accuracy:.3f} ({format_duration(record.seconds)})")

        report.best_epoch, report.best_accuracy = self.best_epoch, self.best_accuracy
        self.logger.info(f"✅ Training finished; best val accuracy {self.best_accuracy:.3f} at epoch {self.best_epoch}")
        return report


def train(config: TrainConfig, corpus: Corpus, out_dir: str, logger: Optional[logging.Logger] = None) -> TrainReport:
    return Trainer(config, corpus, out_dir, logger=logger).train()
