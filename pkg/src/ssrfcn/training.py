"""Stage I (global faces) and Stage II (self-supervised regions) training loops."""

from __future__ import annotations

import contextlib
import json
import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import model as M
from . import regions as R
from . import tensor as T
from .data import ImageSet
from .errors import ConfigurationError, DataInputError, TrainingDivergenceError

log = logging.getLogger(__name__)

# independent PRNG streams per (seed, stage, epoch)
_SHUFFLE, _AUGMENT, _REGIONS = 0, 1, 2


@dataclass
class TrainConfig:
    stage: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 32  # the reference setting is 128
    epochs: int = 20
    seed: int = 0
    region_strategy: str = R.RegionStrategy.SELF_SUPERVISED.value
    min_region: int = R.MIN_REGION
    max_region: int = R.MAX_REGION
    flip_probability: float = 0.5
    regions_per_spoof_image: int = 1
    tau: float = 0.5
    freeze_masks: bool = False
    full_image_mix: float = 0.0
    strict_determinism: bool = True
    log_path: str | None = None

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError(f"stage must be 1 or 2, got {self.stage}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigurationError("flip_probability must lie in [0, 1]")
        if self.regions_per_spoof_image < 1:
            raise ConfigurationError("regions_per_spoof_image must be >= 1")
        if not 0.0 <= self.full_image_mix <= 1.0:
            raise ConfigurationError("full_image_mix must lie in [0, 1]")
        R.RegionStrategy(self.region_strategy)


@dataclass
class EpochReport:
    stage: int
    epoch: int
    loss: float
    accuracy: float
    num_samples: int
    wall_time: float


@contextlib.contextmanager
def determinism_guard(strict: bool):
    """Pin BLAS and friends to one thread when ``strict``."""
    if not strict:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def epoch_rng(seed: int, stage: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, epoch, stream])


def augment(image: np.ndarray, rng: np.random.Generator, p_flip: float = 0.5) -> np.ndarray:
    """Horizontal flip with probability ``p_flip``; always consumes one draw."""
    if rng.random() < p_flip:
        return image[:, ::-1]
    return image


def make_batches(num_samples: int, rng: np.random.Generator, batch_size: int) -> list[np.ndarray]:
    """A seeded permutation of ``range(num_samples)`` cut into mini-batches."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    order = rng.permutation(num_samples)
    return [order[i : i + batch_size] for i in range(0, num_samples, batch_size)]


def train_step(model: M.FcnModel, batch: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """forward(train) -> mean fused BCE -> backward -> Adam.  Returns (loss, logits)."""
    _, logits, cache = M.forward(model, batch, "train", keep_cache=True)
    losses, dlogits = T.sigmoid_bce_loss(logits, labels.astype(np.float32))
    loss = float(np.mean(losses))
    if not np.isfinite(loss):
        raise TrainingDivergenceError("non-finite loss")
    grads = M.backward(model, cache, dlogits / len(labels))
    T.adam_step(model.trainable_parameters(), grads, model.adam)
    return loss, logits


def predict(model: M.FcnModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Infer-mode spoofness for a stack of images."""
    out = [M.spoofness(model, images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def predict_score_maps(model: M.FcnModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    maps = [M.forward(model, images[i : i + batch_size], "infer")[0] for i in range(0, len(images), batch_size)]
    return np.concatenate(maps)


BatchHook = Callable[[int, int, float], None]


class _Runner:
    def __init__(self, model, cfg, on_batch):
        model.adam.lr = cfg.learning_rate
        self.model, self.cfg, self.on_batch = model, cfg, on_batch
        self.reports: list[EpochReport] = []
        self._log = open(cfg.log_path, "a", encoding="utf-8") if cfg.log_path else None

    def run_epoch(self, stage, epoch, batches):
        """``batches`` yields (images, labels) pairs."""
        start = time.perf_counter()
        total_loss, correct, seen = 0.0, 0, 0
        for b, (x, y) in enumerate(batches):
            try:
                loss, logits = train_step(self.model, x, y)
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(f"stage {stage} epoch {epoch} batch {b}: {exc}") from None
            if self.on_batch is not None:
                self.on_batch(epoch, b, loss)
            total_loss += loss * len(y)
            correct += int(np.sum((logits >= 0) == (y == 1)))
            seen += len(y)
        report = EpochReport(stage, epoch, total_loss / seen, correct / seen, seen, time.perf_counter() - start)
        self.reports.append(report)
        log.info("stage %d epoch %d loss %.4f acc %.4f", stage, epoch, report.loss, report.accuracy)
        if self._log is not None:
            self._log.write(json.dumps(asdict(report), sort_keys=True) + "\n")
            self._log.flush()
        return report

    def close(self):
        if self._log is not None:
            self._log.close()


def _full_image_batches(data: ImageSet, cfg: TrainConfig, stage: int, epoch: int, idx=None):
    shuffle = epoch_rng(cfg.seed, stage, epoch, _SHUFFLE)
    aug = epoch_rng(cfg.seed, stage, epoch, _AUGMENT)
    pool = np.arange(len(data)) if idx is None else np.asarray(idx)
    for b in make_batches(len(pool), shuffle, cfg.batch_size):
        sel = pool[b]
        x = np.stack([augment(data.images[i], aug, cfg.flip_probability) for i in sel])
        yield x, data.labels[sel]


def _check_dataset(data: ImageSet):
    if len(data) == 0:
        raise DataInputError("training set is empty")


def stage1_train(model: M.FcnModel, data: ImageSet, cfg: TrainConfig, on_batch: BatchHook | None = None):
    """Train on whole images.  Returns ``(model, reports)``; ``model`` is updated in place."""
    _check_dataset(data)
    runner = _Runner(model, cfg, on_batch)
    try:
        with determinism_guard(cfg.strict_determinism):
            for epoch in range(cfg.epochs):
                runner.run_epoch(1, epoch, _full_image_batches(data, cfg, 1, epoch))
    finally:
        runner.close()
    return model, runner.reports


def mine_spoof_masks(model: M.FcnModel, data: ImageSet, tau: float = 0.5) -> dict[int, np.ndarray]:
    """Hard-gated, min-max normalized score maps of every spoof image (infer mode)."""
    spoof_idx = np.flatnonzero(data.labels == 1)
    if len(spoof_idx) == 0:
        return {}
    maps = predict_score_maps(model, data.images[spoof_idx])
    return {int(i): R.spoof_mask(m, tau) for i, m in zip(spoof_idx, maps)}


def _region_for(strategy, label, mask, dims, rng, cfg, size):
    if strategy in ("fixed_eye", "fixed_nose", "fixed_mouth"):
        return R.fixed_region(strategy.split("_", 1)[1], dims)
    if strategy == "self_supervised" and label == 1:
        return R.sample_spoof_region(mask, dims, rng, cfg.min_region, cfg.max_region, size=size,
                                     downsample=R.DOWNSAMPLE)
    return R.sample_random_region(dims, rng, cfg.min_region, cfg.max_region, size=size)


def region_batches(data: ImageSet, masks: dict[int, np.ndarray], cfg: TrainConfig, epoch: int):
    """Stage II mini-batches of crops; every batch uses one sampled (height, width).

    Each image contributes ``regions_per_spoof_image`` crops (lives included,
    to keep the classes balanced); crops inherit the parent label.
    """
    strategy = cfg.region_strategy
    shuffle = epoch_rng(cfg.seed, 2, epoch, _SHUFFLE)
    aug = epoch_rng(cfg.seed, 2, epoch, _AUGMENT)
    rng = epoch_rng(cfg.seed, 2, epoch, _REGIONS)
    k = cfg.regions_per_spoof_image
    entries = np.repeat(np.arange(len(data)), k)
    dims = data.images.shape[1:3]
    batches = [("region", entries[b]) for b in make_batches(len(entries), shuffle, cfg.batch_size)]
    n_full = int(round(cfg.full_image_mix * len(data)))
    if n_full:
        full_idx = shuffle.permutation(len(data))[:n_full]
        full = [("full", full_idx[i : i + cfg.batch_size]) for i in range(0, n_full, cfg.batch_size)]
        batches += full
        order = shuffle.permutation(len(batches))
        batches = [batches[i] for i in order]
    for kind, sel in batches:
        if kind == "full":
            x = np.stack([augment(data.images[i], aug, cfg.flip_probability) for i in sel])
            yield x, data.labels[sel]
            continue
        size = R.sample_region_size(dims, rng, cfg.min_region, cfg.max_region)
        crops = []
        for i in sel:
            region = _region_for(strategy, data.labels[i], masks.get(int(i)), dims, rng, cfg, size)
            crops.append(augment(R.crop(data.images[i], region), aug, cfg.flip_probability))
        yield np.stack(crops), data.labels[sel]


def stage2_finetune(model: M.FcnModel, data: ImageSet, cfg: TrainConfig, on_batch: BatchHook | None = None):
    """Fine-tune on regions; spoof regions are centred on the model's own detections.

    Masks are re-mined from the current weights at the start of every epoch
    unless ``cfg.freeze_masks``.  The ``global`` strategy trains on whole
    images exactly as Stage I does.
    """
    _check_dataset(data)
    runner = _Runner(model, cfg, on_batch)
    masks = None
    try:
        with determinism_guard(cfg.strict_determinism):
            for epoch in range(cfg.epochs):
                if cfg.region_strategy == "global":
                    runner.run_epoch(2, epoch, _full_image_batches(data, cfg, 1, epoch))
                    continue
                if cfg.region_strategy == "self_supervised" and (masks is None or not cfg.freeze_masks):
                    masks = mine_spoof_masks(model, data, cfg.tau)
                runner.run_epoch(2, epoch, region_batches(data, masks or {}, cfg, epoch))
    finally:
        runner.close()
    return model, runner.reports


def write_reports(reports, path) -> None:
    text = "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in reports)
    M.atomic_write_bytes(path, text.encode())
