"""Crop-based training against segmentation masks, validation through the
detection pipeline, and the hard-negative mining schedule.
"""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import evaluation, formats, netgraph, postprocess, synthdata
from . import tensor_ops as T

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-6
    weight_decay: float = 1e-2
    decoupled_weight_decay: bool = True
    batch_size: int = 8
    epochs: int = 20
    reduction: str = "sum"
    target_coverage: float = 0.5
    crops_per_scene: int = 1000
    crop_size: int = 256
    mining_mode: str = "per-type"  # "per-type": FP > 1 or FN > 1; "sum": FP + FN > 1
    hard_epochs: int = 2
    full_epochs: int = 2
    mining_cycles: int = 3
    theta: float = 0.5
    seed: int = 0

    def validate(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if min(self.hard_epochs, self.full_epochs, self.mining_cycles) < 0:
            raise ValueError("mining counts must be non-negative")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.mining_mode not in ("per-type", "sum"):
            raise ValueError(f"unknown mining mode {self.mining_mode!r}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        return self


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    n_crops: int
    loss: float
    precision: float
    recall: float
    wall_time: float = 0.0

    def key(self):
        """Everything except wall time: the part that must reproduce exactly."""
        d = asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)

    @property
    def loss(self):
        return [r.loss for r in self.records]

    @property
    def precision(self):
        return [r.precision for r in self.records]

    @property
    def recall(self):
        return [r.recall for r in self.records]

    def key(self):
        return [r.key() for r in self.records], list(self.events)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""


# ---------------------------------------------------------------------------
# Targets and batches
# ---------------------------------------------------------------------------


def make_target(mask, stride=8, coverage=0.5):
    """Downsample a binary mask by ``stride``: a cell is 1 iff at least
    ``coverage`` of its block is foreground."""
    mask = np.asarray(mask)
    h, w = mask.shape[-2:]
    if h % stride or w % stride:
        raise ValueError(f"mask {h}x{w} not divisible by {stride}")
    blocks = (mask != 0).reshape(*mask.shape[:-2], h // stride, stride, w // stride, stride)
    counts = blocks.sum(axis=(-3, -1))
    return (counts >= coverage * stride * stride).astype(np.float32)


def image_to_input(image):
    """uint8 image(s) -> float32 network input in [0, 1], shape (N, 1, H, W)."""
    x = np.asarray(image, dtype=np.float32) / np.float32(255.0)
    if x.ndim == 2:
        x = x[None]
    return x[:, None]


@dataclass
class CropSet:
    """Crop origins over a list of scenes; pixels are sliced on demand."""

    scenes: list
    index: np.ndarray  # (n, 3): scene, y, x
    size: int
    coverage: float = 0.5

    def __len__(self):
        return len(self.index)

    def batch(self, rows):
        s = self.size
        imgs = np.empty((len(rows), s, s), dtype=np.uint8)
        masks = np.empty((len(rows), s, s), dtype=np.uint8)
        for k, (si, y, x) in enumerate(self.index[rows]):
            sc = self.scenes[si]
            imgs[k] = sc.image[y:y + s, x:x + s]
            masks[k] = sc.mask[y:y + s, x:x + s]
        return image_to_input(imgs), make_target(masks, coverage=self.coverage)[:, None]

    def subset(self, scene_ids):
        keep = np.isin(self.index[:, 0], np.asarray(sorted(scene_ids)))
        return CropSet(self.scenes, self.index[keep], self.size, self.coverage)


def build_crops(scenes, n_per_scene, size, seed, coverage=0.5):
    rows = []
    seeds = synthdata.scene_seeds(seed, len(scenes))
    for i, (sc, s) in enumerate(zip(scenes, seeds)):
        ys, xs = synthdata.crop_origins(sc.image.shape, n_per_scene, size, s)
        rows.append(np.stack([np.full(n_per_scene, i), ys, xs], axis=1))
    index = np.concatenate(rows).astype(np.int64) if rows else np.zeros((0, 3), np.int64)
    return CropSet(list(scenes), index, size, coverage)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class Trainer:
    """Owns the weights and optimizer state for one training run."""

    def __init__(self, spec, weights, config):
        self.spec = spec
        self.weights = weights
        self.config = config.validate()
        self.keys = weights.trainable_keys()
        self.adam = T.AdamState.for_params(weights.params())
        self.rng = np.random.default_rng(config.seed)

    def step(self, x, target):
        cfg = self.config
        y, tape = netgraph.forward(self.spec, self.weights, x, mode="train")
        loss, grad = T.mse_loss(y, target, cfg.reduction)
        if not np.isfinite(loss):
            return loss
        grads = netgraph.backward(self.spec, self.weights, tape, grad)
        T.adam_step(
            [self.weights[k] for k in self.keys], [grads[k] for k in self.keys], self.adam,
            lr=cfg.lr, weight_decay=cfg.weight_decay, decoupled=cfg.decoupled_weight_decay,
        )
        return loss

    def train_epoch(self, crops):
        """One shuffled pass over ``crops``; returns the mean per-batch loss."""
        order = self.rng.permutation(len(crops))
        bs = self.config.batch_size
        total, nb = 0.0, 0
        for b, start in enumerate(range(0, len(order), bs)):
            x, target = crops.batch(order[start:start + bs])
            loss = self.step(x, target)
            if not np.isfinite(loss):
                norms = {f"{k[0]}:{k[1]}": float(np.linalg.norm(self.weights[k])) for k in self.keys}
                raise TrainingDiverged(f"non-finite loss {loss} at batch {b}; parameter norms {norms}")
            total += loss
            nb += 1
        return total / max(nb, 1)


def train_epoch(spec, weights, crops, config, adam=None, rng=None):
    """Functional form: one epoch, returns ``(weights, mean loss)``.

    Weights are updated in place; pass ``adam`` / ``rng`` to continue a run.
    """
    tr = Trainer(spec, weights, config)
    if adam is not None:
        tr.adam = adam
    if rng is not None:
        tr.rng = rng
    loss = tr.train_epoch(crops)
    return tr.weights, loss


# ---------------------------------------------------------------------------
# Validation and mining
# ---------------------------------------------------------------------------


def predict(spec, weights, scenes):
    """Saliency maps (2-d float arrays) for full-resolution scenes."""
    return [netgraph.forward(spec, weights, image_to_input(sc.image), mode="infer")[0, 0]
            for sc in scenes]


def per_image_matches(maps, scenes, theta, stride=8, min_area=1):
    return [evaluation.match(postprocess.detect(m, theta, stride, min_area), sc.boxes)
            for m, sc in zip(maps, scenes)]


def validate(spec, weights, scenes, theta=0.5, maps=None):
    """Micro-averaged ``(precision, recall)`` over ``scenes`` at ``theta``."""
    if maps is None:
        maps = predict(spec, weights, scenes)
    total = evaluation.aggregate(per_image_matches(maps, scenes, theta, spec.output_stride))
    return evaluation.precision_recall(total)


def is_hard(result, mode="per-type"):
    if mode == "per-type":
        return result.fp > 1 or result.fn > 1
    if mode == "sum":
        return result.fp + result.fn > 1
    raise ValueError(f"unknown mining mode {mode!r}")


def mine_hard(spec, weights, scenes, theta=0.5, mode="per-type", maps=None):
    """Indices of scenes with more than one FP or FN under ``mode``."""
    if maps is None:
        maps = predict(spec, weights, scenes)
    results = per_image_matches(maps, scenes, theta, spec.output_stride)
    return [i for i, r in enumerate(results) if is_hard(r, mode)]


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------


class RunLog:
    """Epoch records and events, optionally mirrored to files and checkpoints."""

    def __init__(self, spec, out_dir=None):
        self.spec = spec
        self.out_dir = out_dir
        self.history = TrainHistory()
        self.best_precision = -1.0
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            self._hist_path = os.path.join(out_dir, "history.jsonl")
            formats.write_text_atomic(self._hist_path, "")

    def event(self, **kw):
        self.history.events.append(kw)
        log.info("event %s", kw)

    def epoch(self, record, weights):
        self.history.records.append(record)
        log.info("epoch %d [%s] loss=%.6g P=%.4f R=%.4f (%.1fs)", record.epoch, record.phase,
                 record.loss, record.precision, record.recall, record.wall_time)
        if not self.out_dir:
            return
        with open(self._hist_path, "a") as fh:
            fh.write(json.dumps(record.key(), sort_keys=True) + "\n")
        formats.save_model(os.path.join(self.out_dir, f"epoch_{record.epoch:03d}.fnm"), self.spec, weights)
        formats.save_model(os.path.join(self.out_dir, "last.fnm"), self.spec, weights)
        if record.precision > self.best_precision:
            self.best_precision = record.precision
            formats.save_model(os.path.join(self.out_dir, "best.fnm"), self.spec, weights)


def _run_epoch(trainer, crops, phase, val_scenes, runlog):
    t0 = time.perf_counter()
    loss = trainer.train_epoch(crops)
    cfg = trainer.config
    p, r = validate(trainer.spec, trainer.weights, val_scenes, cfg.theta) if val_scenes else (float("nan"),) * 2
    runlog.epoch(EpochRecord(len(runlog.history.records) + 1, phase, len(crops), loss, p, r,
                             time.perf_counter() - t0), trainer.weights)
    return loss


def mining_schedule(trainer, train_scenes, crops, val_scenes=(), runlog=None):
    """Cycles of (hard-example epochs on re-mined scenes, then full-set epochs)."""
    cfg = trainer.config
    runlog = runlog or RunLog(trainer.spec)
    for cycle in range(cfg.mining_cycles):
        hard = mine_hard(trainer.spec, trainer.weights, train_scenes, cfg.theta, cfg.mining_mode)
        runlog.event(kind="mining", cycle=cycle + 1, hard_scenes=len(hard))
        if hard:
            sub = crops.subset(hard)
            for _ in range(cfg.hard_epochs):
                _run_epoch(trainer, sub, f"hard-{cycle + 1}", val_scenes, runlog)
        else:
            runlog.event(kind="skip-hard-phase", cycle=cycle + 1)
        for _ in range(cfg.full_epochs):
            _run_epoch(trainer, crops, f"full-{cycle + 1}", val_scenes, runlog)
    return trainer.weights


def train(spec, train_scenes, val_scenes, config, weights=None, out_dir=None, mining=True):
    """Initial epochs then (optionally) the mining schedule.

    Returns ``(weights, TrainHistory)``.
    """
    config.validate()
    if weights is None:
        weights = netgraph.init_weights(spec, seed=config.seed)
    crops = build_crops(train_scenes, config.crops_per_scene, config.crop_size, config.seed,
                        config.target_coverage)
    trainer = Trainer(spec, weights, config)
    runlog = RunLog(spec, out_dir)
    for _ in range(config.epochs):
        _run_epoch(trainer, crops, "initial", val_scenes, runlog)
    if mining:
        mining_schedule(trainer, train_scenes, crops, val_scenes, runlog)
    return trainer.weights, runlog.history
