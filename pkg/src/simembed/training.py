"""Optimization loop, data augmentation, and evaluation metrics.

Training is siamese: every batch's query and candidate images are embedded
by the same parameter set, the pair (or triplet) loss produces per-row
embedding gradients, and both arms' parameter gradients are summed before
one RMSProp step.  Runs are bit-reproducible for a fixed seed on one
thread.  A NaN/Inf loss aborts the run and returns the last good
checkpoint.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import net, sampling
from .dataset import Dataset
from .distance import EUCLIDEAN, DistanceMetric, distances_to
from .errors import ConfigError, DataError, NumericError
from .losses import (AngularConfig, ContrastiveConfig, PairSample,
                     TripletSample, batch_loss)
from .retrieval import EmbeddingIndex

Array = np.ndarray

AUG_HFLIP = "hflip"
AUG_SHIFT = "shift"
AUG_ROTATE = "rotate"
SUPPORTED_AUGMENTATIONS = frozenset({AUG_HFLIP, AUG_SHIFT, AUG_ROTATE})

SHIFT_MAX_PX = 2
ROTATE_MAX_DEG = 10.0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    rms_decay: float = 0.9
    epsilon: float = 1e-8
    epochs: int = 1
    batch_size: int = 32
    loss: ContrastiveConfig | AngularConfig = field(
        default_factory=ContrastiveConfig)
    loss_metric_exponent: float = 2.0  # metric used inside the loss
    augmentation: frozenset[str] = frozenset()
    weight_decay: float = 0.0
    seed: int = 0
    lr_decay: float = 1.0  # per-epoch multiplier on the learning rate
    pos_fraction: float = 0.5
    batches_per_epoch: int | None = None
    val_pairs: int = 128
    val_triplets: int = 256

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError(
                f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 < self.rms_decay < 1:
            raise ConfigError(
                f"rms_decay must be in (0, 1), got {self.rms_decay}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(
                f"batch_size must be >= 2, got {self.batch_size}")
        unknown = set(self.augmentation) - SUPPORTED_AUGMENTATIONS
        if unknown:
            raise ConfigError(
                f"unsupported augmentations: {sorted(unknown)}")
        if self.weight_decay < 0:
            raise ConfigError(
                f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(
                f"lr_decay must be in (0, 1], got {self.lr_decay}")

    @property
    def loss_metric(self) -> DistanceMetric:
        return DistanceMetric(self.loss_metric_exponent)


@dataclass(frozen=True)
class TrainLogRow:
    epoch: int
    mean_train_loss: float
    validation_loss: float
    triplet_accuracy: float
    elapsed_seconds: float


LOG_HEADER = "epoch,train_loss,val_loss,triplet_acc,seconds"


def write_log(path: str, rows: Sequence[TrainLogRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LOG_HEADER + "\n")
        for r in rows:
            fh.write(f"{r.epoch},{r.mean_train_loss:.6f},"
                     f"{r.validation_loss:.6f},{r.triplet_accuracy:.4f},"
                     f"{r.elapsed_seconds:.3f}\n")


def rmsprop_step(params: Mapping[str, Array], grads: Mapping[str, Array],
                 state: Mapping[str, Array], cfg: TrainConfig,
                 learning_rate: float | None = None,
                 ) -> tuple[dict[str, Array], dict[str, Array]]:
    """One RMSProp update over named parameters.

    Per element: ``s <- rho*s + (1-rho)*g^2`` then
    ``p <- p - lr * g / sqrt(s + eps)``.  Weight decay (if any) adds
    ``wd * p`` to the gradient first.  Non-finite gradients abort the step.
    """
    if set(params) != set(grads) or set(params) != set(state):
        raise ConfigError("params, grads, and state must share keys")
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    new_params: dict[str, Array] = {}
    new_state: dict[str, Array] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state[name].shape != p.shape:
            raise ConfigError(
                f"shape mismatch for {name!r}: param {p.shape}, "
                f"grad {g.shape}, state {state[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(
                f"non-finite gradient for {name!r}; step aborted")
        if cfg.weight_decay:
            g = g + np.asarray(cfg.weight_decay, dtype=p.dtype) * p
        s = (cfg.rms_decay * state[name]
             + (1.0 - cfg.rms_decay) * (g * g)).astype(p.dtype)
        new_state[name] = s
        new_params[name] = (p - lr * g / np.sqrt(s + cfg.epsilon)).astype(
            p.dtype)
    return new_params, new_state


def _rotate_nearest(image: Array, degrees: float) -> Array:
    """Rotate (C, H, W) about the center with nearest-neighbor sampling and
    zero fill outside the frame."""
    c, h, w = image.shape
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx,
                         indexing="ij")
    src_y = np.rint(cos_t * yy + sin_t * xx + cy).astype(np.int64)
    src_x = np.rint(-sin_t * yy + cos_t * xx + cx).astype(np.int64)
    valid = (src_y >= 0) & (src_y < h) & (src_x >= 0) & (src_x < w)
    out = np.zeros_like(image)
    sy = np.clip(src_y, 0, h - 1)
    sx = np.clip(src_x, 0, w - 1)
    for ch in range(c):
        out[ch] = np.where(valid, image[ch][sy, sx], 0.0)
    return out


def _shift(image: Array, dy: int, dx: int) -> Array:
    out = np.zeros_like(image)
    h, w = image.shape[1:]
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[:, ys, xs] = image[:, ys_src, xs_src]
    return out


def augment(image: Array, cfg: TrainConfig,
            rng: np.random.Generator) -> Array:
    """Apply each enabled transform with probability 1/2, in the fixed
    order flip, shift, rotate.  Pixels stay in their original range; shifts
    and rotations zero-fill."""
    out = image
    if AUG_HFLIP in cfg.augmentation and rng.random() < 0.5:
        out = out[:, :, ::-1]
    if AUG_SHIFT in cfg.augmentation and rng.random() < 0.5:
        dy = int(rng.integers(-SHIFT_MAX_PX, SHIFT_MAX_PX + 1))
        dx = int(rng.integers(-SHIFT_MAX_PX, SHIFT_MAX_PX + 1))
        out = _shift(out, dy, dx)
    if AUG_ROTATE in cfg.augmentation and rng.random() < 0.5:
        degrees = float(rng.uniform(-ROTATE_MAX_DEG, ROTATE_MAX_DEG))
        out = _rotate_nearest(np.ascontiguousarray(out), degrees)
    return np.ascontiguousarray(out)


def _batch_arrays(dataset: Dataset, ids: Sequence[str], cfg: TrainConfig,
                  rng: np.random.Generator, augmented: bool) -> Array:
    """Stack images for ``ids``, augmenting each occurrence independently
    so self-pairs see two different views."""
    images = []
    for item_id in ids:
        img = dataset.get(item_id).image
        if augmented and cfg.augmentation:
            img = augment(img, cfg, rng)
        images.append(img)
    return np.stack(images)


def _pair_step_samples(pairs: Sequence[PairSample]
                       ) -> tuple[list[str], list[str], list[PairSample]]:
    """Row keys for the two siamese stacks plus re-keyed samples."""
    q_ids = [p.query_id for p in pairs]
    c_ids = [p.candidate_id for p in pairs]
    keyed = [PairSample(f"q{i}", f"c{i}", p.label, p.augmented)
             for i, p in enumerate(pairs)]
    return q_ids, c_ids, keyed


def _validation_loss(checkpoint: net.Checkpoint, dataset: Dataset,
                     pairs_or_triplets, cfg: TrainConfig) -> float:
    if isinstance(cfg.loss, ContrastiveConfig):
        pairs = pairs_or_triplets
        q_ids, c_ids, keyed = _pair_step_samples(pairs)
        q = net.embed(checkpoint, dataset.images(q_ids))
        c = net.embed(checkpoint, dataset.images(c_ids))
        rows = np.concatenate([q, c])
        keys = [f"q{i}" for i in range(len(pairs))] + \
               [f"c{i}" for i in range(len(pairs))]
        loss, _ = batch_loss(rows, keys, keyed, cfg.loss, cfg.loss_metric)
        return loss
    triplets = pairs_or_triplets
    a = net.embed(checkpoint, dataset.images([t.anchor_id
                                              for t in triplets]))
    p = net.embed(checkpoint, dataset.images([t.positive_id
                                              for t in triplets]))
    n = net.embed(checkpoint, dataset.images([t.negative_id
                                              for t in triplets]))
    rows = np.concatenate([a, p, n])
    m = len(triplets)
    keys = ([f"a{i}" for i in range(m)] + [f"p{i}" for i in range(m)]
            + [f"n{i}" for i in range(m)])
    keyed = [TripletSample(f"a{i}", f"p{i}", f"n{i}") for i in range(m)]
    loss, _ = batch_loss(rows, keys, keyed, cfg.loss, cfg.loss_metric)
    return loss


def train(dataset_train: Dataset, dataset_val: Dataset,
          net_cfg: net.MultiScaleNetConfig,
          sampler_cfg: sampling.SamplerConfig, train_cfg: TrainConfig,
          scorer: sampling.BissScorer | None = None,
          ) -> tuple[net.Checkpoint, list[TrainLogRow]]:
    """Run the full optimization loop and keep the best-validation model.

    Returns the retained checkpoint (epoch set to the best epoch) and one
    log row per completed epoch.  Requires at least two classes in the
    training data.
    """
    if len(dataset_train.class_index) < 2:
        raise DataError("training data needs at least two classes")
    if scorer is None:
        scorer = sampling.BissScorer()
    contrastive = isinstance(train_cfg.loss, ContrastiveConfig)

    checkpoint = net.build_network(net_cfg, seed=train_cfg.seed)
    params = checkpoint.parameters
    state = {name: np.zeros_like(value) for name, value in params.items()}
    candidate_cache: dict[str, list[str]] = {}
    feature_cache: dict[str, Array] = {}
    val_cache: dict[str, list[str]] = {}
    val_features: dict[str, Array] = {}

    # fixed validation batches, sampled once, never augmented
    val_rng = np.random.default_rng([train_cfg.seed, sampler_cfg.rng_seed,
                                     0x5EED])
    if contrastive:
        val_samples = sampling.make_pair_batch(
            dataset_val, scorer, sampler_cfg, train_cfg.val_pairs,
            train_cfg.pos_fraction, val_rng, candidate_cache=val_cache,
            feature_cache=val_features)
    else:
        val_samples = sampling.make_triplet_batch(
            dataset_val, scorer, sampler_cfg, train_cfg.val_pairs, val_rng,
            candidate_cache=val_cache, feature_cache=val_features)
    val_triplets = sampling.make_triplet_batch(
        dataset_val, scorer, sampler_cfg, train_cfg.val_triplets, val_rng,
        candidate_cache=val_cache, feature_cache=val_features)

    n_batches = train_cfg.batches_per_epoch
    if n_batches is None:
        n_batches = max(1, len(dataset_train) // train_cfg.batch_size)

    logs: list[TrainLogRow] = []
    best_params = copy.deepcopy(params)
    best_val = math.inf
    best_epoch = 0
    lr = train_cfg.learning_rate
    aborted = False

    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        epoch_rng = np.random.default_rng(
            [train_cfg.seed, sampler_cfg.rng_seed, epoch])
        losses_seen = []
        for _ in range(n_batches):
            try:
                step_loss = _train_step(
                    checkpoint, params, state, dataset_train, scorer,
                    sampler_cfg, train_cfg, epoch_rng, candidate_cache,
                    feature_cache, contrastive, lr)
            except NumericError:
                aborted = True
                break
            if not math.isfinite(step_loss):
                aborted = True
                break
            losses_seen.append(step_loss)
        if aborted and not losses_seen:
            break
        checkpoint.parameters = params = dict(params)
        val_loss = _validation_loss(checkpoint, dataset_val, val_samples,
                                    train_cfg)
        acc = triplet_accuracy(checkpoint, val_triplets, dataset_val,
                               train_cfg.loss_metric)
        elapsed = time.perf_counter() - t0
        logs.append(TrainLogRow(epoch, float(np.mean(losses_seen)),
                                val_loss, acc, elapsed))
        if val_loss < best_val:
            best_val = val_loss
            best_params = copy.deepcopy(params)
            best_epoch = epoch
        lr *= train_cfg.lr_decay
        if aborted:
            break

    final = net.Checkpoint(net_cfg, best_params, rng_seed=train_cfg.seed,
                           epoch=best_epoch)
    return final, logs


def _train_step(checkpoint: net.Checkpoint, params: dict, state: dict,
                dataset: Dataset, scorer, sampler_cfg, train_cfg,
                rng: np.random.Generator, candidate_cache: dict,
                feature_cache: dict, contrastive: bool,
                lr: float) -> float:
    """Sample one batch, run both siamese arms, apply one RMSProp step.
    Mutates ``params`` and ``state`` in place (same dict objects)."""
    if contrastive:
        pairs = sampling.make_pair_batch(
            dataset, scorer, sampler_cfg, train_cfg.batch_size,
            train_cfg.pos_fraction, rng, candidate_cache=candidate_cache,
            feature_cache=feature_cache)
        q_ids, c_ids, keyed = _pair_step_samples(pairs)
        stacks = [_batch_arrays(dataset, q_ids, train_cfg, rng, True),
                  _batch_arrays(dataset, c_ids, train_cfg, rng, True)]
        keys = [f"q{i}" for i in range(len(pairs))] + \
               [f"c{i}" for i in range(len(pairs))]
    else:
        triplets = sampling.make_triplet_batch(
            dataset, scorer, sampler_cfg, train_cfg.batch_size, rng,
            candidate_cache=candidate_cache, feature_cache=feature_cache)
        m = len(triplets)
        stacks = [
            _batch_arrays(dataset, [t.anchor_id for t in triplets],
                          train_cfg, rng, True),
            _batch_arrays(dataset, [t.positive_id for t in triplets],
                          train_cfg, rng, True),
            _batch_arrays(dataset, [t.negative_id for t in triplets],
                          train_cfg, rng, True),
        ]
        keys = ([f"a{i}" for i in range(m)] + [f"p{i}" for i in range(m)]
                + [f"n{i}" for i in range(m)])
        keyed = [TripletSample(f"a{i}", f"p{i}", f"n{i}") for i in range(m)]

    outputs = []
    backwards = []
    for stack in stacks:
        out, back = net.embed_with_grad(checkpoint, stack, training=True,
                                        rng=rng)
        outputs.append(out)
        backwards.append(back)
    rows = np.concatenate(outputs)
    loss, row_grads = batch_loss(rows, keys, keyed, train_cfg.loss,
                                 train_cfg.loss_metric)

    grads: dict[str, Array] = {name: np.zeros_like(p)
                               for name, p in params.items()}
    offset = 0
    for out, back in zip(outputs, backwards):
        part = back(row_grads[offset:offset + out.shape[0]])
        for name, g in part.items():
            grads[name] += g.astype(grads[name].dtype, copy=False)
        offset += out.shape[0]

    new_params, new_state = rmsprop_step(params, grads, state, train_cfg,
                                         learning_rate=lr)
    params.update(new_params)
    state.update(new_state)
    return loss


def triplet_accuracy(checkpoint: net.Checkpoint,
                     triplets: Sequence[TripletSample], images,
                     metric: DistanceMetric = EUCLIDEAN) -> float:
    """Fraction of triplets whose positive embeds strictly closer to the
    anchor than the negative; ties count as incorrect.

    ``images`` is a ``Dataset`` or a mapping from id to (C, H, W) image.
    """
    if not triplets:
        raise DataError("triplet_accuracy needs at least one triplet")
    get = images.get if isinstance(images, Dataset) else \
        lambda item_id: _MapItem(images[item_id])
    unique_ids: list[str] = []
    seen = set()
    for t in triplets:
        for item_id in (t.anchor_id, t.positive_id, t.negative_id):
            if item_id not in seen:
                seen.add(item_id)
                unique_ids.append(item_id)
    stack = np.stack([np.asarray(get(i).image, dtype=np.float32)
                      for i in unique_ids])
    vectors = net.embed(checkpoint, stack).astype(np.float64)
    row = {item_id: i for i, item_id in enumerate(unique_ids)}
    k = metric.exponent
    correct = 0
    for t in triplets:
        a = vectors[row[t.anchor_id]]
        d_pos = (np.abs(a - vectors[row[t.positive_id]]) ** k).sum()
        d_neg = (np.abs(a - vectors[row[t.negative_id]]) ** k).sum()
        # comparing the k-th powers preserves the distance ordering
        if d_pos < d_neg:
            correct += 1
    return correct / len(triplets)


class _MapItem:
    __slots__ = ("image",)

    def __init__(self, image):
        self.image = image


def topk_recall(checkpoint: net.Checkpoint,
                queries: Sequence[tuple[Array, Sequence[str]]],
                catalog: EmbeddingIndex, k: int = 20,
                metric: DistanceMetric | None = None) -> float:
    """Fraction of queries whose any ground-truth id appears in the top-k.

    Each query is an ``(image, ground_truth_ids)`` pair; every ground-truth
    id must exist in the catalog.  ``metric`` defaults to the catalog's.
    """
    if not queries:
        raise DataError("topk_recall needs at least one query")
    catalog_ids = set(catalog.ids)
    for _, truth in queries:
        if not truth:
            raise DataError("every query needs at least one ground truth id")
        for item_id in truth:
            if item_id not in catalog_ids:
                raise DataError(
                    f"ground-truth id {item_id!r} is not in the catalog")
    stack = np.stack([np.asarray(img, dtype=np.float32)
                      for img, _ in queries])
    vectors = net.embed(checkpoint, stack)
    metric = metric if metric is not None else catalog.metric
    hits = 0
    for vector, (_, truth) in zip(vectors, queries):
        dists = distances_to(catalog.vectors, vector, metric)
        order = sorted(range(catalog.size),
                       key=lambda i: (dists[i], catalog.ids[i]))
        top = {catalog.ids[i] for i in order[:k]}
        if any(t in top for t in truth):
            hits += 1
    return hits / len(queries)
