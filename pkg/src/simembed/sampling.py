"""Training-pair and triplet generation.

Positive candidates for a query are its same-class nearest neighbors under
a cheap similarity scorer (the default scores L1 distance between
normalized intensity histograms).  Negatives mix same-class items drawn
from outside that candidate set with items from other classes, 3:7 by
default.  A ``random_baseline`` strategy replaces the scorer with uniform
same-class / cross-class draws for ablation runs.

All sampling is driven by an explicit ``numpy.random.Generator``; batches
are a deterministic function of (dataset, scorer, config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import MutableMapping, Sequence

import numpy as np

from . import net
from .dataset import Dataset
from .distance import EUCLIDEAN, lk_distance
from .errors import ConfigError, DataError, DimensionError
from .losses import PairSample, TripletSample

Array = np.ndarray

SCORER_INTENSITY = "intensity_histogram"
SCORER_COLOR = "color_histogram"
SCORER_EMBEDDING = "embedding"

STRATEGY_BISS = "biss"
STRATEGY_RANDOM = "random_baseline"


@dataclass(frozen=True)
class BissScorer:
    """A basic image similarity scorer: lower score = more similar.

    Histogram kinds compare L1 distance between normalized histograms
    (intensity pools all channels; color histograms are per-channel and
    concatenated).  The ``embedding`` kind scores Euclidean distance
    between embeddings from ``checkpoint``, which lets a trained model
    bootstrap the sampling of the next run.
    """

    kind: str = SCORER_INTENSITY
    bins: int = 16
    checkpoint: net.Checkpoint | None = None

    def __post_init__(self) -> None:
        if self.kind not in (SCORER_INTENSITY, SCORER_COLOR,
                             SCORER_EMBEDDING):
            raise ConfigError(f"unknown scorer kind {self.kind!r}")
        if self.kind != SCORER_EMBEDDING and self.bins < 2:
            raise ConfigError(
                f"histogram scorers need bins >= 2, got {self.bins}")
        if self.kind == SCORER_EMBEDDING and self.checkpoint is None:
            raise ConfigError("embedding scorer needs a checkpoint")


@dataclass(frozen=True)
class SamplerConfig:
    n_candidates: int = 100
    in_class_fraction: float = 0.3
    rng_seed: int = 0
    strategy: str = STRATEGY_BISS
    self_pair_fraction: float = 0.0  # share of positives taken as
    # augmented views of the query itself

    def __post_init__(self) -> None:
        if self.n_candidates < 1:
            raise ConfigError(
                f"n_candidates must be >= 1, got {self.n_candidates}")
        if not 0 <= self.in_class_fraction <= 1:
            raise ConfigError(
                f"in_class_fraction must be in [0, 1], got "
                f"{self.in_class_fraction}")
        if not 0 <= self.self_pair_fraction <= 1:
            raise ConfigError(
                f"self_pair_fraction must be in [0, 1], got "
                f"{self.self_pair_fraction}")
        if self.strategy not in (STRATEGY_BISS, STRATEGY_RANDOM):
            raise ConfigError(f"unknown strategy {self.strategy!r}")


def _histogram(scorer: BissScorer, image: Array) -> Array:
    """Normalized histogram feature for one (C, H, W) image in [0, 1]."""
    if scorer.kind == SCORER_INTENSITY:
        intensity = image.mean(axis=0)
        hist, _ = np.histogram(intensity, bins=scorer.bins, range=(0.0, 1.0))
        total = hist.sum()
        return hist / total if total else hist.astype(np.float64)
    parts = []
    for channel in image:
        hist, _ = np.histogram(channel, bins=scorer.bins, range=(0.0, 1.0))
        total = hist.sum()
        parts.append(hist / total if total else hist.astype(np.float64))
    return np.concatenate(parts)


def biss_score(scorer: BissScorer, a: Array, b: Array) -> float:
    """Similarity score between two images of equal shape; 0 means the
    scorer cannot tell them apart."""
    if a.shape != b.shape:
        raise DimensionError(
            f"images differ in shape: {a.shape} vs {b.shape}")
    if scorer.kind == SCORER_EMBEDDING:
        stacked = np.stack([a, b])
        vectors = net.embed(scorer.checkpoint, stacked)
        return lk_distance(vectors[0], vectors[1], EUCLIDEAN)
    return float(np.abs(_histogram(scorer, a) - _histogram(scorer, b)).sum())


def _scores_against(scorer: BissScorer, query_image: Array,
                    images: Array) -> Array:
    """Vectorized ``biss_score(scorer, query_image, images[i])``."""
    if scorer.kind == SCORER_EMBEDDING:
        stacked = np.concatenate([query_image[None], images])
        vectors = net.embed(scorer.checkpoint, stacked).astype(np.float64)
        diffs = vectors[1:] - vectors[0]
        return np.sqrt((diffs * diffs).sum(axis=1))
    qh = _histogram(scorer, query_image)
    hists = np.stack([_histogram(scorer, img) for img in images])
    return np.abs(hists - qh).sum(axis=1)


def _feature(scorer: BissScorer, item_id: str, dataset: Dataset,
             cache: MutableMapping[str, Array]) -> Array:
    """Memoized per-item scorer feature, keyed by id within one dataset."""
    feat = cache.get(item_id)
    if feat is None:
        image = dataset.get(item_id).image
        if scorer.kind == SCORER_EMBEDDING:
            feat = net.embed(scorer.checkpoint,
                             image[None])[0].astype(np.float64)
        else:
            feat = _histogram(scorer, image)
        cache[item_id] = feat
    return feat


def positive_candidates(scorer: BissScorer, query_id: str, dataset: Dataset,
                        cfg: SamplerConfig,
                        feature_cache: MutableMapping[str, Array]
                        | None = None) -> list[str]:
    """Up to ``cfg.n_candidates`` same-class ids nearest to the query under
    the scorer, ascending score with ties broken by ascending id; the query
    itself is excluded.  ``feature_cache`` memoizes per-item features
    across repeated calls on the same dataset."""
    query = dataset.get(query_id)
    classmates = [i for i in dataset.class_index[query.class_label]
                  if i != query_id]
    if not classmates:
        raise DataError(
            f"item {query_id!r} is alone in class {query.class_label}; "
            f"no positive candidates exist")
    if feature_cache is None:
        scores = _scores_against(scorer, query.image,
                                 dataset.images(classmates))
    else:
        qf = _feature(scorer, query_id, dataset, feature_cache)
        feats = np.stack([_feature(scorer, i, dataset, feature_cache)
                          for i in classmates])
        if scorer.kind == SCORER_EMBEDDING:
            diffs = feats - qf
            scores = np.sqrt((diffs * diffs).sum(axis=1))
        else:
            scores = np.abs(feats - qf).sum(axis=1)
    order = sorted(range(len(classmates)),
                   key=lambda i: (scores[i], classmates[i]))
    return [classmates[i] for i in order[:cfg.n_candidates]]


def sample_negatives(query_id: str, dataset: Dataset, cfg: SamplerConfig,
                     count: int, rng: np.random.Generator,
                     exclude: Sequence[str] = (),
                     ) -> list[tuple[str, bool]]:
    """Draw ``count`` negative ids for a query: ``round(count *
    in_class_fraction)`` same-class items (outside ``exclude``, normally
    the positive-candidate set) and the remainder from other classes,
    uniformly without replacement within each pool.

    Returns ``(id, in_class)`` tuples, in-class entries first.  Raises
    ``DataError`` naming the shortfall when a pool is too small.
    """
    query = dataset.get(query_id)
    n_in = int(round(count * cfg.in_class_fraction))
    n_out = count - n_in
    excluded = set(exclude) | {query_id}
    in_pool = [i for i in dataset.class_index[query.class_label]
               if i not in excluded]
    out_pool = [item.id for item in dataset.items
                if item.class_label != query.class_label]
    if not out_pool:
        raise DataError("negative sampling needs at least one other class")
    if len(in_pool) < n_in:
        raise DataError(
            f"in-class negative pool for {query_id!r} has {len(in_pool)} "
            f"items, need {n_in} (short by {n_in - len(in_pool)})")
    if len(out_pool) < n_out:
        raise DataError(
            f"out-of-class negative pool has {len(out_pool)} items, need "
            f"{n_out} (short by {n_out - len(out_pool)})")
    picked_in = rng.choice(len(in_pool), size=n_in, replace=False) \
        if n_in else []
    picked_out = rng.choice(len(out_pool), size=n_out, replace=False) \
        if n_out else []
    return ([(in_pool[i], True) for i in picked_in]
            + [(out_pool[i], False) for i in picked_out])


def _queryable_ids(dataset: Dataset) -> list[str]:
    """Ids whose class has at least one other member."""
    return [item.id for item in dataset.items
            if len(dataset.class_index[item.class_label]) >= 2]


def _candidates_cached(scorer: BissScorer, query_id: str, dataset: Dataset,
                       cfg: SamplerConfig,
                       cache: MutableMapping[str, list[str]] | None,
                       feature_cache: MutableMapping[str, Array]
                       | None = None) -> list[str]:
    if cache is None:
        return positive_candidates(scorer, query_id, dataset, cfg,
                                   feature_cache)
    if query_id not in cache:
        cache[query_id] = positive_candidates(scorer, query_id, dataset,
                                              cfg, feature_cache)
    return cache[query_id]


def make_pair_batch(dataset: Dataset, scorer: BissScorer, cfg: SamplerConfig,
                    batch_size: int, pos_fraction: float,
                    rng: np.random.Generator,
                    candidate_cache: MutableMapping[str, list[str]]
                    | None = None,
                    feature_cache: MutableMapping[str, Array]
                    | None = None) -> list[PairSample]:
    """Build a labeled pair batch: ``round(batch_size * pos_fraction)``
    positives (label 0) followed by negatives (label 1).

    Under the ``biss`` strategy positives come from the scorer's candidate
    list (or, with probability ``cfg.self_pair_fraction``, are augmented
    self-pairs) and negatives honor the in/out-of-class mixture.  Under
    ``random_baseline`` positives are uniform same-class pairs and
    negatives uniform cross-class pairs.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    if not 0 <= pos_fraction <= 1:
        raise ConfigError(
            f"pos_fraction must be in [0, 1], got {pos_fraction}")
    queryable = _queryable_ids(dataset)
    if not queryable:
        raise DataError("no class in the dataset has two or more items")
    n_pos = int(round(batch_size * pos_fraction))
    n_neg = batch_size - n_pos

    pairs: list[PairSample] = []
    for _ in range(n_pos):
        query_id = queryable[rng.integers(len(queryable))]
        if cfg.self_pair_fraction and rng.random() < cfg.self_pair_fraction:
            pairs.append(PairSample(query_id, query_id, 0, augmented=True))
            continue
        if cfg.strategy == STRATEGY_BISS:
            candidates = _candidates_cached(scorer, query_id, dataset, cfg,
                                            candidate_cache, feature_cache)
        else:
            label = dataset.get(query_id).class_label
            candidates = [i for i in dataset.class_index[label]
                          if i != query_id]
        pairs.append(PairSample(
            query_id, candidates[rng.integers(len(candidates))], 0))

    all_ids = list(dataset.ids)
    for _ in range(n_neg):
        query_id = all_ids[rng.integers(len(all_ids))]
        if cfg.strategy == STRATEGY_BISS:
            label = dataset.get(query_id).class_label
            if len(dataset.class_index[label]) >= 2:
                exclude = _candidates_cached(scorer, query_id, dataset, cfg,
                                             candidate_cache, feature_cache)
            else:
                exclude = []
            (neg_id, _in_class), = sample_negatives(
                query_id, dataset, cfg, 1, rng, exclude=exclude)
        else:
            label = dataset.get(query_id).class_label
            others = [item.id for item in dataset.items
                      if item.class_label != label]
            if not others:
                raise DataError(
                    "negative sampling needs at least one other class")
            neg_id = others[rng.integers(len(others))]
        pairs.append(PairSample(query_id, neg_id, 1))
    return pairs


def make_triplet_batch(dataset: Dataset, scorer: BissScorer,
                       cfg: SamplerConfig, batch_size: int,
                       rng: np.random.Generator,
                       candidate_cache: MutableMapping[str, list[str]]
                       | None = None,
                       feature_cache: MutableMapping[str, Array]
                       | None = None) -> list[TripletSample]:
    """Build (anchor, positive, negative) triplets: anchors uniform,
    positives from the candidate list (same-class uniform under the random
    baseline), negatives via :func:`sample_negatives` with count 1."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    queryable = _queryable_ids(dataset)
    if not queryable:
        raise DataError("no class in the dataset has two or more items")
    triplets: list[TripletSample] = []
    while len(triplets) < batch_size:
        anchor_id = queryable[rng.integers(len(queryable))]
        label = dataset.get(anchor_id).class_label
        if cfg.strategy == STRATEGY_BISS:
            candidates = _candidates_cached(scorer, anchor_id, dataset, cfg,
                                            candidate_cache, feature_cache)
            positive_id = candidates[rng.integers(len(candidates))]
            (negative_id, _in_class), = sample_negatives(
                anchor_id, dataset, cfg, 1, rng, exclude=candidates)
        else:
            classmates = [i for i in dataset.class_index[label]
                          if i != anchor_id]
            positive_id = classmates[rng.integers(len(classmates))]
            others = [item.id for item in dataset.items
                      if item.class_label != label]
            if not others:
                raise DataError(
                    "negative sampling needs at least one other class")
            negative_id = others[rng.integers(len(others))]
        triplets.append(TripletSample(anchor_id, positive_id, negative_id))
    return triplets
