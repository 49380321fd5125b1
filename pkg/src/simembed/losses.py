"""Pairwise contrastive loss and triplet angular loss, with gradients.

Both losses are written against an arbitrary ``DistanceMetric``; the default
used by training configs is Euclidean.  With fractional exponents the
derivative of ``|a_i - b_i|^k`` is singular where coordinates coincide, so
any partial term with ``|a_i - b_i| < 1e-12`` is set to zero.  That keeps
gradients finite and deterministic at the (measure-zero) singular points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .distance import EUCLIDEAN, DistanceMetric
from .errors import DataError, DimensionError, NumericError

Array = np.ndarray

COINCIDENT_GUARD = 1e-12

HINGE_AS_WRITTEN = "as_written"
HINGE_SQUARED = "squared_hinge"
ANGULAR_NEGATIVE_TO_CENTER = "negative_to_center"
ANGULAR_AS_WRITTEN = "as_written"


@dataclass(frozen=True)
class PairSample:
    """A supervised image pair: label 0 means similar, 1 dissimilar.

    ``augmented`` marks self-pairs built from two augmented views of the
    same image; only those may have ``query_id == candidate_id``.
    """

    query_id: str
    candidate_id: str
    label: int
    augmented: bool = False

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"pair label must be 0 or 1, got {self.label}")
        if self.query_id == self.candidate_id and not self.augmented:
            raise ValueError(
                f"pair of {self.query_id!r} with itself must be flagged "
                f"augmented")


@dataclass(frozen=True)
class TripletSample:
    """An (anchor, positive, negative) triplet of distinct item ids."""

    anchor_id: str
    positive_id: str
    negative_id: str

    def __post_init__(self) -> None:
        ids = (self.anchor_id, self.positive_id, self.negative_id)
        if len(set(ids)) != 3:
            raise ValueError(f"triplet ids must be pairwise distinct: {ids}")


@dataclass(frozen=True)
class ContrastiveConfig:
    """Margin and hinge form for the contrastive loss.

    ``as_written`` puts the squared distance inside the hinge,
    ``max(0, m - D^2)``; ``squared_hinge`` is the classic ``max(0, m - D)^2``.
    """

    margin: float = 1.0
    hinge_variant: str = HINGE_AS_WRITTEN

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.hinge_variant not in (HINGE_AS_WRITTEN, HINGE_SQUARED):
            raise ValueError(f"unknown hinge variant {self.hinge_variant!r}")


@dataclass(frozen=True)
class AngularConfig:
    """Angle bound (degrees) and formula variant for the angular loss.

    ``negative_to_center`` measures the second term from the negative to the
    midpoint of anchor and positive; ``as_written`` measures it from the
    anchor to that midpoint, which never involves the negative at all and is
    kept only for completeness.
    """

    alpha_degrees: float = 45.0
    formula_variant: str = ANGULAR_NEGATIVE_TO_CENTER

    def __post_init__(self) -> None:
        if not 0 < self.alpha_degrees < 90:
            raise ValueError(
                f"alpha must be in (0, 90) degrees, got {self.alpha_degrees}")
        if self.formula_variant not in (ANGULAR_NEGATIVE_TO_CENTER,
                                        ANGULAR_AS_WRITTEN):
            raise ValueError(
                f"unknown formula variant {self.formula_variant!r}")

    @property
    def tan_alpha_sq(self) -> float:
        return math.tan(math.radians(self.alpha_degrees)) ** 2


def squared_distance_with_grad(a: Array, b: Array,
                               metric: DistanceMetric) -> tuple[float, Array]:
    """``D(a, b)^2`` and its gradient with respect to ``a``.

    For ``D^2 = S^(2/k)`` with ``S = sum |a_i - b_i|^k`` the partial is
    ``2 * S^(2/k - 1) * |d_i|^(k-1) * sign(d_i)``; terms with
    ``|d_i| < 1e-12`` are zeroed (see module docstring).  The gradient with
    respect to ``b`` is the negation.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(
            f"expected equal-length vectors, got {a.shape} and {b.shape}")
    k = metric.exponent
    d = a - b
    absd = np.abs(d)
    s = float((absd ** k).sum())
    if s == 0.0:
        return 0.0, np.zeros_like(a)
    dsq = s ** (2.0 / k)
    grad = np.zeros_like(a)
    live = absd >= COINCIDENT_GUARD
    grad[live] = (2.0 * s ** (2.0 / k - 1.0)
                  * absd[live] ** (k - 1.0) * np.sign(d[live]))
    return dsq, grad


def contrastive_loss(xq: Array, xc: Array, label: int,
                     cfg: ContrastiveConfig,
                     metric: DistanceMetric = EUCLIDEAN,
                     ) -> tuple[float, Array, Array]:
    """Per-pair contrastive loss and gradients w.r.t. both embeddings.

    Similar pairs (label 0) pay ``D^2 / 2``; dissimilar pairs (label 1) pay
    the hinge selected by ``cfg``, with an exactly-zero gradient wherever
    the hinge is inactive.
    """
    dsq, g = squared_distance_with_grad(xq, xc, metric)
    if label == 0:
        loss = 0.5 * dsq
        gq = 0.5 * g
    elif label == 1:
        if cfg.hinge_variant == HINGE_AS_WRITTEN:
            slack = cfg.margin - dsq
            if slack > 0:
                loss = 0.5 * slack
                gq = -0.5 * g
            else:
                loss = 0.0
                gq = np.zeros_like(g)
        else:  # squared hinge on the plain distance
            dist = math.sqrt(dsq)
            slack = cfg.margin - dist
            if slack > 0:
                loss = 0.5 * slack * slack
                # dD/dx = dD^2/dx / (2 D); at D == 0 the guarded rule gives 0
                gq = -slack * g / (2 * dist) if dist > 0 else np.zeros_like(g)
            else:
                loss = 0.0
                gq = np.zeros_like(g)
    else:
        raise ValueError(f"label must be 0 or 1, got {label}")
    if not math.isfinite(loss):
        raise NumericError("contrastive loss is non-finite")
    return loss, gq, -gq


def angular_loss(xa: Array, xp: Array, xn: Array, cfg: AngularConfig,
                 metric: DistanceMetric = EUCLIDEAN,
                 ) -> tuple[float, Array, Array, Array]:
    """Per-triplet angular loss and gradients w.r.t. all three embeddings.

    With center ``x_c = (x_a + x_p) / 2`` the loss is
    ``max(0, D(x_a, x_p)^2 - 4 tan^2(alpha) * D(x_n, x_c)^2)`` in the
    default variant; the ``as_written`` variant replaces the second term
    with ``D(x_a, x_c)^2``.  The center's dependence on anchor and positive
    contributes to their gradients in the active region.
    """
    xa = np.asarray(xa, dtype=np.float64)
    xp = np.asarray(xp, dtype=np.float64)
    xn = np.asarray(xn, dtype=np.float64)
    if not (xa.shape == xp.shape == xn.shape) or xa.ndim != 1:
        raise DimensionError(
            f"expected three equal-length vectors, got {xa.shape}, "
            f"{xp.shape}, {xn.shape}")
    center = (xa + xp) / 2.0
    scale = 4.0 * cfg.tan_alpha_sq
    dsq_ap, g_ap = squared_distance_with_grad(xa, xp, metric)

    if cfg.formula_variant == ANGULAR_NEGATIVE_TO_CENTER:
        dsq_second, g_n = squared_distance_with_grad(xn, center, metric)
        raw = dsq_ap - scale * dsq_second
        if raw <= 0:
            zero = np.zeros_like(xa)
            return 0.0, zero.copy(), zero.copy(), zero.copy()
        # d(dsq_second)/d(center) = -g_n, and d(center)/d(xa) = 1/2
        ga = g_ap + 0.5 * scale * g_n
        gp = -g_ap + 0.5 * scale * g_n
        gn = -scale * g_n
    else:
        dsq_second, g_a_first = squared_distance_with_grad(xa, center, metric)
        raw = dsq_ap - scale * dsq_second
        if raw <= 0:
            zero = np.zeros_like(xa)
            return 0.0, zero.copy(), zero.copy(), zero.copy()
        # both arguments depend on xa: direct term plus the center chain
        d_second_da = g_a_first - 0.5 * g_a_first
        d_second_dp = -0.5 * g_a_first
        ga = g_ap - scale * d_second_da
        gp = -g_ap - scale * d_second_dp
        gn = np.zeros_like(xa)
    if not math.isfinite(raw):
        raise NumericError("angular loss is non-finite")
    return raw, ga, gp, gn


def batch_loss(embeddings: Array, ids: Sequence[str],
               samples: Sequence[PairSample | TripletSample],
               cfg: ContrastiveConfig | AngularConfig,
               metric: DistanceMetric = EUCLIDEAN,
               ) -> tuple[float, Array]:
    """Mean loss over ``samples`` plus gradients per embedding row.

    ``embeddings`` is an ``(R, D)`` matrix and ``ids`` names its rows;
    every sample id must resolve to a row.  Per-sample gradients are
    accumulated in sample order and divided by the sample count.
    """
    if len(samples) == 0:
        raise DataError("batch_loss on an empty sample list")
    if embeddings.ndim != 2 or len(ids) != embeddings.shape[0]:
        raise DimensionError(
            f"embeddings {embeddings.shape} do not match {len(ids)} ids")
    row_of = {item_id: row for row, item_id in enumerate(ids)}
    if len(row_of) != len(ids):
        raise DataError("embedding row ids must be unique")

    def resolve(item_id: str) -> int:
        try:
            return row_of[item_id]
        except KeyError:
            raise KeyError(
                f"sample id {item_id!r} has no embedding row") from None

    total = 0.0
    grads = np.zeros(embeddings.shape, dtype=np.float64)
    for sample in samples:
        if isinstance(sample, PairSample):
            if not isinstance(cfg, ContrastiveConfig):
                raise TypeError("pair samples require a ContrastiveConfig")
            qi, ci = resolve(sample.query_id), resolve(sample.candidate_id)
            loss, gq, gc = contrastive_loss(
                embeddings[qi], embeddings[ci], sample.label, cfg, metric)
            total += loss
            grads[qi] += gq
            grads[ci] += gc
        elif isinstance(sample, TripletSample):
            if not isinstance(cfg, AngularConfig):
                raise TypeError("triplet samples require an AngularConfig")
            ai = resolve(sample.anchor_id)
            pi = resolve(sample.positive_id)
            ni = resolve(sample.negative_id)
            loss, ga, gp, gn = angular_loss(
                embeddings[ai], embeddings[pi], embeddings[ni], cfg, metric)
            total += loss
            grads[ai] += ga
            grads[pi] += gp
            grads[ni] += gn
        else:
            raise TypeError(f"unsupported sample type {type(sample)!r}")
    n = len(samples)
    mean = total / n
    if not math.isfinite(mean):
        raise NumericError("batch loss is non-finite")
    return mean, (grads / n).astype(embeddings.dtype, copy=False)
