"""In-memory labeled image dataset."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, DimensionError

Array = np.ndarray


@dataclass(frozen=True)
class DatasetItem:
    id: str
    image: Array  # (C, H, W) float32 in [0, 1]
    class_label: int


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of items with unique ids, indexed by class."""

    items: tuple[DatasetItem, ...]
    class_index: dict[int, tuple[str, ...]] = field(init=False, repr=False)
    _by_id: dict[str, DatasetItem] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.items:
            raise DataError("dataset must contain at least one item")
        by_id: dict[str, DatasetItem] = {}
        shape = self.items[0].image.shape
        classes: dict[int, list[str]] = {}
        for item in self.items:
            if item.id in by_id:
                raise DataError(f"duplicate item id {item.id!r}")
            if item.image.shape != shape:
                raise DimensionError(
                    f"item {item.id!r} has shape {item.image.shape}, "
                    f"expected {shape}")
            by_id[item.id] = item
            classes.setdefault(item.class_label, []).append(item.id)
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(
            self, "class_index",
            {label: tuple(ids) for label, ids in classes.items()})

    def __len__(self) -> int:
        return len(self.items)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.items[0].image.shape

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(item.id for item in self.items)

    def get(self, item_id: str) -> DatasetItem:
        try:
            return self._by_id[item_id]
        except KeyError:
            raise KeyError(f"no item with id {item_id!r}") from None

    def images(self, ids: Sequence[str] | None = None) -> Array:
        """Stack the images of ``ids`` (default: all items) into (N,C,H,W)."""
        picked = self.items if ids is None else [self.get(i) for i in ids]
        return np.stack([item.image for item in picked])

    def subset(self, ids: Iterable[str]) -> "Dataset":
        return Dataset(tuple(self.get(i) for i in ids))


def make_dataset(entries: Iterable[tuple[str, Array, int]]) -> Dataset:
    """Build a dataset from ``(id, image, class_label)`` tuples, coercing
    images to float32."""
    items = tuple(
        DatasetItem(item_id, np.asarray(img, dtype=np.float32), int(label))
        for item_id, img, label in entries)
    return Dataset(items)
