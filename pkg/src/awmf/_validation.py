"""Input checks shared by the estimator API."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .exceptions import DataError, ShapeError
from .pyramid import DatasetSplit, PatchTriplet


def check_triplets(triplets, window: int | None = None, n_channels: int | None = None) -> list:
    """Return ``triplets`` as a list after checking type and consistent geometry."""
    if isinstance(triplets, PatchTriplet):
        triplets = [triplets]
    triplets = list(triplets)
    if not triplets:
        raise DataError("expected at least one patch triplet")
    for t in triplets:
        if not isinstance(t, PatchTriplet):
            raise TypeError(f"expected PatchTriplet items, got {type(t).__name__}")
    w = triplets[0].window if window is None else window
    c = triplets[0].x[0].shape[0] if n_channels is None else n_channels
    for t in triplets:
        for x, lab in zip(t.x, t.t):
            if x.shape != (c, w, w):
                raise ShapeError(f"triplet {t.id}: image shape {x.shape}, expected {(c, w, w)}")
            if lab.shape != (w, w):
                raise ShapeError(f"triplet {t.id}: label shape {lab.shape}, expected {(w, w)}")
    return triplets


def check_split(data, val_fraction: float, seed: int) -> DatasetSplit:
    """Accept a ready :class:`DatasetSplit` or a flat triplet list to be split here."""
    from .pyramid import split_dataset

    if isinstance(data, DatasetSplit):
        check_triplets(data.train + data.weighting)
        return data
    triplets = check_triplets(data)
    train, weighting = split_dataset(triplets, val_fraction, seed)
    return DatasetSplit(train, weighting, [], seed)


def check_labels_present(triplets: Sequence[PatchTriplet], n_classes: int) -> None:
    seen = np.zeros(n_classes, dtype=bool)
    for t in triplets:
        lab = t.t[0]
        vals = np.unique(lab[lab != 255])
        if vals.size and vals.max() >= n_classes:
            raise DataError(f"label {int(vals.max())} outside 0..{n_classes - 1}")
        seen[vals] = True
    if not seen.all():
        raise DataError(f"classes {np.flatnonzero(~seen).tolist()} never occur in the training labels")
