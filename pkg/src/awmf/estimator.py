"""scikit-learn style wrapper around the training and inference functions."""

from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from ._validation import check_labels_present, check_split, check_triplets
from .checkpoint import load_bundle, save_bundle
from .inference import VARIANTS, evaluate, labels_from_proba, predict_all
from .metrics import miou
from .networks import ModelBundle
from .trainer import TrainConfig, run_training

__all__ = ["AWMFSegmenter", "NotFittedError"]


class AWMFSegmenter(BaseEstimator):
    """Three magnification experts fused by an aggregator with learned per-patch weights.

    ``fit`` takes a list of :class:`~awmf.pyramid.PatchTriplet` (split
    internally into expert and weighting-net data) or a ready
    :class:`~awmf.pyramid.DatasetSplit`. Predictions are per-pixel labels of
    each triplet's target window.
    """

    def __init__(self, n_classes=4, window=32, scales=(1, 2, 4), expert_widths=(16, 32, 64),
                 weighting_widths=(8, 16, 32, 64), aggregator_width=16, weighting="adaptive", lr=1e-4,
                 batch_size=8, max_epochs=50, pretrain_epochs=20, patience=5, tol=1e-4, val_fraction=0.2,
                 interpolation="bilinear", augment=True, random_state=0, checkpoint_dir=None, threads=1):
        self.n_classes = n_classes
        self.window = window
        self.scales = scales
        self.expert_widths = expert_widths
        self.weighting_widths = weighting_widths
        self.aggregator_width = aggregator_width
        self.weighting = weighting
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.pretrain_epochs = pretrain_epochs
        self.patience = patience
        self.tol = tol
        self.val_fraction = val_fraction
        self.interpolation = interpolation
        self.augment = augment
        self.random_state = random_state
        self.checkpoint_dir = checkpoint_dir
        self.threads = threads

    def _train_config(self, in_channels: int) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
            pretrain_epochs=self.pretrain_epochs, patience=self.patience, tol=self.tol,
            seed=int(self.random_state), window=self.window, n_classes=self.n_classes,
            in_channels=in_channels, interpolation=self.interpolation, weighting=self.weighting,
            augment=self.augment, expert_widths=self.expert_widths, weighting_widths=self.weighting_widths,
            aggregator_width=self.aggregator_width, scales=self.scales, threads=self.threads,
        )

    def fit(self, X, y=None, init=None):
        """Train from scratch, or continue from ``init`` (a bundle, e.g. pre-trained experts)."""
        split = check_split(X, self.val_fraction, int(self.random_state))
        check_triplets(split.train + split.weighting, self.window)
        check_labels_present(split.train, self.n_classes)
        config = self._train_config(split.train[0].x[0].shape[0])
        bundle = init.copy() if isinstance(init, ModelBundle) else None
        self.bundle_, self.log_ = run_training(config, split, self.checkpoint_dir, bundle)
        self.config_ = config
        return self

    @classmethod
    def from_bundle(cls, bundle: ModelBundle, **params) -> "AWMFSegmenter":
        """Wrap an already trained bundle (for instance one loaded from a checkpoint)."""
        params.setdefault("n_classes", bundle.n_classes)
        params.setdefault("window", bundle.window)
        params.setdefault("scales", tuple(bundle.scales))
        params.setdefault("interpolation", bundle.meta.get("interpolation", "bilinear"))
        params.setdefault("weighting", bundle.meta.get("weighting", "adaptive"))
        est = cls(**params)
        est.bundle_ = bundle
        est.log_ = None
        return est

    @classmethod
    def load(cls, path, **params) -> "AWMFSegmenter":
        return cls.from_bundle(load_bundle(path), **params)

    def save(self, path) -> None:
        check_is_fitted(self, "bundle_")
        save_bundle(self.bundle_, path)

    def _predict(self, X, variants):
        check_is_fitted(self, "bundle_")
        triplets = check_triplets(X, self.bundle_.window, self.bundle_.in_channels)
        return predict_all(self.bundle_, triplets, self.interpolation, threads=self.threads, variants=variants)

    def predict_proba(self, X, variant=None) -> np.ndarray:
        """Class probabilities (N, M, W, W); ``variant`` defaults to the trained weighting mode."""
        variant = variant or self.weighting
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        return self._predict(X, (variant,))[variant]

    def predict(self, X, variant=None) -> np.ndarray:
        return labels_from_proba(self.predict_proba(X, variant))

    def predict_weights(self, X) -> np.ndarray:
        """Weighting-network outputs (N, 3), each in (0, 1)."""
        return self._predict(X, ("adaptive",))["weights"]

    def predict_experts(self, X) -> list:
        out = self._predict(X, ("expert1", "expert2", "expert3"))
        return [labels_from_proba(out[f"expert{k}"]) for k in (1, 2, 3)]

    def confusion_matrices(self, X) -> dict:
        check_is_fitted(self, "bundle_")
        triplets = check_triplets(X, self.bundle_.window, self.bundle_.in_channels)
        return evaluate(self.bundle_, triplets, self.interpolation, threads=self.threads)

    def score(self, X, y=None, variant=None) -> float:
        """mIoU of ``variant`` (default: the trained weighting mode) on the triplets' targets."""
        variant = variant or self.weighting
        check_is_fitted(self, "bundle_")
        triplets = check_triplets(X, self.bundle_.window, self.bundle_.in_channels)
        cm = evaluate(self.bundle_, triplets, self.interpolation, threads=self.threads, variants=(variant,))[variant]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return miou(cm)
