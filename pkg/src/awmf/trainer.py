"""Alternating training: expert pre-training, Dice weight targets, weighting
epochs and end-to-end epochs of the integrated network.

Randomness is drawn from generators seeded by ``(seed, stage, epoch)`` so a
run resumed from an epoch checkpoint replays exactly what an uninterrupted
run would have done.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_bundle
from .exceptions import ConfigError, DataError, DivergenceError, NonFiniteError
from .inference import predict_all
from .metrics import confusion, miou
from .networks import ModelBundle, integrated_forward
from .objectives import (
    class_weights,
    dice_targets_batch,
    mse_weight_loss,
    total_loss,
    weighted_cross_entropy,
)
from .optim import Nadam
from .pyramid import DatasetSplit, flip_augment, stack_triplets
from .tensor import Tape

logger = logging.getLogger(__name__)

LOG_COLUMNS = (
    "epoch", "loss_e1", "loss_e2", "loss_e3", "loss_w", "loss_a", "loss_total",
    "val_loss", "val_miou", "w1_mean", "w2_mean", "w3_mean", "seconds",
)

_PRETRAIN, _WEIGHTING, _END_TO_END = 1, 2, 3


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 50
    pretrain_epochs: int = 20
    patience: int = 5
    tol: float = 1e-4
    seed: int = 0
    window: int = 32
    n_classes: int = 4
    in_channels: int = 1
    interpolation: str = "bilinear"
    weighting: str = "adaptive"
    augment: bool = True
    expert_widths: tuple = (16, 32, 64)
    weighting_widths: tuple = (8, 16, 32, 64)
    aggregator_width: int = 16
    scales: tuple = (1, 2, 4)
    eval_batch_size: int = 64
    threads: int = 1

    def __post_init__(self):
        self.expert_widths = tuple(int(w) for w in self.expert_widths)
        self.weighting_widths = tuple(int(w) for w in self.weighting_widths)
        self.scales = tuple(int(s) for s in self.scales)
        for name in ("lr", "batch_size", "max_epochs", "patience", "window", "n_classes", "in_channels",
                     "aggregator_width", "eval_batch_size", "threads"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.pretrain_epochs < 0 or self.tol < 0:
            raise ConfigError("pretrain_epochs and tol must be non-negative")
        if self.interpolation not in ("nearest", "bilinear"):
            raise ConfigError(f"interpolation must be nearest or bilinear, got {self.interpolation!r}")
        if self.weighting not in ("adaptive", "fixed"):
            raise ConfigError(f"weighting must be adaptive or fixed, got {self.weighting!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @property
    def variant(self) -> str:
        return self.weighting


class TrainLog:
    """Append-only per-epoch records, serialised as CSV."""

    def __init__(self, records: Sequence[dict] | None = None):
        self.records: list[dict] = list(records or [])

    def append(self, record: dict) -> None:
        missing = set(LOG_COLUMNS) - set(record)
        if missing:
            raise ValueError(f"log record lacks {sorted(missing)}")
        self.records.append({k: record[k] for k in LOG_COLUMNS})

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> dict:
        return self.records[i]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(self.records)

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls([{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows])


@dataclass
class WeightTargetSet:
    targets: np.ndarray
    ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.targets)


def _rng(config: TrainConfig, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(config.seed), *keys])


@contextmanager
def _stage(label: str):
    try:
        yield
    except NonFiniteError as exc:
        raise DivergenceError(f"{label}: {exc}") from exc


def _check_loss(value: float, label: str) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{label}: non-finite loss")


def _batches(triplets: Sequence, config: TrainConfig, rng: np.random.Generator):
    order = rng.permutation(len(triplets))
    for a in range(0, len(order), config.batch_size):
        idx = order[a:a + config.batch_size]
        batch = [triplets[i] for i in idx]
        if config.augment:
            batch = [flip_augment(t, rng) for t in batch]
        yield idx, stack_triplets(batch)


def expert_alphas(triplets: Sequence, n_classes: int) -> list:
    """Class weights per magnification, from that magnification's label maps."""
    if not triplets:
        raise DataError("no training triplets")
    return [class_weights((t.t[k] for t in triplets), n_classes) for k in range(3)]


def build_bundle(config: TrainConfig) -> ModelBundle:
    bundle = ModelBundle.build(
        config.n_classes, config.window, config.in_channels, config.expert_widths, config.weighting_widths,
        config.aggregator_width, config.scales, seed=config.seed,
    )
    bundle.meta.update(stage="init", interpolation=config.interpolation, weighting=config.weighting,
                       best_val=None, stale=0)
    return bundle


def _expert_val_loss(bundle: ModelBundle, k: int, triplets: Sequence, alpha, config: TrainConfig) -> float:
    xs, ts = stack_triplets(triplets)
    total = 0.0
    for a in range(0, len(triplets), config.eval_batch_size):
        y = bundle.experts[k].forward(xs[k][a:a + config.eval_batch_size], "eval")
        total += weighted_cross_entropy(y, ts[k][a:a + config.eval_batch_size], alpha).item()
    return total / ts[k].size


def pretrain_experts(bundle: ModelBundle, split: DatasetSplit, config: TrainConfig,
                     epochs: int | None = None) -> ModelBundle:
    """Train each expert alone on its own magnification with the weighted CE loss."""
    if not split.train:
        raise DataError("pre-training needs a non-empty training split")
    epochs = config.pretrain_epochs if epochs is None else epochs
    alphas = expert_alphas(split.train, config.n_classes)
    for k, expert in enumerate(bundle.experts):
        opt = Nadam(expert.parameters(), lr=config.lr)
        best, stale = math.inf, 0
        for epoch in range(1, epochs + 1):
            rng = _rng(config, _PRETRAIN, k, epoch)
            running, pixels = 0.0, 0
            for b, (_, (xs, ts)) in enumerate(_batches(split.train, config, rng)):
                label = f"pretrain expert{k + 1} epoch {epoch} batch {b}"
                with _stage(label):
                    with Tape() as tape:
                        loss = weighted_cross_entropy(expert.forward(xs[k], "train"), ts[k], alphas[k])
                    _check_loss(loss.item(), label)
                    tape.backward(loss)
                    opt.step()
                running += loss.item()
                pixels += ts[k].size
            if split.weighting:
                val = _expert_val_loss(bundle, k, split.weighting, alphas[k], config)
            else:
                val = running / pixels
            logger.info("pretrain expert%d epoch %d: train %.4f val %.4f", k + 1, epoch, running / pixels, val)
            if val < best - config.tol:
                best, stale = val, 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    bundle.meta["stage"] = "pretrained"
    return bundle


def generate_weight_targets(bundle: ModelBundle, triplets: Sequence, batch_size: int = 64,
                            threads: int = 1) -> WeightTargetSet:
    """Dice of each expert's full-frame prediction against its own labels, per patch."""
    from .inference import expert_maps

    xs, ts = stack_triplets(triplets)
    maps = expert_maps(bundle, xs, batch_size, threads)
    targets = np.stack([dice_targets_batch(maps[k], ts[k], bundle.n_classes) for k in range(3)], axis=1)
    return WeightTargetSet(targets, [t.id for t in triplets])


def train_weighting_epoch(bundle: ModelBundle, targets: WeightTargetSet, triplets: Sequence,
                          config: TrainConfig, epoch: int = 1) -> float:
    """One epoch of squared-error regression of the weighting net onto ``targets``.

    Only the weighting network's parameters change. Returns the mean per-patch loss.
    """
    if len(targets) == 0 or len(targets) != len(triplets):
        raise DataError("weight targets must be non-empty and match the triplets one-to-one")
    opt = Nadam(bundle.weighting.parameters(), lr=config.lr)
    rng = _rng(config, _WEIGHTING, epoch)
    total = 0.0
    for b, (idx, (xs, _)) in enumerate(_batches(triplets, config, rng)):
        label = f"weighting epoch {epoch} batch {b}"
        with _stage(label):
            with Tape() as tape:
                loss = mse_weight_loss(bundle.weighting.forward(xs[1], "train"), targets.targets[idx])
            _check_loss(loss.item(), label)
            tape.backward(loss)
            opt.step()
        total += loss.item()
    return total / len(triplets)


def _batch_weights(bundle: ModelBundle, x2: np.ndarray, config: TrainConfig) -> np.ndarray:
    if config.weighting == "fixed":
        return np.ones((len(x2), 3))
    return bundle.weighting.forward(x2, "eval").data


def end_to_end_epoch(bundle: ModelBundle, split: DatasetSplit, config: TrainConfig, epoch: int = 1,
                     alphas: list | None = None) -> dict:
    """One epoch over the training triplets updating experts and aggregator jointly.

    Weights come from the frozen weighting net (or are fixed at 1); no
    gradient reaches the weighting parameters.
    """
    alphas = expert_alphas(split.train, config.n_classes) if alphas is None else alphas
    opt = Nadam(bundle.expert_parameters() + bundle.aggregator.parameters(), lr=config.lr)
    rng = _rng(config, _END_TO_END, epoch)
    sums = {"loss_a": 0.0, "loss_e1": 0.0, "loss_e2": 0.0, "loss_e3": 0.0}
    w_sum = np.zeros(3)
    pixels = 0
    for b, (_, (xs, ts)) in enumerate(_batches(split.train, config, rng)):
        label = f"end-to-end epoch {epoch} batch {b}"
        with _stage(label):
            w = _batch_weights(bundle, xs[1], config)
            with Tape() as tape:
                y, maps = integrated_forward(bundle, xs, w, "train", config.interpolation)
                loss, terms = total_loss(y, maps, ts[0], ts, alphas, alphas[0])
            _check_loss(loss.item(), label)
            tape.backward(loss)
            opt.step()
        for key in sums:
            sums[key] += terms[key]
        w_sum += w.sum(axis=0)
        pixels += ts[0].size
    out = {k: v / pixels for k, v in sums.items()}
    out["loss_total"] = sum(out.values())
    out.update({f"w{k + 1}_mean": w_sum[k] / len(split.train) for k in range(3)})
    return out


def validate(bundle: ModelBundle, triplets: Sequence, config: TrainConfig, alphas: list) -> tuple:
    """(per-pixel total loss, mIoU) of the configured variant in eval mode."""
    variant = config.weighting
    res = predict_all(bundle, triplets, config.interpolation, config.eval_batch_size, config.threads,
                      (variant,), return_maps=True)
    _, ts = stack_triplets(triplets)
    loss = weighted_cross_entropy(res[variant], ts[0], alphas[0]).item()
    for k in range(3):
        loss += weighted_cross_entropy(res["maps"][k], ts[k], alphas[k]).item()
    pred = np.argmax(res[variant], axis=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        score = miou(confusion(pred, ts[0], config.n_classes))
    return loss / ts[0].size, score


def run_training(config: TrainConfig, dataset: DatasetSplit, out_dir=None, bundle: ModelBundle | None = None,
                 log: TrainLog | None = None) -> tuple:
    """Pre-train (unless ``bundle`` already is), then alternate weighting and end-to-end epochs.

    Stops after ``max_epochs`` or once validation loss has failed to improve
    by ``tol`` for ``patience`` consecutive epochs. With ``out_dir`` it writes
    ``epoch_<n>.awmf`` every epoch, ``best.awmf`` on improvement and
    ``train_log.csv``. Passing a bundle loaded from an epoch checkpoint resumes.
    """
    if not dataset.train or not dataset.weighting:
        raise DataError("training needs non-empty train and weighting (validation) sets")
    log = TrainLog() if log is None else log
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if bundle is None:
        bundle = build_bundle(config)
    if bundle.n_classes != config.n_classes or bundle.window != config.window:
        raise ConfigError(
            f"model geometry (M={bundle.n_classes}, W={bundle.window}) does not match config "
            f"(M={config.n_classes}, W={config.window})"
        )
    bundle.meta.update(interpolation=config.interpolation, weighting=config.weighting)
    if bundle.meta.get("stage", "init") == "init":
        pretrain_experts(bundle, dataset, config)
    alphas = expert_alphas(dataset.train, config.n_classes)
    best = bundle.meta.get("best_val")
    best = math.inf if best is None else best
    stale = int(bundle.meta.get("stale", 0))
    start = int(bundle.meta.get("epoch", 0)) + 1
    for epoch in range(start, config.max_epochs + 1):
        t0 = time.perf_counter()
        loss_w = float("nan")
        if config.weighting == "adaptive":
            with _stage(f"weight targets epoch {epoch}"):
                targets = generate_weight_targets(bundle, dataset.weighting, config.eval_batch_size, config.threads)
            loss_w = train_weighting_epoch(bundle, targets, dataset.weighting, config, epoch)
        stats = end_to_end_epoch(bundle, dataset, config, epoch, alphas)
        with _stage(f"validation epoch {epoch}"):
            val_loss, val_miou = validate(bundle, dataset.weighting, config, alphas)
        improved = val_loss < best - config.tol
        if improved:
            best, stale = val_loss, 0
        else:
            stale += 1
        bundle.meta.update(stage="trained", epoch=epoch, best_val=best, stale=stale)
        record = {"epoch": epoch, "loss_w": loss_w, "val_loss": val_loss, "val_miou": val_miou,
                  "seconds": time.perf_counter() - t0, **stats}
        log.append(record)
        logger.info("epoch %d: total %.4f val %.4f mIoU %.4f w=(%.2f, %.2f, %.2f)", epoch,
                    stats["loss_total"], val_loss, val_miou, stats["w1_mean"], stats["w2_mean"], stats["w3_mean"])
        if out is not None:
            save_bundle(bundle, out / f"epoch_{epoch}.awmf")
            if improved:
                save_bundle(bundle, out / "best.awmf")
            log.to_csv(out / "train_log.csv")
        if stale >= config.patience:
            break
    return bundle, log
