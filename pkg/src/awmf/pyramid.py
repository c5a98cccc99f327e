"""Slides, concentric multi-magnification patch triplets and synthetic data.

A triplet's three fields of view share one centre: magnification ``k``
covers ``scales[k-1] * W`` slide pixels, area-averaged down to ``W x W``.
Labels are downsampled by nearest neighbour so no class is ever invented.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .exceptions import ConfigError, DataError
from .objectives import IGNORE
from .pnm import load_image, load_labels, save_image, save_labels

DEFAULT_SCALES = (1, 2, 4)
TWO_CLASS_RATIOS = (0.67, 0.33)
FOUR_CLASS_RATIOS = (0.25, 0.29, 0.23, 0.23)


@dataclass
class Slide:
    image: np.ndarray
    labels: np.ndarray
    identifier: str = "slide"

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.labels = np.asarray(self.labels)
        if self.image.dtype != np.uint8 or self.labels.dtype != np.uint8:
            raise DataError("slide image and labels must be 8-bit")
        if self.image.ndim not in (2, 3) or (self.image.ndim == 3 and self.image.shape[2] != 3):
            raise DataError(f"slide image must be (H, W) or (H, W, 3), got {self.image.shape}")
        if self.labels.shape != self.image.shape[:2]:
            raise DataError(f"label extents {self.labels.shape} do not match image extents {self.image.shape[:2]}")

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    @property
    def channels(self) -> int:
        return 1 if self.image.ndim == 2 else 3


@dataclass
class PatchTriplet:
    """Three concentric magnifications of one target region plus their labels."""

    x: tuple
    t: tuple
    origin: tuple = (0, 0)
    slide_id: str = "slide"

    @property
    def id(self) -> str:
        return f"{self.slide_id}:{self.origin[0]}:{self.origin[1]}"

    @property
    def window(self) -> int:
        return self.t[0].shape[-1]


@dataclass
class DatasetSplit:
    train: list
    weighting: list
    test: list = field(default_factory=list)
    seed: int = 0


def _check_geometry(window: int, scales: Sequence[int]) -> None:
    if window % 4:
        raise ConfigError(f"window {window} must be divisible by 4")
    for s in scales:
        if ((s - 1) * window // 2) % s or window % s:
            raise ConfigError(f"window {window} cannot be registered concentrically at scale {s}")


def extract_triplets(slide: Slide, window: int, stride: int, scales: Sequence[int] = DEFAULT_SCALES) -> list:
    """Tile ``slide`` row-major into triplets whose targets lie fully inside it.

    Wider fields of view running past the border are mirror padded.
    """
    _check_geometry(window, scales)
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    h, w = slide.shape
    if h < window or w < window:
        raise DataError(f"slide {slide.identifier!r} ({h}x{w}) is smaller than the window {window}")
    image = slide.image.astype(np.float64) / 255.0
    image = image[None] if image.ndim == 2 else image.transpose(2, 0, 1)
    c = image.shape[0]
    pad = (max(scales) - 1) * window // 2
    image = np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    labels = np.pad(slide.labels, pad, mode="reflect")
    out = []
    for r in range(0, h - window + 1, stride):
        for col in range(0, w - window + 1, stride):
            cy, cx = r + window // 2 + pad, col + window // 2 + pad
            xs, ts = [], []
            for s in scales:
                half = s * window // 2
                region = image[:, cy - half:cy + half, cx - half:cx + half]
                xs.append(region.reshape(c, window, s, window, s).mean(axis=(2, 4)))
                lab = labels[cy - half:cy + half, cx - half:cx + half]
                ts.append(np.ascontiguousarray(lab[s // 2::s, s // 2::s]))
            out.append(PatchTriplet(tuple(xs), tuple(ts), (r, col), slide.identifier))
    return out


def flip_augment(triplet: PatchTriplet, seed=None) -> PatchTriplet:
    """Random horizontal/vertical flips applied identically to all six rasters."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flip_h, flip_v = rng.random(2) < 0.5
    return flip(triplet, bool(flip_h), bool(flip_v))


def flip(triplet: PatchTriplet, horizontal: bool, vertical: bool) -> PatchTriplet:
    def _apply(a):
        if horizontal:
            a = a[..., :, ::-1]
        if vertical:
            a = a[..., ::-1, :]
        return np.ascontiguousarray(a)

    return replace(triplet, x=tuple(_apply(a) for a in triplet.x), t=tuple(_apply(a) for a in triplet.t))


def split_dataset(triplets: Sequence, val_fraction: float = 0.2, seed: int = 0):
    """Seeded shuffle then partition into (train, validation) lists.

    The validation part doubles as the weighting network's training set.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(triplets)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        raise DataError(f"splitting {n} triplets at fraction {val_fraction} leaves an empty partition")
    order = np.random.default_rng(seed).permutation(n)
    val_idx = np.sort(order[:n_val])
    train_idx = np.sort(order[n_val:])
    return [triplets[i] for i in train_idx], [triplets[i] for i in val_idx]


def stack_triplets(triplets: Sequence):
    """Batch arrays: three (N, C, W, W) image stacks and three (N, W, W) label stacks."""
    if not triplets:
        raise DataError("cannot stack an empty list of triplets")
    xs = [np.stack([t.x[k] for t in triplets]) for k in range(3)]
    ts = [np.stack([t.t[k] for t in triplets]) for k in range(3)]
    return xs, ts


# ----------------------------------------------------------------- synthetic slides

@dataclass
class SynthConfig:
    """Generator settings for the factorial texture-by-layout slides.

    Classes combine a fine texture (checkerboard vs. row stripes, both of
    period two, so any 2x2 area average erases them) with a coarse layout
    cue (bright vs. dark spots on a sparse lattice, wider apart than one
    target window). Two-class slides label only the coarse factor.
    """

    n_classes: int = 4
    height: int = 256
    width: int = 256
    ratios: tuple | None = None
    coarse_sigma: float = 20.0
    fine_sigma: float = 12.0
    texture_amplitude: float = 0.12
    noise: float = 0.04
    spot_spacing: int = 48
    spot_radius: float = 5.0
    spot_contrast: float = 0.25
    color: bool = False

    def class_ratios(self) -> np.ndarray:
        if self.n_classes not in (2, 4):
            raise ConfigError(f"synthetic slides support 2 or 4 classes, got {self.n_classes}")
        ratios = self.ratios
        if ratios is None:
            ratios = TWO_CLASS_RATIOS if self.n_classes == 2 else FOUR_CLASS_RATIOS
        ratios = np.asarray(ratios, dtype=np.float64)
        if ratios.shape != (self.n_classes,) or (ratios < 0).any() or abs(ratios.sum() - 1.0) > 1e-6:
            raise ConfigError(f"infeasible class ratios {tuple(ratios)} for {self.n_classes} classes")
        return ratios / ratios.sum()


def _rank_split(values: np.ndarray, mask: np.ndarray, fraction: float) -> np.ndarray:
    """Boolean map marking the top ``1 - fraction`` share of ``values`` inside ``mask``."""
    idx = np.flatnonzero(mask.ravel())
    out = np.zeros(values.size, dtype=bool)
    if idx.size == 0:
        return out.reshape(values.shape)
    order = idx[np.argsort(values.ravel()[idx], kind="stable")]
    cut = int(round(fraction * idx.size))
    out[order[cut:]] = True
    return out.reshape(values.shape)


def synth_generate(config: SynthConfig | None = None, seed: int = 0, identifier: str | None = None) -> Slide:
    config = SynthConfig() if config is None else config
    ratios = config.class_ratios()
    h, w = config.height, config.width
    rng = np.random.default_rng(seed)
    coarse_field = gaussian_filter(rng.standard_normal((h, w)), config.coarse_sigma, mode="wrap")
    fine_field = gaussian_filter(rng.standard_normal((h, w)), config.fine_sigma, mode="wrap")
    everywhere = np.ones((h, w), dtype=bool)
    if config.n_classes == 4:
        share_a = ratios[0] + ratios[1]
        coarse_b = _rank_split(coarse_field, everywhere, share_a)
        frac_a = ratios[0] / share_a if share_a > 0 else 0.0
        frac_b = ratios[2] / (1.0 - share_a) if share_a < 1 else 0.0
        fine_b = _rank_split(fine_field, ~coarse_b, frac_a) | _rank_split(fine_field, coarse_b, frac_b)
        labels = 2 * coarse_b.astype(np.uint8) + fine_b.astype(np.uint8)
    else:
        coarse_b = _rank_split(coarse_field, everywhere, ratios[0])
        fine_b = _rank_split(fine_field, everywhere, 0.5)
        labels = coarse_b.astype(np.uint8)

    rows, cols = np.mgrid[0:h, 0:w]
    checker = ((rows + cols) % 2) * 2.0 - 1.0
    stripes = (rows % 2) * 2.0 - 1.0
    image = 0.5 + config.texture_amplitude * np.where(fine_b, stripes, checker)

    spacing = config.spot_spacing
    spots = np.zeros((h, w))
    oy, ox = rng.integers(0, spacing, size=2)
    for cy in range(int(oy) - spacing, h + spacing, spacing):
        for cx in range(int(ox) - spacing, w + spacing, spacing):
            jy, jx = rng.integers(-spacing // 6, spacing // 6 + 1, size=2)
            py, px = cy + int(jy), cx + int(jx)
            ry, rx = min(max(py, 0), h - 1), min(max(px, 0), w - 1)
            sign = 1.0 if coarse_b[ry, rx] else -1.0
            disk = (rows - py) ** 2 + (cols - px) ** 2 <= config.spot_radius ** 2
            spots[disk] = sign * config.spot_contrast
    image = image + spots + config.noise * rng.standard_normal((h, w))
    gray = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    if config.color:
        g = gray.astype(np.float64) / 255.0
        rgb = np.stack([0.25 + 0.75 * g, 0.05 + 0.8 * g, 0.3 + 0.7 * g], axis=-1)
        gray = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    return Slide(gray, labels, identifier or f"synth{seed}")


def class_areas(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    valid = labels[labels != IGNORE]
    return np.bincount(valid.ravel(), minlength=n_classes)[:n_classes] / max(valid.size, 1)


# ----------------------------------------------------------------- manifests

def write_manifest(path, entries: Sequence[dict]) -> None:
    """Write ``slide=<image> labels=<labels> split=<train|test>`` lines."""
    lines = [f"slide={e['slide']} labels={e['labels']} split={e['split']}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list:
    """Parse a manifest; relative paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = {}
        for token in line.split():
            key, sep, value = token.partition("=")
            if not sep:
                raise DataError(f"{path}:{lineno}: expected key=value, got {token!r}")
            fields[key] = value
        if set(fields) != {"slide", "labels", "split"}:
            raise DataError(f"{path}:{lineno}: need exactly slide=, labels= and split= fields")
        if fields["split"] not in ("train", "test"):
            raise DataError(f"{path}:{lineno}: split must be train or test, got {fields['split']!r}")
        for key in ("slide", "labels"):
            p = Path(fields[key])
            fields[key] = str(p if p.is_absolute() else base / p)
        entries.append(fields)
    if not entries:
        raise DataError(f"manifest {path} lists no slides")
    return entries


def load_slide(image_path, label_path, identifier: str | None = None) -> Slide:
    for p in (image_path, label_path):
        if not os.path.isfile(p):
            raise DataError(f"slide file not found: {p}")
    ident = identifier or Path(image_path).stem
    return Slide(load_image(image_path), load_labels(label_path), ident)


def save_slide(slide: Slide, image_path, label_path) -> None:
    save_image(image_path, slide.image)
    save_labels(label_path, slide.labels)


def load_manifest_slides(path, split: str | None = None) -> list:
    entries = read_manifest(path)
    return [load_slide(e["slide"], e["labels"]) for e in entries if split is None or e["split"] == split]


def prepare_dataset(train_slides: Sequence[Slide], test_slides: Sequence[Slide], window: int,
                    stride: int | None = None, val_fraction: float = 0.2, seed: int = 0,
                    scales: Sequence[int] = DEFAULT_SCALES) -> DatasetSplit:
    stride = window if stride is None else stride
    pool = [t for s in train_slides for t in extract_triplets(s, window, stride, scales)]
    train, weighting = split_dataset(pool, val_fraction, seed)
    test = [t for s in test_slides for t in extract_triplets(s, window, stride, scales)]
    return DatasetSplit(train, weighting, test, seed)


def dataset_from_manifest(path, window: int, stride: int | None = None, val_fraction: float = 0.2,
                          seed: int = 0, scales: Sequence[int] = DEFAULT_SCALES) -> DatasetSplit:
    entries = read_manifest(path)
    train = [load_slide(e["slide"], e["labels"]) for e in entries if e["split"] == "train"]
    test = [load_slide(e["slide"], e["labels"]) for e in entries if e["split"] == "test"]
    if not train:
        raise DataError(f"manifest {path} has no training slides")
    return prepare_dataset(train, test, window, stride, val_fraction, seed, scales)
