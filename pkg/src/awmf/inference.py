"""Batched prediction with a trained :class:`~awmf.networks.ModelBundle`."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from .exceptions import ConfigError
from .metrics import AgreementTable, ConfusionMatrix, agreement, confusion, stitch_masks
from .networks import ModelBundle, aggregate_forward, crop_and_upsample
from .pyramid import Slide, extract_triplets, stack_triplets
from .tensor import Tensor

VARIANTS = ("expert1", "expert2", "expert3", "fixed", "adaptive")


def available_variants(bundle: ModelBundle) -> tuple:
    """Variants whose networks have been trained (batch-norm statistics exist)."""
    def ready(net):
        return all(n.state.initialized for n in net.norms())

    out = ["expert1", "expert2", "expert3"]
    if ready(bundle.aggregator):
        out.append("fixed")
        if ready(bundle.weighting):
            out.append("adaptive")
    return tuple(out)


def _chunks(n: int, size: int):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def _fan_out(fn, spans, threads: int):
    if threads <= 1 or len(spans) <= 1:
        return [fn(s) for s in spans]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, spans))


def predict_weights(bundle: ModelBundle, x2: np.ndarray, batch_size: int = 64, threads: int = 1) -> np.ndarray:
    """Weighting-network outputs (N, 3) in eval mode; no gradients are recorded."""
    def _run(span):
        a, b = span
        return bundle.weighting.forward(x2[a:b], "eval").data

    return np.concatenate(_fan_out(_run, _chunks(len(x2), batch_size), threads))


def expert_maps(bundle: ModelBundle, xs: Sequence[np.ndarray], batch_size: int = 64, threads: int = 1) -> list:
    """Full-frame expert heat maps, one (N, M, W, W) array per magnification."""
    out = []
    for expert, x in zip(bundle.experts, xs):
        def _run(span, expert=expert, x=x):
            a, b = span
            return expert.forward(x[a:b], "eval").data

        out.append(np.concatenate(_fan_out(_run, _chunks(len(x), batch_size), threads)))
    return out


def predict_all(bundle: ModelBundle, triplets: Sequence, interpolation: str = "bilinear",
                batch_size: int = 64, threads: int = 1, variants: Sequence[str] = VARIANTS,
                return_maps: bool = False) -> dict:
    """Target-frame class probabilities for each requested variant.

    ``expert<k>`` is expert k's heat map cropped to the target region,
    ``fixed`` aggregates with weights (1, 1, 1) and ``adaptive`` with the
    weighting network's outputs. The key ``weights`` holds those outputs and,
    with ``return_maps``, ``maps`` holds the full-frame expert heat maps.
    """
    missing = [v for v in variants if v not in available_variants(bundle)]
    if missing:
        raise ConfigError(f"variant(s) {missing} need networks this model has not trained yet")
    xs, _ = stack_triplets(triplets)
    maps = expert_maps(bundle, xs, batch_size, threads)
    aligned = [crop_and_upsample(m, k + 1, interpolation, bundle.scales) for k, m in enumerate(maps)]
    aligned = [a.data if isinstance(a, Tensor) else a for a in aligned]
    result = {}
    for k in range(3):
        if f"expert{k + 1}" in variants:
            result[f"expert{k + 1}"] = aligned[k]
    need_w = "adaptive" in variants
    weights = predict_weights(bundle, xs[1], batch_size, threads) if need_w else None
    for name in ("fixed", "adaptive"):
        if name not in variants:
            continue
        w = np.ones((len(triplets), 3)) if name == "fixed" else weights

        def _run(span, w=w):
            a, b = span
            return aggregate_forward(bundle.aggregator, [m[a:b] for m in aligned], w[a:b], "eval").data

        result[name] = np.concatenate(_fan_out(_run, _chunks(len(triplets), batch_size), threads))
    if weights is not None:
        result["weights"] = weights
    if return_maps:
        result["maps"] = maps
    return result


def predict_proba(bundle: ModelBundle, triplets: Sequence, variant: str = "adaptive",
                  interpolation: str = "bilinear", batch_size: int = 64, threads: int = 1) -> np.ndarray:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    return predict_all(bundle, triplets, interpolation, batch_size, threads, (variant,))[variant]


def labels_from_proba(proba: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest class index."""
    return np.argmax(proba, axis=1).astype(np.uint8)


def evaluate(bundle: ModelBundle, triplets: Sequence, interpolation: str = "bilinear",
             batch_size: int = 64, threads: int = 1, variants: Sequence[str] | None = None) -> dict:
    """Confusion matrix per variant (default: every available one) against the target-region labels."""
    variants = available_variants(bundle) if variants is None else variants
    probs = predict_all(bundle, triplets, interpolation, batch_size, threads, variants)
    gt = np.stack([t.t[0] for t in triplets])
    return {v: confusion(labels_from_proba(probs[v]), gt, bundle.n_classes) for v in variants}


def segment_slide(bundle: ModelBundle, slide: Slide, variant: str = "adaptive",
                  interpolation: str | None = None, batch_size: int = 64, threads: int = 1) -> np.ndarray:
    """Whole-slide label map from non-overlapping target windows."""
    interpolation = interpolation or bundle.meta.get("interpolation", "bilinear")
    triplets = extract_triplets(slide, bundle.window, bundle.window, bundle.scales)
    labels = labels_from_proba(predict_proba(bundle, triplets, variant, interpolation, batch_size, threads))
    return stitch_masks([(t.origin, lab) for t, lab in zip(triplets, labels)], slide.shape)


def empty_matrices(n_classes: int, variants: Sequence[str] = VARIANTS) -> dict:
    return {v: ConfusionMatrix.empty(n_classes) for v in variants}


def expert_agreement(bundle: ModelBundle, triplets: Sequence, interpolation: str | None = None,
                     batch_size: int = 64, threads: int = 1) -> AgreementTable:
    """Which experts label each target pixel correctly, from their target-aligned heat maps."""
    interpolation = interpolation or bundle.meta.get("interpolation", "bilinear")
    names = ("expert1", "expert2", "expert3")
    probs = predict_all(bundle, triplets, interpolation, batch_size, threads, names)
    gt = np.stack([t.t[0] for t in triplets])
    return agreement([labels_from_proba(probs[n]) for n in names], gt, bundle.n_classes)
