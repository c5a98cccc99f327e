"""Expert, weighting and aggregating networks plus their composition.

All networks consume NCHW batches. Experts see their own magnification's
full field of view; :func:`crop_and_upsample` then maps each expert heat map
onto the target region before aggregation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, ShapeError
from .tensor import (
    BatchNormState,
    Parameter,
    Tensor,
    batch_norm,
    concat_channels,
    conv2d,
    elu,
    fully_connected,
    global_avg_pool,
    max_pool2d,
    scale_by_scalar,
    sigmoid,
    softmax_channels,
    upsample,
)

DEFAULT_SCALES = (1, 2, 4)


class Conv:
    """Convolution layer with He (fan-in) normal initialisation."""

    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator, size: int = 3,
                 zero: bool = False):
        std = math.sqrt(2.0 / (cin * size * size))
        kernel = np.zeros((cout, cin, size, size)) if zero else rng.normal(0.0, std, (cout, cin, size, size))
        self.kernel = Parameter(kernel, f"{name}.kernel")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias")

    def __call__(self, x):
        return conv2d(x, self.kernel, self.bias, stride=1, padding="same")

    def parameters(self) -> list[Parameter]:
        return [self.kernel, self.bias]


class Norm:
    def __init__(self, name: str, channels: int):
        self.name = name
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), f"{name}.beta")
        self.state = BatchNormState(channels)

    def __call__(self, x, mode: str):
        return batch_norm(x, self.gamma, self.beta, self.state, mode)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]


class ConvNormELU:
    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator):
        self.conv = Conv(f"{name}.conv", cin, cout, rng)
        self.norm = Norm(f"{name}.bn", cout)

    def __call__(self, x, mode: str):
        return elu(self.norm(self.conv(x), mode))

    def parameters(self) -> list[Parameter]:
        return self.conv.parameters() + self.norm.parameters()

    def norms(self) -> list[Norm]:
        return [self.norm]


class _Network:
    layers: list

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def norms(self) -> list[Norm]:
        return [n for layer in self.layers if hasattr(layer, "norms") for n in layer.norms()]

    def _check_input(self, x, channels: int, window: int) -> np.ndarray:
        xd = x.data if isinstance(x, Tensor) else np.asarray(x)
        if xd.ndim != 4 or xd.shape[1] != channels or xd.shape[2:] != (window, window):
            raise ShapeError(
                f"{self.name} expects input of shape (N, {channels}, {window}, {window}), got {xd.shape}"
            )
        return xd


class ExpertNet(_Network):
    """U-net segmenting one magnification into an ``n_classes`` heat map.

    Encoder stage ``s`` is two conv-norm-ELU blocks followed by 2x2 max
    pooling (none after the deepest stage); the decoder mirrors it with
    nearest x2 upsampling and skip concatenation, then a 1x1 head and softmax.
    """

    def __init__(self, index: int, in_channels: int, n_classes: int, window: int,
                 widths: Sequence[int] = (16, 32, 64), rng: np.random.Generator | None = None,
                 zero_final: bool = False):
        rng = np.random.default_rng(0) if rng is None else rng
        if window % (2 ** (len(widths) - 1)):
            raise ConfigError(f"window {window} not divisible by 2**{len(widths) - 1} for expert widths {widths}")
        self.index = index
        self.name = f"expert{index}"
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.window = window
        self.widths = tuple(widths)
        self.encoder = []
        cin = in_channels
        for s, w in enumerate(widths):
            self.encoder.append(_DoubleBlock(f"{self.name}.enc{s}", cin, w, rng))
            cin = w
        self.decoder = []
        for s in reversed(range(len(widths) - 1)):
            self.decoder.append(_DoubleBlock(f"{self.name}.dec{s}", widths[s + 1] + widths[s], widths[s], rng))
        self.head = Conv(f"{self.name}.head", widths[0], n_classes, rng, size=1, zero=zero_final)
        self.layers = self.encoder + self.decoder + [self.head]

    def forward(self, x, mode: str = "train") -> Tensor:
        self._check_input(x, self.in_channels, self.window)
        skips = []
        h = x
        last = len(self.encoder) - 1
        for s, block in enumerate(self.encoder):
            h = block(h, mode)
            if s < last:
                skips.append(h)
                h = max_pool2d(h, 2, 2)
        for block, skip in zip(self.decoder, reversed(skips)):
            h = upsample(h, 2, "nearest")
            h = block(concat_channels([h, skip]), mode)
        return softmax_channels(self.head(h))

    __call__ = forward


class _DoubleBlock:
    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator):
        self.first = ConvNormELU(f"{name}.0", cin, cout, rng)
        self.second = ConvNormELU(f"{name}.1", cout, cout, rng)

    def __call__(self, x, mode: str):
        return self.second(self.first(x, mode), mode)

    def parameters(self) -> list[Parameter]:
        return self.first.parameters() + self.second.parameters()

    def norms(self) -> list[Norm]:
        return [self.first.norm, self.second.norm]


class WeightingNet(_Network):
    """Small classifier emitting one independent sigmoid weight per expert."""

    def __init__(self, in_channels: int, window: int, widths: Sequence[int] = (8, 16, 32, 64),
                 n_experts: int = 3, rng: np.random.Generator | None = None, zero_final: bool = False):
        rng = np.random.default_rng(0) if rng is None else rng
        if window % (2 ** len(widths)):
            raise ConfigError(f"window {window} not divisible by 2**{len(widths)} for weighting widths {widths}")
        self.name = "weighting"
        self.in_channels = in_channels
        self.window = window
        self.widths = tuple(widths)
        self.blocks = []
        cin = in_channels
        for s, w in enumerate(widths):
            self.blocks.append(ConvNormELU(f"weighting.block{s}", cin, w, rng))
            cin = w
        std = math.sqrt(1.0 / cin)
        weight = np.zeros((n_experts, cin)) if zero_final else rng.normal(0.0, std, (n_experts, cin))
        self.fc_weight = Parameter(weight, "weighting.fc.weight")
        self.fc_bias = Parameter(np.zeros(n_experts), "weighting.fc.bias")
        self.layers = self.blocks

    def parameters(self) -> list[Parameter]:
        return super().parameters() + [self.fc_weight, self.fc_bias]

    def forward(self, x, mode: str = "train") -> Tensor:
        self._check_input(x, self.in_channels, self.window)
        h = x
        for block in self.blocks:
            h = max_pool2d(block(h, mode), 2, 2)
        return sigmoid(fully_connected(global_avg_pool(h), self.fc_weight, self.fc_bias))

    __call__ = forward


class AggregatingNet(_Network):
    """Five 3x3 convolutions fusing the weighted expert maps; softmax output."""

    def __init__(self, n_classes: int, n_experts: int = 3, width: int = 16, n_layers: int = 5,
                 rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.name = "aggregator"
        self.n_classes = n_classes
        self.n_experts = n_experts
        self.width = width
        self.blocks = []
        cin = n_experts * n_classes
        for s in range(n_layers - 1):
            self.blocks.append(ConvNormELU(f"aggregator.block{s}", cin, width, rng))
            cin = width
        self.head = Conv("aggregator.head", cin, n_classes, rng)
        self.layers = self.blocks + [self.head]

    def forward(self, x, mode: str = "train") -> Tensor:
        xd = x.data if isinstance(x, Tensor) else np.asarray(x)
        if xd.ndim != 4 or xd.shape[1] != self.n_experts * self.n_classes:
            raise ShapeError(f"aggregator expects {self.n_experts * self.n_classes} channels, got shape {xd.shape}")
        h = x
        for block in self.blocks:
            h = block(h, mode)
        return softmax_channels(self.head(h))

    __call__ = forward


def expert_forward(net: ExpertNet, x, mode: str = "train") -> Tensor:
    return net.forward(x, mode)


def weighting_forward(net: WeightingNet, x2, mode: str = "train") -> Tensor:
    return net.forward(x2, mode)


def crop_and_upsample(heatmap, k: int, mode: str = "bilinear", scales: Sequence[int] = DEFAULT_SCALES):
    """Crop expert ``k``'s target region out of its full-frame map and resize to W x W.

    Expert ``k`` (1-based) covers ``scales[k-1]`` times the target's extent,
    so the target region is the central ``W / scale`` square.
    """
    if k < 1 or k > len(scales):
        raise ValueError(f"expert index must be in 1..{len(scales)}, got {k}")
    f = scales[k - 1]
    if f == 1:
        return heatmap
    w = heatmap.shape[-1]
    crop = w // f
    if crop * f != w or (w - crop) % 2:
        raise ConfigError(f"window {w} cannot be centre-cropped by scale factor {f}")
    start = (w - crop) // 2
    return upsample(heatmap[:, :, start:start + crop, start:start + crop], f, mode)


def aggregate_forward(net: AggregatingNet, aligned: Sequence, w, mode: str = "train") -> Tensor:
    """Scale each aligned expert map by its weight, concatenate, run ``net``.

    ``w`` is a length-3 vector (shared by the batch) or an (N, 3) array/Tensor.
    """
    wd = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=float)
    if wd.shape[-1] != len(aligned) or wd.ndim > 2:
        raise ShapeError(f"need one weight per expert ({len(aligned)}), got weight shape {wd.shape}")
    n = aligned[0].shape[0]
    if wd.ndim == 1:
        if isinstance(w, Tensor):
            w = w.reshape(1, -1) if n == 1 else w
        wd = np.broadcast_to(wd, (n, wd.shape[0]))
    if not isinstance(w, Tensor):
        w = wd
    if isinstance(w, Tensor) and w.ndim == 1:
        raise ShapeError("a shared weight Tensor needs batch size 1; pass an (N, 3) Tensor instead")
    scaled = [scale_by_scalar(a, w[:, k]) for k, a in enumerate(aligned)]
    return net.forward(concat_channels(scaled), mode)


@dataclass
class ModelBundle:
    """The five networks of one model plus geometry and training metadata."""

    experts: list
    weighting: WeightingNet
    aggregator: AggregatingNet
    n_classes: int
    window: int
    in_channels: int = 1
    scales: tuple = DEFAULT_SCALES
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, n_classes: int, window: int, in_channels: int = 1,
              expert_widths: Sequence[int] = (16, 32, 64),
              weighting_widths: Sequence[int] = (8, 16, 32, 64), aggregator_width: int = 16,
              scales: Sequence[int] = DEFAULT_SCALES, seed: int = 0, zero_final: bool = False) -> "ModelBundle":
        scales = tuple(int(s) for s in scales)
        if len(scales) != 3 or scales[0] != 1:
            raise ConfigError(f"scales must be three factors starting at 1, got {scales}")
        if n_classes < 2:
            raise ConfigError(f"need at least two classes, got {n_classes}")
        if window % 4:
            raise ConfigError(f"window {window} must be divisible by 4")
        for f in scales:
            if window % f or ((window - window // f) % 2) or ((f - 1) * window // 2) % f:
                raise ConfigError(f"window {window} cannot be registered concentrically at scale {f}")
        rng = np.random.default_rng(seed)
        experts = [ExpertNet(k + 1, in_channels, n_classes, window, expert_widths, rng, zero_final)
                   for k in range(3)]
        weighting = WeightingNet(in_channels, window, weighting_widths, 3, rng, zero_final)
        aggregator = AggregatingNet(n_classes, 3, aggregator_width, 5, rng)
        meta = {"seed": int(seed), "epoch": 0}
        bundle = cls(experts, weighting, aggregator, n_classes, window, in_channels, scales, meta)
        bundle._check_names()
        return bundle

    @property
    def arch(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "expert_widths": list(self.experts[0].widths),
            "weighting_widths": list(self.weighting.widths),
            "aggregator_width": self.aggregator.width,
        }

    def expert_parameters(self) -> list[Parameter]:
        return [p for e in self.experts for p in e.parameters()]

    def parameters(self) -> list[Parameter]:
        return self.expert_parameters() + self.weighting.parameters() + self.aggregator.parameters()

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def norms(self) -> list[Norm]:
        out = [n for e in self.experts for n in e.norms()]
        return out + self.weighting.norms() + self.aggregator.norms()

    def _check_names(self) -> None:
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names in model bundle")

    def copy(self) -> "ModelBundle":
        import copy

        return copy.deepcopy(self)


def integrated_forward(bundle: ModelBundle, xs: Sequence, w, mode: str = "train",
                       interpolation: str = "bilinear"):
    """Run the three experts and the aggregator on a batch of triplets.

    ``xs`` holds the three magnification batches (each N x C x W x W).
    Returns ``(Y, [Y1, Y2, Y3])`` with the expert maps in their own
    full-frame coordinates, as needed by the per-expert losses.
    """
    if len(xs) != 3:
        raise ShapeError(f"need three magnification batches, got {len(xs)}")
    expert_maps = [e.forward(x, mode) for e, x in zip(bundle.experts, xs)]
    aligned = [crop_and_upsample(y, k + 1, interpolation, bundle.scales) for k, y in enumerate(expert_maps)]
    y = aggregate_forward(bundle.aggregator, aligned, w, mode)
    return y, expert_maps
