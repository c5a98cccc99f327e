"""Run configuration: a line-oriented ``key = value`` file with dotted section keys.

Precedence, lowest to highest: schema defaults, config file, command-line flags.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .exceptions import ConfigError
from .pyramid import SynthConfig
from .trainer import TrainConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text: str) -> tuple:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _float_tuple_or_none(text: str):
    text = text.strip()
    if text.lower() in ("", "none", "default"):
        return None
    return tuple(float(p) for p in text.split(","))


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    parse.__name__ = "|".join(options)
    return parse


def _str(text: str) -> str:
    return text.strip()


def parse_palette(text: str) -> dict | None:
    """``"0:0,255,0; 1:255,255,0"`` -> {0: (0, 255, 0), 1: (255, 255, 0)}; empty means default."""
    text = text.strip()
    if not text:
        return None
    palette = {}
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        label, sep, rgb = item.partition(":")
        if not sep:
            raise ValueError(f"palette entry {item!r} must look like label:r,g,b")
        values = tuple(int(v) for v in rgb.split(","))
        if len(values) != 3 or not all(0 <= v <= 255 for v in values):
            raise ValueError(f"palette colour {rgb!r} must be three values in 0..255")
        palette[int(label)] = values
    return palette


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: str
    help: str


_TRAIN_HELP = {
    "lr": "Nadam learning rate",
    "batch_size": "patches per optimisation step",
    "max_epochs": "cap on alternating (weighting + end-to-end) epochs",
    "pretrain_epochs": "cap on per-expert pre-training epochs",
    "patience": "epochs without validation improvement before stopping",
    "tol": "minimum validation-loss improvement that resets patience",
    "window": "target window W in pixels (multiple of 8)",
    "n_classes": "number of classes M",
    "in_channels": "image channels (1 grey, 3 colour)",
    "interpolation": "expert heat-map upsampling: nearest | bilinear",
    "weighting": "adaptive (weighting network) | fixed (all weights 1)",
    "augment": "random horizontal/vertical flips during training",
    "expert_widths": "expert U-net encoder widths, comma separated",
    "weighting_widths": "weighting-network stage widths, comma separated",
    "aggregator_width": "aggregating-network hidden width",
    "eval_batch_size": "patches per inference batch",
}

SCHEMA: dict[str, Key] = {}


def _add(name, parse, default, text):
    SCHEMA[name] = Key(name, parse, str(default), text)


_add("run.mode", _choice("four-class", "two-class", "cascade"), "four-class",
     "which model the command works with; cascade segments with a two-class model first")
_add("run.out", _str, "runs", "output directory")
_add("run.seed", int, 0, "seed for data generation, splitting and initialisation")
_add("run.threads", int, 1, "patch-parallel inference threads")
_add("run.palette", _str, "", "label colours as 'label:r,g,b; ...' (empty = built-in palette)")
_add("run.variant", _choice("expert1", "expert2", "expert3", "fixed", "adaptive"), "adaptive",
     "model variant used by segment")
_add("run.subtype_offset", int, 1, "cascade: subtype label k is written as k + offset")

_add("data.manifest", _str, "data/manifest.txt", "slide manifest (relative to the working directory)")
_add("data.stride", int, 0, "patch stride in pixels (0 = window, i.e. non-overlapping)")
_add("data.val_fraction", float, 0.2, "share of training patches held out to train the weighting net")

_synth = SynthConfig()
_add("synth.n_train", int, 12, "synthetic training slides")
_add("synth.n_test", int, 4, "synthetic test slides")
_add("synth.n_classes", int, _synth.n_classes, "synthetic label classes: 2 | 4")
_add("synth.height", int, _synth.height, "slide height in pixels")
_add("synth.width", int, _synth.width, "slide width in pixels")
_add("synth.ratios", _float_tuple_or_none, "default", "class area ratios, comma separated (default = built-in)")
_add("synth.coarse_sigma", float, _synth.coarse_sigma, "smoothing of the coarse region field")
_add("synth.fine_sigma", float, _synth.fine_sigma, "smoothing of the fine region field")
_add("synth.texture_amplitude", float, _synth.texture_amplitude, "fine texture amplitude")
_add("synth.noise", float, _synth.noise, "additive pixel noise")
_add("synth.spot_spacing", int, _synth.spot_spacing, "lattice spacing of the layout spots")
_add("synth.spot_radius", float, _synth.spot_radius, "layout spot radius")
_add("synth.spot_contrast", float, _synth.spot_contrast, "layout spot contrast")
_add("synth.color", _bool, _synth.color, "write colour (P6) slides instead of grey")

_train = TrainConfig()
_TRAIN_PARSERS = {
    "interpolation": _choice("nearest", "bilinear"),
    "weighting": _choice("adaptive", "fixed"),
    "augment": _bool,
    "expert_widths": _int_tuple,
    "weighting_widths": _int_tuple,
}
for _name, _text in _TRAIN_HELP.items():
    _value = getattr(_train, _name)
    if isinstance(_value, tuple):
        _value = ",".join(str(v) for v in _value)
    parse = _TRAIN_PARSERS.get(_name, type(getattr(_train, _name)))
    _add(f"train.{_name}", parse, _value, _text)


def parse_lines(text: str, source: str = "<config>") -> dict:
    """Raw ``{key: value-string}`` from config text; later duplicates win."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        raw[key] = value.strip()
    return raw


class RunConfig:
    """Validated settings; attribute access uses the dotted key, e.g. ``cfg["train.lr"]``."""

    def __init__(self, values: dict):
        self.values = values

    @classmethod
    def from_sources(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        raw = {k: key.default for k, key in SCHEMA.items()}
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            raw.update(parse_lines(p.read_text(encoding="utf-8"), str(p)))
        for key, value in (overrides or {}).items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            if value is not None:
                raw[key] = str(value)
        values = {}
        for key, text in raw.items():
            try:
                values[key] = SCHEMA[key].parse(text)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc
        try:
            parse_palette(values["run.palette"])
        except ValueError as exc:
            raise ConfigError(f"bad value for run.palette: {exc}") from exc
        return cls(values)

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def palette(self) -> dict | None:
        return parse_palette(self.values["run.palette"])

    @property
    def out(self) -> Path:
        return Path(self.values["run.out"])

    def train_config(self) -> TrainConfig:
        kwargs = {name: self.values[f"train.{name}"] for name in _TRAIN_HELP}
        return TrainConfig(seed=self.values["run.seed"], threads=self.values["run.threads"], **kwargs)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            n_classes=self.values["synth.n_classes"],
            height=self.values["synth.height"],
            width=self.values["synth.width"],
            ratios=self.values["synth.ratios"],
            coarse_sigma=self.values["synth.coarse_sigma"],
            fine_sigma=self.values["synth.fine_sigma"],
            texture_amplitude=self.values["synth.texture_amplitude"],
            noise=self.values["synth.noise"],
            spot_spacing=self.values["synth.spot_spacing"],
            spot_radius=self.values["synth.spot_radius"],
            spot_contrast=self.values["synth.spot_contrast"],
            color=self.values["synth.color"],
        )

    @property
    def stride(self) -> int:
        return self.values["data.stride"] or self.values["train.window"]


def describe_keys() -> str:
    """Every key with its default, for ``--help``."""
    width = max(len(k) for k in SCHEMA)
    lines = ["config keys (key = default  description):"]
    for key in SCHEMA.values():
        lines.append(f"  {key.name:<{width}} = {key.default:<18} {key.help}")
    return "\n".join(lines)
