"""Flat ``key = value`` run configuration.

Grammar, one entry per line::

    line    := blank | comment | entry
    comment := '#' anything
    entry   := key '=' value [ '#' anything ]
    key     := section '.' name | name          (see KEYS below)

Values are ints, floats, booleans (true/false/yes/no/1/0), strings, or
comma-separated int lists. Unknown keys, repeated keys and unparsable values
are errors that name the line. Relative paths resolve against the directory
holding the config file.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path

from .backbone import BackboneConfig
from .decoder import DecoderConfig
from .errors import ConfigError, EVLError
from .pipeline.data import SynthConfig
from .pipeline.sampling import SamplingSpec
from .pipeline.train import TrainConfig
from .temporal import TemporalToggles


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    return tuple(int(p) for p in text.split(",") if p.strip())


def _opt_str(text):
    return text or None


KEYS = {
    "seed": int,
    "backbone.image_size": int, "backbone.patch_size": int, "backbone.depth": int,
    "backbone.width": int, "backbone.heads": int, "backbone.mlp_factor": int,
    "backbone.seed": int, "backbone.weights": _opt_str,
    "backbone.pos_scale": float, "backbone.qk_gain": float,
    "decoder.num_blocks": int, "decoder.feature_layers": _ints, "decoder.heads": int,
    "decoder.mlp_factor": int, "decoder.dropout": float, "decoder.num_classes": int,
    "decoder.reduction": str, "decoder.max_frames": int,
    "decoder.use_conv": _bool, "decoder.use_pos": _bool, "decoder.use_attn": _bool,
    "sampling.scheme": str, "sampling.frames": int, "sampling.stride": int, "sampling.views": int,
    "train.steps": int, "train.batch_size": int, "train.lr": float, "train.weight_decay": float,
    "train.augment": _bool,
    "synth.frames": int, "synth.speed": int, "synth.sprite_size": int,
    "data.train": _opt_str, "data.eval": _opt_str,
}

DEFAULTS = {
    "seed": 0,
    "backbone.image_size": 32, "backbone.patch_size": 4, "backbone.depth": 2, "backbone.width": 32,
    "backbone.heads": 4, "backbone.mlp_factor": 4, "backbone.seed": 0, "backbone.weights": None,
    "backbone.pos_scale": 1.0, "backbone.qk_gain": 1.0,
    "decoder.num_blocks": 2, "decoder.feature_layers": (-2, -1), "decoder.heads": 4,
    "decoder.mlp_factor": 4, "decoder.dropout": 0.5, "decoder.num_classes": 6,
    "decoder.reduction": "none", "decoder.max_frames": 8,
    "decoder.use_conv": True, "decoder.use_pos": True, "decoder.use_attn": True,
    "sampling.scheme": "segment", "sampling.frames": 8, "sampling.stride": 1, "sampling.views": 1,
    "train.steps": 500, "train.batch_size": 16, "train.lr": 4e-4, "train.weight_decay": 0.05,
    "train.augment": False,
    "synth.frames": 8, "synth.speed": 3, "synth.sprite_size": 4,
    "data.train": None, "data.eval": None,
}


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig
    decoder: DecoderConfig
    eval_sampling: SamplingSpec
    train: TrainConfig
    synth: SynthConfig
    seed: int = 0
    backbone_seed: int = 0
    backbone_weights: str = None
    backbone_init: dict = field(default_factory=dict)   # stand-in knobs for Backbone.random
    train_data: str = None
    eval_data: str = None
    values: dict = field(default_factory=dict, compare=False, repr=False)

    def with_seed(self, seed):
        return replace(self, seed=seed, train=replace(self.train, seed=seed))


def parse_text(text, source="<config>"):
    """Raw {key: parsed value} with line-numbered diagnostics."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{n}: key {key!r} given twice")
        try:
            out[key] = KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{n}: bad value for {key}: {exc}") from None
    return out


def build(values, base_dir=None):
    v = dict(DEFAULTS)
    v.update(values)

    def path(key):
        p = v[key]
        if p is None or base_dir is None:
            return p
        return str((Path(base_dir) / p).resolve()) if not Path(p).is_absolute() else p

    try:
        bb = BackboneConfig(image_size=v["backbone.image_size"], patch_size=v["backbone.patch_size"],
                            depth=v["backbone.depth"], width=v["backbone.width"],
                            heads=v["backbone.heads"], mlp_factor=v["backbone.mlp_factor"])
        toggles = TemporalToggles(v["decoder.use_conv"], v["decoder.use_pos"], v["decoder.use_attn"])
        for layer in v["decoder.feature_layers"]:
            bb.resolve_layer(layer)
        dec = DecoderConfig(num_blocks=v["decoder.num_blocks"],
                            feature_layers=v["decoder.feature_layers"], width=bb.width,
                            heads=v["decoder.heads"], mlp_factor=v["decoder.mlp_factor"],
                            dropout=v["decoder.dropout"], num_classes=v["decoder.num_classes"],
                            reduction=v["decoder.reduction"], toggles=toggles,
                            max_frames=v["decoder.max_frames"], grid=(bb.grid, bb.grid))
        if v["sampling.frames"] > dec.max_frames:
            raise ConfigError(f"sampling.frames {v['sampling.frames']} exceeds decoder.max_frames")
        scheme = dict(scheme=v["sampling.scheme"], frames=v["sampling.frames"],
                      stride=v["sampling.stride"])
        eval_spec = SamplingSpec(**scheme, views=v["sampling.views"], mode="eval")
        train_cfg = TrainConfig(steps=v["train.steps"], batch_size=v["train.batch_size"],
                                lr=v["train.lr"], weight_decay=v["train.weight_decay"],
                                seed=v["seed"], sampling=SamplingSpec(**scheme, mode="train"),
                                augment=v["train.augment"])
        if train_cfg.steps < 0 or train_cfg.batch_size < 1 or train_cfg.lr <= 0:
            raise ConfigError("train.steps must be >= 0, batch_size >= 1 and lr > 0")
        synth = SynthConfig(image_size=bb.image_size, frames=v["synth.frames"],
                            speed=v["synth.speed"], sprite_size=v["synth.sprite_size"])
    except ConfigError:
        raise
    except EVLError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return RunConfig(bb, dec, eval_spec, train_cfg, synth, seed=v["seed"],
                     backbone_seed=v["backbone.seed"], backbone_weights=path("backbone.weights"),
                     backbone_init={"pos_scale": v["backbone.pos_scale"], "qk_gain": v["backbone.qk_gain"]},
                     train_data=path("data.train"), eval_data=path("data.eval"), values=v)


def load_config(path):
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror or exc}") from None
    return build(parse_text(text, str(p)), base_dir=p.parent)


def dump(values):
    """Render {key: value} back into the config grammar (defaults filled in)."""
    v = dict(DEFAULTS)
    v.update(values)
    lines = []
    for key in KEYS:
        val = v[key]
        if val is None:
            continue
        if isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, tuple):
            val = ",".join(str(x) for x in val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
