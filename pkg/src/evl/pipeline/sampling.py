"""Frame index selection for strided windows and per-segment sampling."""

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ParameterError


@dataclass(frozen=True)
class SamplingSpec:
    scheme: str = "segment"      # "strided" or "segment"
    frames: int = 8
    stride: int = 1
    views: int = 1
    mode: str = "eval"           # "train" or "eval"

    def __post_init__(self):
        if self.scheme not in ("strided", "segment"):
            raise ConfigError(f"unknown sampling scheme {self.scheme!r}")
        if self.mode not in ("train", "eval"):
            raise ConfigError(f"sampling mode must be train or eval, got {self.mode!r}")
        if self.frames < 1 or self.views < 1 or self.stride < 1:
            raise ConfigError("frames, views and stride must be at least 1")


def _segment(length, spec, rng):
    t = spec.frames
    seg = length / t
    out = []
    for v in range(spec.views):
        if spec.mode == "train":
            lo = np.floor(seg * np.arange(t)).astype(np.int64)
            hi = np.maximum(lo + 1, np.floor(seg * np.arange(1, t + 1)).astype(np.int64))
            idx = rng.integers(lo, hi)
        else:
            # view v takes the (v + 1/2)/V point of every segment; V=1 is the centre
            idx = np.floor(seg * (np.arange(t) + (v + 0.5) / spec.views)).astype(np.int64)
        out.append(np.minimum(idx, length - 1))
    return out


def _strided(length, spec, rng):
    extent = spec.frames * spec.stride
    slack = max(0, length - extent)
    if spec.mode == "train":
        starts = rng.integers(0, slack + 1, size=spec.views)
    else:
        starts = np.round(np.linspace(0, slack, spec.views)).astype(np.int64)
    offs = spec.stride * np.arange(spec.frames)
    return [np.minimum(s + offs, length - 1) for s in starts]


def sample_frames(length, spec, rng=None):
    """Per-view lists of frame indices in [0, length)."""
    if length < 1:
        raise ParameterError(f"video length must be at least 1, got {length}")
    if spec.mode == "train" and rng is None:
        raise ParameterError("train-mode sampling needs an rng")
    fn = _segment if spec.scheme == "segment" else _strided
    return [idx.tolist() for idx in fn(int(length), spec, rng)]
