"""Synthetic motion/appearance clips and their on-disk layout.

A dataset directory holds one EVLT archive per clip (entries ``frames``
(L, S, S, 3) in [0, 1] and ``label`` (1,)) plus ``index.tsv`` with a header
row and tab-separated columns ``path  label  frame_count`` (paths relative
to the directory).

Motion classes show a field of identical small sprites that all drift one
way on a torus (leaving one edge, re-entering at the opposite one), so the
sprite positions in any single frame are uniform whatever the direction.
Appearance classes show one large static square or disc in a fixed colour
no motion clip uses.
"""

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import checkpoint as ck
from ..errors import ConfigError, FormatError

CLASS_NAMES = ("up", "down", "left", "right", "square", "circle")
MOTION = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}
APPEARANCE_COLOUR = np.array([0.1, 0.6, 0.9])


@dataclass(eq=False)
class VideoClip:
    frames: np.ndarray     # (L, S, S, 3) float32 in [0, 1]
    label: int

    @property
    def length(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 32
    frames: int = 8
    speed: int = 3              # pixels per frame
    sprite_size: int = 4
    min_sprites: int = 3
    max_sprites: int = 5
    big_size: int = 12
    noise: float = 0.03


def _shape_mask(kind, size):
    yy, xx = np.mgrid[:size, :size] + 0.5 - size / 2
    if kind == "square":
        return np.ones((size, size), bool)
    if kind == "circle":
        return yy ** 2 + xx ** 2 <= (size / 2) ** 2
    if kind == "diamond":
        return np.abs(yy) + np.abs(xx) <= size / 2
    if kind == "plus":
        return (np.abs(yy) < size / 4) | (np.abs(xx) < size / 4)
    raise ValueError(kind)


def _paint(canvas, mask, y, x, colour):
    h, w = mask.shape
    region = canvas[y:y + h, x:x + w]
    region[mask] = colour


def _paint_wrapped(canvas, mask, y, x, colour):
    h, w = mask.shape
    ys = (y + np.arange(h)) % canvas.shape[0]
    xs = (x + np.arange(w)) % canvas.shape[1]
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    canvas[yy[mask], xx[mask]] = colour


def _background(rng, cfg):
    s = cfg.image_size
    base = rng.uniform(0.1, 0.3)
    static = base + cfg.noise * rng.normal(size=(s, s, 1))
    return np.repeat(static, 3, axis=2)


def motion_trajectory(rng, direction, cfg):
    """Uniform start (y, x) and per-frame velocity; positions wrap modulo the image size."""
    dy, dx = MOTION[direction]
    travel = cfg.speed * (cfg.frames - 1)
    if travel > cfg.image_size - cfg.sprite_size:
        raise ConfigError("sprites would wrap onto their own start; lower speed or frames")
    y, x = (int(v) for v in rng.integers(0, cfg.image_size, size=2))
    return y, x, dy * cfg.speed, dx * cfg.speed


def make_clip(rng, label, cfg=SynthConfig(), classes=CLASS_NAMES):
    name = classes[label]
    s, t = cfg.image_size, cfg.frames
    bg = _background(rng, cfg)
    frames = np.repeat(bg[None], t, axis=0)
    if name in MOTION:
        kind = ["square", "circle", "diamond", "plus"][rng.integers(4)]
        mask = _shape_mask(kind, cfg.sprite_size)
        colour = np.array([rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0), rng.uniform(0.0, 0.3)])
        tracks = [motion_trajectory(rng, name, cfg)
                  for _ in range(rng.integers(cfg.min_sprites, cfg.max_sprites + 1))]
        for f in range(t):
            for y, x, vy, vx in tracks:
                _paint_wrapped(frames[f], mask, (y + vy * f) % s, (x + vx * f) % s, colour)
    else:
        mask = _shape_mask(name, cfg.big_size)
        colour = APPEARANCE_COLOUR   # fixed, so area and outline are the only cues
        lim = s - cfg.big_size
        y, x = rng.integers(0, lim + 1, size=2)
        for f in range(t):
            _paint(frames[f], mask, y, x, colour)
    return VideoClip(np.clip(frames, 0.0, 1.0).astype(np.float32), int(label))


def synth_dataset(seed, size, cfg=SynthConfig(), classes=CLASS_NAMES):
    """`size` clips with labels cycling through the classes; clip i depends only on (seed, i)."""
    for c in classes:
        if c not in MOTION and c not in ("square", "circle"):
            raise ConfigError(f"unknown synthetic class {c!r}")
    return [make_clip(np.random.default_rng([seed, i]), i % len(classes), cfg, classes)
            for i in range(size)]


def write_dataset(clips, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, clip in enumerate(clips):
        name = f"clip_{i:05d}.evlt"
        arc = ck.CheckpointArchive()
        arc["frames"] = clip.frames
        arc["label"] = np.array([clip.label], dtype=np.float32)
        ck.save(arc, out / name)
        rows.append((name, clip.label, clip.length))
    with open(out / "index.tsv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("path", "label", "frame_count"))
        w.writerows(rows)
    return out / "index.tsv"


def read_index(data_dir):
    path = Path(data_dir) / "index.tsv"
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header != ["path", "label", "frame_count"]:
            raise FormatError(f"{path}: bad index header {header}")
        rows = []
        for n, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise FormatError(f"{path}:{n}: expected 3 columns, got {len(row)}")
            rows.append((row[0], int(row[1]), int(row[2])))
    return rows


def load_clip(path):
    arc = ck.load(path)
    if "frames" not in arc or "label" not in arc:
        raise FormatError(f"{path}: clip archive needs 'frames' and 'label'")
    return VideoClip(arc["frames"], int(arc["label"][0]))


def load_dataset(data_dir):
    rows = read_index(data_dir)
    if not rows:
        raise ConfigError(f"dataset {data_dir} is empty")
    clips = []
    for rel, label, count in rows:
        clip = load_clip(os.path.join(data_dir, rel))
        if clip.label != label or clip.length != count:
            raise FormatError(f"{rel}: index says label {label}/{count} frames, "
                              f"archive has {clip.label}/{clip.length}")
        clips.append(clip)
    return clips


def random_resized_crop(frames, rng, scale=(0.6, 1.0)):
    """Same crop for every frame, resized back with nearest-neighbour sampling."""
    _, s, _, _ = frames.shape
    side = max(1, int(round(s * np.sqrt(rng.uniform(*scale)))))
    y, x = rng.integers(0, s - side + 1, size=2)
    idx = y + (np.arange(s) * side) // s
    jdx = x + (np.arange(s) * side) // s
    return frames[:, idx][:, :, jdx]


def hflip(frames):
    return frames[:, :, ::-1]
