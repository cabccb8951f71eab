"""Frozen pre-norm ViT image encoder producing multi-layer frame features.

The encoder never takes part in autodiff: weights are frozen `Parameter`s and
the forward pass is plain numpy (float64 internally, float32 outputs).

Weight manifest (C = width, P = patch_size, G = image_size // patch_size,
blocks numbered 0..depth-1)::

    backbone.patch_embed.weight          (3*P*P, C)   rows ordered (py, px, rgb)
    backbone.class_embedding             (C,)
    backbone.positional_embedding        (1 + G*G, C) row 0 is the CLS slot
    backbone.ln_pre.{weight,bias}        (C,)
    backbone.blocks.{i}.ln_1.{weight,bias}
    backbone.blocks.{i}.attn.{q,k,v,out}_proj.weight   (C, C)  applied as x @ W
    backbone.blocks.{i}.attn.{q,k,v,out}_proj.bias     (C,)
    backbone.blocks.{i}.ln_2.{weight,bias}
    backbone.blocks.{i}.mlp.fc.weight    (C, alpha*C)   mlp.fc.bias (alpha*C,)
    backbone.blocks.{i}.mlp.proj.weight  (alpha*C, C)   mlp.proj.bias (C,)

Layer n (1-based, or negative counting from the end) is the residual stream
after block n; its q/k projections are the ones block n computes from
ln_1 of its input, restricted to the spatial tokens.
"""

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .checkpoint import CheckpointArchive
from .errors import ManifestError, ParameterError, RangeError, ShapeError
from .tensor import Parameter, make_rng

PREFIX = "backbone."


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 8
    depth: int = 2
    width: int = 32
    heads: int = 4
    mlp_factor: int = 4

    def __post_init__(self):
        for f in ("image_size", "patch_size", "depth", "width", "heads", "mlp_factor"):
            if getattr(self, f) < 1:
                raise ParameterError(f"backbone {f} must be positive")
        if self.image_size % self.patch_size:
            raise ParameterError("image_size must be divisible by patch_size")
        if self.width % self.heads:
            raise ParameterError("width must be divisible by heads")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    def resolve_layer(self, layer):
        """Map a 1-based or negative layer index to 1..depth."""
        n = self.depth
        if 1 <= layer <= n:
            return layer
        if -n <= layer <= -1:
            return n + 1 + layer
        raise RangeError(f"layer index {layer} outside [-{n}, -1] U [1, {n}]")


def manifest(cfg):
    c, p, g = cfg.width, cfg.patch_size, cfg.grid
    hid = cfg.mlp_factor * c
    m = OrderedDict()
    m[PREFIX + "patch_embed.weight"] = (3 * p * p, c)
    m[PREFIX + "class_embedding"] = (c,)
    m[PREFIX + "positional_embedding"] = (1 + g * g, c)
    m[PREFIX + "ln_pre.weight"] = (c,)
    m[PREFIX + "ln_pre.bias"] = (c,)
    for i in range(cfg.depth):
        b = f"{PREFIX}blocks.{i}."
        m[b + "ln_1.weight"] = (c,)
        m[b + "ln_1.bias"] = (c,)
        for proj in ("q", "k", "v", "out"):
            m[f"{b}attn.{proj}_proj.weight"] = (c, c)
            m[f"{b}attn.{proj}_proj.bias"] = (c,)
        m[b + "ln_2.weight"] = (c,)
        m[b + "ln_2.bias"] = (c,)
        m[b + "mlp.fc.weight"] = (c, hid)
        m[b + "mlp.fc.bias"] = (hid,)
        m[b + "mlp.proj.weight"] = (hid, c)
        m[b + "mlp.proj.bias"] = (c,)
    return m


@dataclass
class FrameFeatures:
    x: np.ndarray      # (H, W, C) spatial tokens after the block
    q: np.ndarray      # (H*W, C) query projection inside the block
    k: np.ndarray      # (H*W, C) key projection inside the block
    cls: np.ndarray    # (C,)


@dataclass
class FeatureVolume:
    x: np.ndarray      # (T, H, W, C)
    q: np.ndarray      # (T, H*W, C)
    k: np.ndarray      # (T, H*W, C)
    cls: np.ndarray    # (T, C)
    heads: int

    @property
    def num_frames(self):
        return self.x.shape[0]

    def select(self, indices):
        """Frames `indices` in the given order."""
        idx = np.asarray(indices)
        return FeatureVolume(self.x[idx], self.q[idx], self.k[idx], self.cls[idx], self.heads)


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x * x * x)))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def patchify(images, patch):
    """(B, S, S, 3) -> (B, G*G, P*P*3) in row-major patch order."""
    b, s, _, ch = images.shape
    g = s // patch
    x = images.reshape(b, g, patch, g, patch, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch * patch * ch)


class Backbone:
    def __init__(self, cfg, archive=None):
        self.cfg = cfg
        self.params = OrderedDict()
        self._w64 = None
        if archive is not None:
            self.load_weights(archive)

    @classmethod
    def random(cls, cfg, seed, tied_qk=True, pos_scale=1.0, qk_gain=1.0):
        bb = cls(cfg)
        bb.init_random(seed, tied_qk=tied_qk, pos_scale=pos_scale, qk_gain=qk_gain)
        return bb

    def init_random(self, seed, tied_qk=True, pos_scale=1.0, qk_gain=1.0):
        """Deterministic stand-in weights.

        With `tied_qk` the key projection copies the query projection, so
        q.k logits act as a feature similarity (which is what pretrained
        attention maps provide for cross-frame correspondence).
        `qk_gain` multiplies the q/k weights to sharpen those maps and
        `pos_scale` shrinks the positional embedding so content, not
        location, dominates the similarity.
        """
        rng = make_rng(seed)
        c = self.cfg.width
        arc = CheckpointArchive()
        for name, shape in manifest(self.cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if name.endswith("ln_pre.weight") or name.endswith("ln_1.weight") or name.endswith("ln_2.weight"):
                arr = np.ones(shape)
            elif leaf == "bias":
                arr = 0.02 * rng.normal(size=shape)
            elif name.endswith("_embedding"):
                arr = c ** -0.5 * rng.normal(size=shape)
            else:
                arr = shape[0] ** -0.5 * rng.normal(size=shape)
            arc[name] = arr
        for i in range(self.cfg.depth):
            b = f"{PREFIX}blocks.{i}.attn."
            for n in ("q_proj.weight", "k_proj.weight"):
                arc[b + n] = qk_gain * arc[b + n]
            if tied_qk:
                arc[b + "k_proj.weight"] = arc[b + "q_proj.weight"]
                arc[b + "k_proj.bias"] = arc[b + "q_proj.bias"]
        arc[PREFIX + "positional_embedding"] = pos_scale * arc[PREFIX + "positional_embedding"]
        self.load_weights(arc)
        return self

    def load_weights(self, archive):
        expected = manifest(self.cfg)
        names = [n for n in archive if n.startswith(PREFIX)]
        missing = [n for n in expected if n not in archive]
        extra = [n for n in names if n not in expected]
        bad = [n for n in expected if n in archive and tuple(archive[n].shape) != expected[n]]
        if missing or extra or bad:
            parts = []
            if missing:
                parts.append("missing: " + ", ".join(missing))
            if extra:
                parts.append("unexpected: " + ", ".join(extra))
            if bad:
                parts.append("mis-shaped: " + ", ".join(
                    f"{n} {tuple(archive[n].shape)} != {expected[n]}" for n in bad))
            raise ManifestError("backbone manifest mismatch; " + "; ".join(parts),
                                missing + extra + bad)
        self.params = OrderedDict(
            (n, Parameter(np.asarray(archive[n], dtype=np.float32), n, trainable=False))
            for n in expected)
        self._w64 = {n[len(PREFIX):]: p.data.astype(np.float64) for n, p in self.params.items()}

    def to_archive(self):
        arc = CheckpointArchive()
        for n, p in self.params.items():
            arc[n] = p.data
        return arc

    def _check_ready(self):
        if self._w64 is None:
            raise ParameterError("backbone has no weights; call init_random or load_weights")

    def _run(self, images, layers):
        """images (B, S, S, 3) -> {layer: (tokens (B,1+HW,C), q, k)}"""
        self._check_ready()
        cfg, w = self.cfg, self._w64
        images = np.asarray(images, dtype=np.float64)
        s = cfg.image_size
        if images.ndim != 4 or images.shape[1:] != (s, s, 3):
            raise ShapeError(f"expected frames of shape ({s}, {s}, 3), got {images.shape[1:]}")
        wanted = {cfg.resolve_layer(n) for n in layers}
        b = images.shape[0]
        heads, d = cfg.heads, cfg.width // cfg.heads
        x = patchify(images, cfg.patch_size) @ w["patch_embed.weight"]
        cls = np.broadcast_to(w["class_embedding"], (b, 1, cfg.width))
        x = np.concatenate([cls, x], axis=1) + w["positional_embedding"]
        x = _ln(x, w["ln_pre.weight"], w["ln_pre.bias"])
        out = {}
        for i in range(max(wanted)):
            p = f"blocks.{i}."
            h = _ln(x, w[p + "ln_1.weight"], w[p + "ln_1.bias"])
            q = h @ w[p + "attn.q_proj.weight"] + w[p + "attn.q_proj.bias"]
            k = h @ w[p + "attn.k_proj.weight"] + w[p + "attn.k_proj.bias"]
            v = h @ w[p + "attn.v_proj.weight"] + w[p + "attn.v_proj.bias"]
            split = lambda t: t.reshape(b, -1, heads, d).transpose(0, 2, 1, 3)
            att = _softmax(split(q) @ split(k).transpose(0, 1, 3, 2) / np.sqrt(d))
            o = (att @ split(v)).transpose(0, 2, 1, 3).reshape(b, -1, cfg.width)
            x = x + o @ w[p + "attn.out_proj.weight"] + w[p + "attn.out_proj.bias"]
            h = _ln(x, w[p + "ln_2.weight"], w[p + "ln_2.bias"])
            h = _gelu(h @ w[p + "mlp.fc.weight"] + w[p + "mlp.fc.bias"])
            x = x + h @ w[p + "mlp.proj.weight"] + w[p + "mlp.proj.bias"]
            if i + 1 in wanted:
                out[i + 1] = (x, q[:, 1:], k[:, 1:])
        return out

    def encode_frame(self, image, layers):
        image = np.asarray(image)
        if image.ndim != 3:
            raise ShapeError(f"expected one (S, S, 3) image, got shape {image.shape}")
        vols = self.encode_clip(image[None], layers)
        return {n: FrameFeatures(v.x[0], v.q[0], v.k[0], v.cls[0]) for n, v in vols.items()}

    def encode_clip(self, frames, layers):
        """Encode T frames; returns {layer index as given: FeatureVolume}."""
        if isinstance(frames, (list, tuple)):
            if not frames:
                raise ShapeError("encode_clip needs at least one frame")
            shapes = {np.shape(f) for f in frames}
            if len(shapes) != 1:
                raise ShapeError(f"inconsistent frame sizes: {sorted(shapes)}")
            frames = np.stack(frames)
        frames = np.asarray(frames)
        if frames.ndim != 4 or frames.shape[0] < 1:
            raise ShapeError(f"expected (T, S, S, 3) frames, got {frames.shape}")
        layers = list(layers)
        for n in layers:
            self.cfg.resolve_layer(n)
        raw = self._run(frames, layers)
        g, c = self.cfg.grid, self.cfg.width
        t = frames.shape[0]
        result = {}
        for n in layers:
            tokens, q, k = raw[self.cfg.resolve_layer(n)]
            f32 = lambda a: np.ascontiguousarray(a, dtype=np.float32)
            result[n] = FeatureVolume(
                x=f32(tokens[:, 1:].reshape(t, g, g, c)),
                q=f32(q), k=f32(k), cls=f32(tokens[:, 0]), heads=self.cfg.heads)
        return result
