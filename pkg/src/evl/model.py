"""Frozen backbone + trainable decoder, with per-clip feature caching."""

import hashlib
import weakref

import numpy as np

from . import checkpoint as ck
from .decoder import layer_inputs
from .temporal import adjacent_attention


def archive_digest(archive):
    return hashlib.sha256(ck.to_bytes(archive)).hexdigest()


class ClipView:
    """Features of one sampled view: {layer: FeatureVolume} plus attention maps."""

    def __init__(self, volumes, maps=None):
        self.volumes = volumes
        self.maps = maps or {}


class EVLModel:
    def __init__(self, backbone, decoder):
        self.backbone = backbone
        self.decoder = decoder
        self.layers = list(decoder.cfg.feature_layers)
        self._feats = weakref.WeakKeyDictionary()
        self._maps = weakref.WeakKeyDictionary()

    @property
    def needs_attention(self):
        d = self.decoder.cfg
        return d.toggles.use_attn and d.reduction != "cls_token"

    def encode(self, frames):
        """(T, S, S, 3) frames -> {layer: FeatureVolume} (deduplicated layers)."""
        return self.backbone.encode_clip(frames, sorted(set(self.layers)))

    def encode_many(self, clips, chunk=64):
        """Encode several frame stacks in backbone batches of about `chunk` frames."""
        out, pending, count = [], [], 0
        for frames in clips:
            pending.append(frames)
            count += len(frames)
            if count >= chunk:
                out += self._encode_batch(pending)
                pending, count = [], 0
        if pending:
            out += self._encode_batch(pending)
        return out

    def _encode_batch(self, clips):
        lens = [len(c) for c in clips]
        vols = self.encode(np.concatenate(clips))
        bounds = np.cumsum([0] + lens)
        return [{n: v.select(np.arange(a, b)) for n, v in vols.items()}
                for a, b in zip(bounds[:-1], bounds[1:])]

    def clip_features(self, clip):
        """All-frame features of a clip, computed once per clip object."""
        if clip not in self._feats:
            self._feats[clip] = self.encode(clip.frames)
        return self._feats[clip]

    def warm_cache(self, clips):
        todo = [c for c in clips if c not in self._feats]
        for clip, vols in zip(todo, self.encode_many([c.frames for c in todo])):
            self._feats[clip] = vols

    def view(self, clip, indices):
        """Cached features and adjacent-frame maps for frames `indices` of `clip`."""
        full = self.clip_features(clip)
        key = tuple(int(i) for i in indices)
        vols = {n: v.select(key) for n, v in full.items()}
        maps = {}
        if self.needs_attention:
            store = self._maps.setdefault(clip, {})
            for n, v in vols.items():
                if (n, key) not in store:
                    store[(n, key)] = adjacent_attention(v.q, v.k, v.heads)
                maps[n] = store[(n, key)]
        return ClipView(vols, maps)

    def inputs(self, views):
        """Batch ClipViews (or plain {layer: FeatureVolume} dicts) into LayerInputs."""
        views = [v if isinstance(v, ClipView) else ClipView(v) for v in views]
        attn = self.needs_attention
        out = []
        for n in self.layers:
            vols = [v.volumes[n] for v in views]
            maps = [v.maps[n] for v in views] if attn and all(n in v.maps for v in views) else None
            out.append(layer_inputs(vols, with_attention=attn, maps=maps))
        return out

    def forward(self, views, train=False, rng=None, trace=False):
        return self.decoder.forward(self.inputs(views), train=train, rng=rng, trace=trace)
