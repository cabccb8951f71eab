"""Decoder training on top of a frozen backbone."""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as tc
from ..decoder import classify_loss
from ..errors import ContractError, NumericalError
from ..model import archive_digest
from .data import random_resized_crop
from .sampling import SamplingSpec, sample_frames


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 16
    lr: float = 4e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    sampling: SamplingSpec = SamplingSpec("segment", 8, mode="train")
    augment: bool = False


def cosine_lr(step, total, peak):
    """Half-period cosine from `peak` at step 0 to 0 at step `total`."""
    if total <= 0:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * step / total))


class AdamW:
    def __init__(self, params, weight_decay=0.05, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.wd, self.b1, self.b2, self.eps = weight_decay, beta1, beta2, eps
        self.m = {p.name: np.zeros(p.shape) for p in self.params}
        self.v = {p.name: np.zeros(p.shape) for p in self.params}
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p in self.params:
            g = grads.get(p.name)
            w = p.data.astype(np.float64)
            if g is not None:
                m = self.m[p.name] = self.b1 * self.m[p.name] + (1 - self.b1) * g
                v = self.v[p.name] = self.b2 * self.v[p.name] + (1 - self.b2) * g * g
                w = w - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            w = w - lr * self.wd * p.data
            p.assign(w)


@dataclass
class TrainResult:
    metrics: list = field(default_factory=list)   # dicts: step, loss, lr, train_acc
    seconds: float = 0.0


def _batch_volumes(model, clips, idx, cfg, rng):
    vols = []
    for i in idx:
        clip = clips[i]
        (frames,) = sample_frames(clip.length, cfg.sampling, rng)
        if cfg.augment:
            # no flips: they would turn "left" clips into "right" ones
            f = random_resized_crop(clip.frames[frames], rng)
            vols.append(model.encode(np.ascontiguousarray(f)))
        else:
            vols.append(model.view(clip, frames))
    return vols


def train(model, clips, cfg=TrainConfig(), log=None):
    """Optimise the decoder's trainable parameters; the backbone must not change."""
    before = archive_digest(model.backbone.to_archive())
    params = model.decoder.parameters()
    frozen_names = set(model.backbone.params)
    opt = AdamW(params, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
    rng = tc.make_rng(cfg.seed)
    labels = np.array([c.label for c in clips])
    if not cfg.augment:
        model.warm_cache(clips)
    result = TrainResult()
    t0 = time.perf_counter()
    order = np.empty(0, dtype=np.int64)
    for step in range(cfg.steps):
        if len(order) < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(clips))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        vols = _batch_volumes(model, clips, idx, cfg, rng)
        pred = model.forward(vols, train=True, rng=rng)
        loss = classify_loss(pred.logits, labels[idx])
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"non-finite training loss at step {step}", step=step)
        grads = tc.backward(loss)
        leaked = frozen_names.intersection(grads)
        if leaked:
            raise ContractError(f"backbone parameters received gradients: {sorted(leaked)}")
        lr = cosine_lr(step, cfg.steps, cfg.lr)
        opt.step(grads, lr)
        if not all(np.isfinite(p.data).all() for p in params):
            raise NumericalError(f"non-finite parameters after the update at step {step}", step=step)
        acc = float(np.mean(pred.logits.data.argmax(-1) == labels[idx]))
        row = {"step": step, "loss": value, "lr": lr, "train_acc": acc}
        result.metrics.append(row)
        if log is not None:
            log(row)
    result.seconds = time.perf_counter() - t0
    if archive_digest(model.backbone.to_archive()) != before:
        raise ContractError("backbone weights changed during training")
    return result
