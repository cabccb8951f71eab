"""Multi-view video scoring and two-model score ensembling."""

from dataclasses import dataclass

import numpy as np

from .. import tensor as tc
from ..errors import ParameterError, ShapeError
from .sampling import SamplingSpec, sample_frames


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def predict_video(model, clip, spec=SamplingSpec(), cached=True):
    """Uniform mean of per-view class probabilities (K,)."""
    if spec.mode != "eval":
        raise ParameterError("predict_video needs an eval-mode sampling spec")
    views = sample_frames(clip.length, spec)
    if cached:
        vols = [model.view(clip, idx) for idx in views]
    else:
        full = model.encode(clip.frames)
        vols = [{n: v.select(idx) for n, v in full.items()} for idx in views]
    with tc.no_grad():
        logits = model.forward(vols).logits.data
    return softmax(logits).mean(axis=0)


def predict_dataset(model, clips, spec=SamplingSpec(), batch=32):
    """(N, K) probabilities; views of several clips share decoder batches."""
    model.warm_cache(clips)
    jobs = []
    for ci, clip in enumerate(clips):
        for idx in sample_frames(clip.length, spec):
            jobs.append((ci, model.view(clip, idx)))
    k = model.decoder.cfg.num_classes
    sums = np.zeros((len(clips), k))
    counts = np.zeros(len(clips))
    with tc.no_grad():
        for s in range(0, len(jobs), batch):
            chunk = jobs[s:s + batch]
            probs = softmax(model.forward([v for _, v in chunk]).logits.data)
            for (ci, _), p in zip(chunk, probs):
                sums[ci] += p
                counts[ci] += 1
    return sums / counts[:, None]


def accuracy(scores, labels):
    scores = np.asarray(scores)
    if len(scores) == 0:
        raise ParameterError("accuracy of an empty set")
    return float(np.mean(scores.argmax(-1) == np.asarray(labels)))


@dataclass
class EnsembleResult:
    alpha: float
    scores: np.ndarray
    accuracy: float
    curve: list          # (alpha, accuracy) for every grid point


def ensemble(scores_a, scores_b, labels, step=0.1):
    """alpha* = argmax over the grid of acc(alpha*a + (1-alpha)*b); ties go to the alpha closest to 0.5."""
    a, b = np.asarray(scores_a, dtype=np.float64), np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ensemble members disagree in shape: {a.shape} vs {b.shape}")
    if len(labels) == 0:
        raise ParameterError("ensemble search needs a non-empty validation set")
    n = int(round(1.0 / step))
    grid = [round(i / n, 10) for i in range(n + 1)]
    curve = [(al, accuracy(al * a + (1 - al) * b, labels)) for al in grid]
    best = max(acc for _, acc in curve)
    alpha = min((al for al, acc in curve if acc == best), key=lambda al: (abs(al - 0.5), al))
    combined = alpha * a + (1 - alpha) * b
    return EnsembleResult(alpha, combined, best, curve)
