"""Temporal modulation of stacked frame features.

Three optional terms are added to the raw volume X (shape ``(..., T, H, W, C)``):
a depthwise width-3 convolution over time, a learned per-frame embedding, and
a projection of adjacent-frame attention maps through relative-offset weights.
All parameters start at zero, so an untrained module is the identity.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ContractError, RangeError, ShapeError
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class TemporalToggles:
    use_conv: bool = True
    use_pos: bool = True
    use_attn: bool = True

    @classmethod
    def off(cls):
        return cls(False, False, False)


def temporal_conv(x, w_conv, b_conv):
    """Depthwise conv over the frame axis with zero padding at both ends."""
    c = x.shape[-1]
    if w_conv.shape != (3, c) or b_conv.shape != (c,):
        raise ShapeError(f"temporal_conv: kernel {w_conv.shape}/bias {b_conv.shape} vs channels {c}")
    t_axis = x.ndim - 4
    y = tc.mul(tc.shift(x, 1, t_axis), w_conv[0])      # X(t-1)
    y = tc.add(y, tc.mul(x, w_conv[1]))
    y = tc.add(y, tc.mul(tc.shift(x, -1, t_axis), w_conv[2]))  # X(t+1)
    return tc.add(y, b_conv)


def temporal_pos(pos_embed, positions, spatial):
    """Broadcast rows of the (T_max, C) table to a (T, H, W, C) volume.

    `positions` are 1-based frame positions.
    """
    positions = np.asarray(positions, dtype=np.int64)
    t_max, c = pos_embed.shape
    if positions.min() < 1 or positions.max() > t_max:
        raise RangeError(f"temporal positions {positions.tolist()} outside [1, {t_max}]")
    h, w = spatial
    rows = tc.take(pos_embed, positions - 1, axis=0)
    return tc.expand(tc.reshape(rows, (len(positions), 1, 1, c)), (len(positions), h, w, c))


def _neighbour_index(t):
    idx = np.arange(t)
    return np.maximum(idx - 1, 0), np.minimum(idx + 1, t - 1)


def adjacent_attention(q, k, heads):
    """Head-averaged attention from each frame to its previous/next frame.

    q, k: (..., T, HW, C) projections. Returns (A_prev, A_next), each
    (..., T, HW_query, HW_key) with rows summing to one. Boundary frames attend
    to themselves.
    """
    if q is None or k is None:
        raise ContractError("cross-frame attention needs query and key projections for every frame")
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape or q.ndim < 3:
        raise ShapeError(f"projection shapes differ or too small: {q.shape} vs {k.shape}")
    *lead, t, n, c = q.shape
    if c % heads:
        raise ShapeError(f"width {c} not divisible by {heads} heads")
    d = c // heads
    qh = np.swapaxes(q.reshape(*lead, t, n, heads, d), -2, -3)       # (..., T, heads, HW, d)
    kt = k.reshape(*lead, t, n, heads, d).transpose(*range(len(lead)), -4, -2, -1, -3)
    prev, nxt = _neighbour_index(t)

    def maps(other):
        logits = np.matmul(qh, np.take(kt, other, axis=-4)) / np.sqrt(d)
        logits -= logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        a = e / e.sum(axis=-1, keepdims=True)
        return a.mean(axis=-3)

    return maps(prev).astype(np.float32), maps(nxt).astype(np.float32)


def relative_index(h, w):
    """(HW, HW) flat index into a (2H-1, 2W-1) offset grid for (query, key)."""
    hq, wq = np.divmod(np.arange(h * w), w)
    dh = hq[:, None] - hq[None, :] + (h - 1)
    dw = wq[:, None] - wq[None, :] + (w - 1)
    return dh * (2 * w - 1) + dw


def project_attention(a_prev, a_next, w_prev, w_next, spatial):
    """Y(t,h,w,c) = sum_k W_prev(h-h', w-w', c) A_prev(t,(h,w),k) + same for next."""
    h, w = spatial
    c = w_prev.shape[-1]
    if w_prev.shape != (2 * h - 1, 2 * w - 1, c) or w_next.shape != w_prev.shape:
        raise ShapeError(f"relative weights {w_prev.shape} do not match grid {spatial}")
    a_prev, a_next = tc.as_tensor(a_prev), tc.as_tensor(a_next)
    lead = a_prev.shape[:-2]
    n = h * w
    rel = relative_index(h, w)
    out = None
    for a, wt in ((a_prev, w_prev), (a_next, w_next)):
        gathered = tc.take(tc.reshape(wt, ((2 * h - 1) * (2 * w - 1), c)), rel, axis=0)  # (q, k, C)
        # batch over the query position: (q, rows, k) @ (q, k, C)
        per_query = tc.permute(tc.reshape(a, (-1, n, n)), (1, 0, 2))
        term = tc.matmul(per_query, gathered)
        out = term if out is None else tc.add(out, term)
    return tc.reshape(tc.permute(out, (1, 0, 2)), (*lead, h, w, c))


def cross_frame_attention(x, q_proj, k_proj, w_prev, w_next, heads):
    h, w = x.shape[-3], x.shape[-2]
    a_prev, a_next = adjacent_attention(q_proj, k_proj, heads)
    if a_prev.shape[-1] != h * w:
        raise ShapeError(f"projections cover {a_prev.shape[-1]} positions, volume has {h * w}")
    return project_attention(a_prev, a_next, w_prev, w_next, (h, w))


def blend(x, y_conv=None, y_pos=None, y_attn=None, toggles=TemporalToggles()):
    """Residual sum of the enabled temporal terms; disabled terms are skipped."""
    y = x
    for enabled, term in ((toggles.use_conv, y_conv), (toggles.use_pos, y_pos),
                          (toggles.use_attn, y_attn)):
        if not enabled:
            continue
        if term is None:
            raise ContractError("enabled temporal term was not computed")
        if term.shape != x.shape and term.shape != x.shape[-term.ndim:]:
            raise ShapeError(f"blend: term {term.shape} vs volume {x.shape}")
        y = tc.add(y, term)
    return y


class TemporalModule:
    """Per-decoder-layer temporal parameters (zero-initialised)."""

    def __init__(self, prefix, width, max_frames, grid, toggles=TemporalToggles()):
        self.grid = tuple(grid)
        self.toggles = toggles
        h, w = self.grid
        self.w_conv = Parameter(np.zeros((3, width)), f"{prefix}.conv.weight")
        self.b_conv = Parameter(np.zeros(width), f"{prefix}.conv.bias")
        self.pos_embed = Parameter(np.zeros((max_frames, width)), f"{prefix}.pos_embed")
        self.w_prev = Parameter(np.zeros((2 * h - 1, 2 * w - 1, width)), f"{prefix}.attn.w_prev")
        self.w_next = Parameter(np.zeros((2 * h - 1, 2 * w - 1, width)), f"{prefix}.attn.w_next")

    def parameters(self):
        t = self.toggles
        out = []
        if t.use_conv:
            out += [self.w_conv, self.b_conv]
        if t.use_pos:
            out.append(self.pos_embed)
        if t.use_attn:
            out += [self.w_prev, self.w_next]
        return out

    def all_parameters(self):
        return [self.w_conv, self.b_conv, self.pos_embed, self.w_prev, self.w_next]

    def __call__(self, x, a_prev=None, a_next=None, toggles=None):
        """x: Tensor (..., T, H, W, C); a_prev/a_next: (..., T, HW, HW) arrays."""
        t, h, w, _ = x.shape[-4:]
        tg = self.toggles if toggles is None else toggles
        y_conv = temporal_conv(x, self.w_conv, self.b_conv) if tg.use_conv else None
        y_pos = temporal_pos(self.pos_embed, np.arange(1, t + 1), (h, w)) if tg.use_pos else None
        y_attn = None
        if tg.use_attn:
            if a_prev is None or a_next is None:
                raise ContractError("temporal cross attention enabled but no attention maps given")
            y_attn = project_attention(a_prev, a_next, self.w_prev, self.w_next, (h, w))
        return blend(x, y_conv, y_pos, y_attn, tg)
