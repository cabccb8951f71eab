"""Query-token Transformer decoder over temporally modulated feature volumes.

Parameter manifest (C = width, K = num_classes, i = block index 0..M-1)::

    decoder.query_token                     (C,)
    decoder.temporal.{i}.conv.weight        (3, C)
    decoder.temporal.{i}.conv.bias          (C,)
    decoder.temporal.{i}.pos_embed          (max_frames, C)
    decoder.temporal.{i}.attn.w_prev        (2H-1, 2W-1, C)
    decoder.temporal.{i}.attn.w_next        (2H-1, 2W-1, C)
    decoder.blocks.{i}.ln_q.{weight,bias}   (C,)   norm of the query token
    decoder.blocks.{i}.ln_kv.{weight,bias}  (C,)   norm of the feature tokens
    decoder.blocks.{i}.attn.{q,k,v,out}_proj.{weight (C, C), bias (C,)}
    decoder.blocks.{i}.ln_mlp.{weight,bias} (C,)
    decoder.blocks.{i}.mlp.fc.{weight (C, aC), bias (aC,)}
    decoder.blocks.{i}.mlp.proj.{weight (aC, C), bias (C,)}
    decoder.ln_final.{weight,bias}          (C,)
    decoder.head.{weight (C, K), bias (K,)}
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .checkpoint import CheckpointArchive
from .errors import ConfigError, ContractError, ManifestError, ShapeError
from .temporal import TemporalModule, TemporalToggles, adjacent_attention
from .tensor import Parameter, Tensor, make_rng

REDUCTIONS = ("none", "spatial_avg", "temporal_avg", "cls_token")
PREFIX = "decoder."


@dataclass(frozen=True)
class DecoderConfig:
    num_blocks: int = 4
    feature_layers: tuple = (-4, -3, -2, -1)
    width: int = 32
    heads: int = 4
    mlp_factor: int = 4
    dropout: float = 0.5
    num_classes: int = 6
    reduction: str = "none"
    toggles: TemporalToggles = TemporalToggles()
    max_frames: int = 8
    grid: tuple = (4, 4)

    def __post_init__(self):
        object.__setattr__(self, "feature_layers", tuple(self.feature_layers))
        object.__setattr__(self, "grid", tuple(self.grid))
        if len(self.feature_layers) != self.num_blocks:
            raise ConfigError(f"feature_layers has {len(self.feature_layers)} entries "
                              f"but num_blocks is {self.num_blocks}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if self.width % self.heads:
            raise ConfigError("decoder width must be divisible by heads")
        if self.num_classes < 1 or self.max_frames < 1:
            raise ConfigError("num_classes and max_frames must be positive")


@dataclass
class LayerInput:
    """Frozen features of one backbone layer for a batch of clips."""

    x: np.ndarray                  # (B, T, H, W, C)
    cls: np.ndarray = None         # (B, T, C)
    a_prev: np.ndarray = None      # (B, T, HW, HW)
    a_next: np.ndarray = None


@dataclass
class Prediction:
    logits: Tensor                 # (B, K)
    queries: list = field(default_factory=list)
    attention: list = field(default_factory=list)   # per block (B, heads, L)


def layer_inputs(volumes, with_attention=True, maps=None):
    """Stack per-clip FeatureVolumes of one layer into a batched LayerInput.

    `maps` optionally supplies precomputed (A_prev, A_next) per clip.
    """
    x = np.stack([v.x for v in volumes])
    cls = np.stack([v.cls for v in volumes])
    a_prev = a_next = None
    if with_attention and maps is not None:
        a_prev = np.stack([m[0] for m in maps])
        a_next = np.stack([m[1] for m in maps])
    elif with_attention:
        q = np.stack([v.q for v in volumes])
        k = np.stack([v.k for v in volumes])
        a_prev, a_next = adjacent_attention(q, k, volumes[0].heads)
    return LayerInput(x, cls, a_prev, a_next)


def reduce_volume(volume, mode, cls=None):
    """(…, T, H, W, C) volume -> (…, L, C) token sequence."""
    lead = volume.shape[:-4]
    t, h, w, c = volume.shape[-4:]
    if mode == "none":
        return tc.reshape(volume, (*lead, t * h * w, c))
    if mode == "spatial_avg":
        return tc.mean(volume, axis=(-3, -2))
    if mode == "temporal_avg":
        return tc.reshape(tc.mean(volume, axis=-4), (*lead, h * w, c))
    if mode == "cls_token":
        if cls is None:
            raise ContractError("cls_token reduction needs the per-frame CLS tokens")
        return tc.as_tensor(cls)
    raise ConfigError(f"unknown reduction mode {mode!r}")


def _linear(x, w, b):
    return tc.add(tc.matmul(x, w), b)


def decoder_block(q_prev, y, p, heads, dropout=0.0, train=False, rng=None, trace=None):
    """One pre-norm block: q~ = q + MHA(q, Y, Y); q = q~ + MLP(q~).

    q_prev: (B, C) or (C,); y: (B, L, C) or (L, C); `p` maps short names
    ("ln_q.weight", "attn.q_proj.weight", ...) to tensors.
    """
    single = q_prev.ndim == 1
    if single:
        q_prev, y = tc.reshape(q_prev, (1, -1)), tc.reshape(y, (1, *y.shape))
    b, c = q_prev.shape
    if y.ndim != 3 or y.shape[0] != b or y.shape[-1] != c:
        raise ShapeError(f"decoder_block: query {q_prev.shape} vs tokens {y.shape}")
    n = y.shape[1]
    d = c // heads
    qn = tc.layer_norm(q_prev, p["ln_q.weight"], p["ln_q.bias"])
    yn = tc.layer_norm(y, p["ln_kv.weight"], p["ln_kv.bias"])
    qh = tc.reshape(_linear(qn, p["attn.q_proj.weight"], p["attn.q_proj.bias"]), (b, heads, 1, d))
    kh = tc.reshape(_linear(yn, p["attn.k_proj.weight"], p["attn.k_proj.bias"]), (b, n, heads, d))
    vh = tc.reshape(_linear(yn, p["attn.v_proj.weight"], p["attn.v_proj.bias"]), (b, n, heads, d))
    logits = tc.mul(tc.matmul(qh, tc.permute(kh, (0, 2, 3, 1))), 1.0 / np.sqrt(d))
    attn = tc.softmax(logits, axis=-1)                         # (B, heads, 1, L)
    if trace is not None:
        trace.append(attn.data[:, :, 0, :])
    mixed = tc.reshape(tc.matmul(attn, tc.permute(vh, (0, 2, 1, 3))), (b, c))
    q_mid = tc.add(q_prev, _linear(mixed, p["attn.out_proj.weight"], p["attn.out_proj.bias"]))
    hid = tc.gelu(_linear(tc.layer_norm(q_mid, p["ln_mlp.weight"], p["ln_mlp.bias"]),
                          p["mlp.fc.weight"], p["mlp.fc.bias"]))
    hid = tc.dropout(hid, dropout, rng, train)
    q_out = tc.add(q_mid, _linear(hid, p["mlp.proj.weight"], p["mlp.proj.bias"]))
    return tc.reshape(q_out, (c,)) if single else q_out


def block_manifest(c, mlp_factor):
    hid = mlp_factor * c
    m = OrderedDict()
    for ln in ("ln_q", "ln_kv"):
        m[f"{ln}.weight"] = (c,)
        m[f"{ln}.bias"] = (c,)
    for proj in ("q", "k", "v", "out"):
        m[f"attn.{proj}_proj.weight"] = (c, c)
        m[f"attn.{proj}_proj.bias"] = (c,)
    m["ln_mlp.weight"] = (c,)
    m["ln_mlp.bias"] = (c,)
    m["mlp.fc.weight"] = (c, hid)
    m["mlp.fc.bias"] = (hid,)
    m["mlp.proj.weight"] = (hid, c)
    m["mlp.proj.bias"] = (c,)
    return m


def _init_block_value(name, shape, rng):
    if name.endswith(".bias"):
        return np.zeros(shape)
    if name.startswith("ln_"):
        return np.ones(shape)
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


class EVLDecoder:
    def __init__(self, cfg, seed=0):
        if cfg.num_blocks < 1:
            raise ConfigError("the decoder needs at least one block")
        self.cfg = cfg
        rng = make_rng(seed)
        c = cfg.width
        self.query_token = Parameter(0.02 * rng.normal(size=c), PREFIX + "query_token")
        self.temporal = [TemporalModule(f"{PREFIX}temporal.{i}", c, cfg.max_frames, cfg.grid,
                                        cfg.toggles) for i in range(cfg.num_blocks)]
        self.blocks = []
        for i in range(cfg.num_blocks):
            blk = OrderedDict()
            for short, shape in block_manifest(c, cfg.mlp_factor).items():
                blk[short] = Parameter(_init_block_value(short, shape, rng),
                                       f"{PREFIX}blocks.{i}.{short}")
            self.blocks.append(blk)
        self.ln_final_w = Parameter(np.ones(c), PREFIX + "ln_final.weight")
        self.ln_final_b = Parameter(np.zeros(c), PREFIX + "ln_final.bias")
        self.head_w = Parameter(0.02 * rng.normal(size=(c, cfg.num_classes)), PREFIX + "head.weight")
        self.head_b = Parameter(np.zeros(cfg.num_classes), PREFIX + "head.bias")

    def named_parameters(self):
        out = OrderedDict()
        out[self.query_token.name] = self.query_token
        for mod in self.temporal:
            for p in mod.all_parameters():
                out[p.name] = p
        for blk in self.blocks:
            for p in blk.values():
                out[p.name] = p
        for p in (self.ln_final_w, self.ln_final_b, self.head_w, self.head_b):
            out[p.name] = p
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def to_archive(self):
        arc = CheckpointArchive()
        for name, p in self.named_parameters().items():
            arc[name] = p.data
        return arc

    def load_archive(self, archive):
        params = self.named_parameters()
        names = [n for n in archive if n.startswith(PREFIX)]
        missing = [n for n in params if n not in archive]
        extra = [n for n in names if n not in params]
        bad = [n for n in params if n in archive and tuple(archive[n].shape) != params[n].shape]
        if missing or extra or bad:
            raise ManifestError("decoder manifest mismatch; missing: %s; unexpected: %s; mis-shaped: %s"
                                % (", ".join(missing) or "-", ", ".join(extra) or "-",
                                   ", ".join(bad) or "-"), missing + extra + bad)
        for n, p in params.items():
            p.assign(archive[n])

    def _tokens(self, i, inp):
        cfg = self.cfg
        mod = self.temporal[i]
        if cfg.reduction == "cls_token":
            if inp.cls is None:
                raise ContractError("cls_token reduction needs the per-frame CLS tokens")
            b, t, c = inp.cls.shape
            vol = Tensor(inp.cls.reshape(b, t, 1, 1, c))
            tg = TemporalToggles(cfg.toggles.use_conv, cfg.toggles.use_pos, False)
            y = mod(vol, toggles=tg)
            return reduce_volume(y, "none")
        y = mod(Tensor(inp.x), inp.a_prev, inp.a_next)
        return reduce_volume(y, cfg.reduction)

    def forward(self, inputs, train=False, rng=None, trace=False):
        """inputs: one LayerInput per block, in feature_layers order."""
        cfg = self.cfg
        if len(inputs) != cfg.num_blocks:
            raise ConfigError(f"decoder has {cfg.num_blocks} blocks but got {len(inputs)} volumes")
        b = inputs[0].x.shape[0]
        q = tc.expand(self.query_token, (b, cfg.width))
        pred = Prediction(logits=None)
        attn_trace = [] if trace else None
        for i, inp in enumerate(inputs):
            y = self._tokens(i, inp)
            q = decoder_block(q, y, self.blocks[i], cfg.heads, cfg.dropout, train, rng, attn_trace)
            if trace:
                pred.queries.append(q.data)
        z = tc.layer_norm(q, self.ln_final_w, self.ln_final_b)
        z = tc.dropout(z, cfg.dropout, rng, train)
        pred.logits = _linear(z, self.head_w, self.head_b)
        if trace:
            pred.attention = attn_trace
        return pred


def classify_loss(logits, labels):
    return tc.cross_entropy(logits, labels)
