"""Analytic FLOPS accounting for encoder and decoder blocks.

Every term counts one unit per multiply-accumulate of a matrix product, the
same granularity as the block formula 2qC^2 + 2kC^2 + 2qkC + 2aqC^2 (Q and
output projections, K and V projections, the two attention products, the two
MLP matmuls). Norms, softmax, activations and additions are ignored.

Report schema (`model_flops(...).as_dict()`), all values per video unless
the key says otherwise::

    backbone.patch_embed        views * T * hw * 3P^2 * C
    backbone.blocks             views * T * N * block(q=k=hw)
    decoder.block.{i}           views * block(q=1, k=L_i), L_i set by the reduction
    decoder.temporal.{i}        views * (conv 3*T*hw*C  +  cross attention 4*T*(hw)^2*C)
    head                        views * C * K
    backbone_total, addon_total, total, per_view, addon_ratio
"""

from collections import OrderedDict
from dataclasses import dataclass

from .errors import ParameterError


def _check_positive(**kw):
    for k, v in kw.items():
        if int(v) != v or v < 1:
            raise ParameterError(f"{k} must be a positive integer, got {v}")


def block_flops(q, k, c, alpha=4):
    """Transformer block cost with q query tokens and k key/value tokens."""
    _check_positive(q=q, k=k, c=c, alpha=alpha)
    q, k, c, alpha = int(q), int(k), int(c), int(alpha)
    return 2 * q * c * c + 2 * k * c * c + 2 * q * k * c + 2 * alpha * q * c * c


@dataclass(frozen=True)
class BlockRatio:
    exact: float
    simplified: float


def decoder_encoder_ratio(h, w, t, c, alpha=4):
    """One decoder block over t frames vs t encoder blocks (one per frame)."""
    _check_positive(h=h, w=w, t=t, c=c, alpha=alpha)
    hw = h * w
    exact = block_flops(1, hw * t, c, alpha) / (t * block_flops(hw, hw, c, alpha))
    simplified = 2 * hw * t * c * c / (t * (12 * hw * c * c + 2 * hw * hw * c))
    return BlockRatio(exact, simplified)


def tokens_after_reduction(mode, t, hw):
    return {"none": t * hw, "spatial_avg": t, "temporal_avg": hw, "cls_token": t}[mode]


def temporal_flops(t, hw, c, use_conv=True, use_attn=True):
    flops = 0
    if use_conv:
        flops += 3 * t * hw * c
    if use_attn:
        # Q.K for the previous and next frame, then the relative projection of both maps
        flops += 2 * t * hw * hw * c + 2 * t * hw * hw * c
    return flops


class FlopsReport(OrderedDict):
    def as_dict(self):
        return dict(self)

    def render(self):
        width = max(len(k) for k in self)
        lines = []
        for key, val in self.items():
            if key == "addon_ratio":
                lines.append(f"{key:<{width}}  {val:>18.6f}")
            else:
                lines.append(f"{key:<{width}}  {val:>18,d}  ({val / 1e9:.3f} G)")
        return "\n".join(lines)


def model_flops(backbone_cfg, decoder_cfg, frames, views=1, num_classes=None):
    """Itemised cost of one video. `decoder_cfg=None` means no decoder blocks."""
    _check_positive(frames=frames, views=views)
    b = backbone_cfg
    g = b.grid
    hw = g * g
    c = b.width
    rep = FlopsReport()
    rep["backbone.patch_embed"] = views * frames * hw * 3 * b.patch_size ** 2 * c
    rep["backbone.blocks"] = views * frames * b.depth * block_flops(hw, hw, c, b.mlp_factor)
    addon = 0
    m = 0 if decoder_cfg is None else decoder_cfg.num_blocks
    for i in range(m):
        d = decoder_cfg
        toggles = d.toggles
        spatial = d.reduction != "cls_token"
        n_tok = tokens_after_reduction(d.reduction, frames, hw)
        blk = views * block_flops(1, n_tok, d.width, d.mlp_factor)
        tmp = views * temporal_flops(frames, hw if spatial else 1, d.width, toggles.use_conv,
                                     toggles.use_attn and spatial)
        rep[f"decoder.block.{i}"] = blk
        rep[f"decoder.temporal.{i}"] = tmp
        addon += blk + tmp
    k = num_classes if num_classes is not None else (decoder_cfg.num_classes if decoder_cfg else 1)
    rep["head"] = views * c * k
    addon += rep["head"]
    rep["backbone_total"] = rep["backbone.patch_embed"] + rep["backbone.blocks"]
    rep["addon_total"] = addon
    rep["total"] = rep["backbone_total"] + addon
    rep["per_view"] = rep["total"] // views
    rep["addon_ratio"] = addon / rep["backbone_total"]
    return rep


def vit_b16():
    from .backbone import BackboneConfig
    return BackboneConfig(image_size=224, patch_size=16, depth=12, width=768, heads=12, mlp_factor=4)


def reference_decoder(blocks=4, frames=8, num_classes=400, reduction="none"):
    """ViT-B-sized decoder reading the last `blocks` backbone layers."""
    from .decoder import DecoderConfig
    return DecoderConfig(num_blocks=blocks, feature_layers=tuple(range(-blocks, 0)), width=768,
                         heads=12, mlp_factor=4, num_classes=num_classes, reduction=reduction,
                         max_frames=frames, grid=(14, 14))
