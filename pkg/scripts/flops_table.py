"""Analytic cost table for ViT-B/16 with 0-12 decoder blocks and 8/16/32 frames."""

import argparse

from evl.costmodel import decoder_encoder_ratio, model_flops, reference_decoder, vit_b16


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--views", type=int, default=1)
    args = ap.parse_args()
    bb = vit_b16()
    r = decoder_encoder_ratio(14, 14, 8, 768, 4)
    print(f"decoder/encoder block ratio (t=8): exact {r.exact:.6f}, simplified {r.simplified:.6f}")
    print(f"{'frames':>6} {'blocks':>6} {'backbone G':>11} {'add-on G':>9} {'add-on %':>9} {'total G':>9}")
    for frames in (8, 16, 32):
        for blocks in (0, 4, 12):
            dec = reference_decoder(blocks, frames) if blocks else None
            rep = model_flops(bb, dec, frames, args.views, num_classes=400)
            print(f"{frames:>6} {blocks:>6} {rep['backbone_total'] / 1e9:>11.2f} {rep['addon_total'] / 1e9:>9.2f} "
                  f"{100 * rep['addon_ratio']:>9.2f} {rep['total'] / 1e9:>9.2f}")


if __name__ == "__main__":
    main()
