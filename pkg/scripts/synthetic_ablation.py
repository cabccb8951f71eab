"""Temporal-module and reduction ablations on the synthetic motion/appearance task.

Trains one decoder per setting on the same frozen stand-in backbone and
prints motion-class and appearance-class accuracy. The defaults match the
acceptance run; one setting takes a few minutes on one CPU.

    python3 scripts/synthetic_ablation.py --settings off pe+ca pe+ca/spatial_avg
"""

import argparse
import time

import numpy as np

from evl.backbone import Backbone, BackboneConfig
from evl.decoder import DecoderConfig, EVLDecoder
from evl.model import EVLModel
from evl.pipeline.data import SynthConfig, synth_dataset
from evl.pipeline.inference import predict_dataset
from evl.pipeline.sampling import SamplingSpec
from evl.pipeline.train import TrainConfig, train
from evl.temporal import TemporalToggles

TOGGLES = {
    "off": TemporalToggles.off(),
    "conv": TemporalToggles(True, False, False),
    "pe": TemporalToggles(False, True, False),
    "ca": TemporalToggles(False, False, True),
    "pe+ca": TemporalToggles(False, True, True),
    "all": TemporalToggles(),
}


def run(setting, bb, train_clips, eval_clips, args):
    name, _, reduction = setting.partition("/")
    dec = DecoderConfig(num_blocks=2, feature_layers=(-2, -1), width=bb.cfg.width, heads=4,
                        num_classes=6, reduction=reduction or "none", toggles=TOGGLES[name],
                        dropout=args.dropout, max_frames=8, grid=(bb.cfg.grid, bb.cfg.grid))
    model = EVLModel(bb, EVLDecoder(dec, seed=args.seed))
    res = train(model, train_clips, TrainConfig(steps=args.steps, batch_size=16, lr=args.lr, seed=args.seed))
    pred = predict_dataset(model, eval_clips, SamplingSpec("segment", 8)).argmax(-1)
    labels = np.array([c.label for c in eval_clips])
    motion = labels < 4
    return np.mean(pred[motion] == labels[motion]), np.mean(pred[~motion] == labels[~motion]), res.seconds


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--settings", nargs="+", default=["off", "pe+ca", "pe+ca/spatial_avg"],
                    help=f"toggle set[/reduction], toggle sets: {', '.join(TOGGLES)}")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--dropout", type=float, default=0.1)
    ap.add_argument("--train-size", type=int, default=1600)
    ap.add_argument("--eval-size", type=int, default=200)
    ap.add_argument("--speed", type=int, default=SynthConfig.speed)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for s in args.settings:
        name = s.partition("/")[0]
        if name not in TOGGLES:
            ap.error(f"unknown toggle set {name!r}")
    scfg = SynthConfig(speed=args.speed)
    train_clips = synth_dataset(1, args.train_size, scfg)
    eval_clips = synth_dataset(2, args.eval_size, scfg)
    bb = Backbone.random(BackboneConfig(image_size=32, patch_size=4, depth=2, width=32, heads=4),
                         seed=0, pos_scale=0.3, qk_gain=2.0)
    print(f"{'setting':<22} {'motion':>7} {'appear':>7} {'train s':>8}")
    t0 = time.perf_counter()
    for s in args.settings:
        mot, app, secs = run(s, bb, train_clips, eval_clips, args)
        print(f"{s:<22} {mot:>7.3f} {app:>7.3f} {secs:>8.1f}", flush=True)
    print(f"total {(time.perf_counter() - t0) / 60:.1f} min")


if __name__ == "__main__":
    main()
