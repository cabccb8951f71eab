"""Command-line entry point: train, eval, flops, synth, export-attn.

Exit codes: 0 success, 1 I/O error, 2 configuration or contract error,
3 numerical abort. ``EVL_THREADS`` (positive integer) caps worker threads.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from .backbone import Backbone
from .config import load_config
from .costmodel import decoder_encoder_ratio, model_flops
from .decoder import DecoderConfig, EVLDecoder
from .errors import ConfigError, EVLError, FormatError, NumericalError
from .model import EVLModel
from .pipeline.data import CLASS_NAMES, SynthConfig, load_clip, load_dataset, make_clip, write_dataset
from .pipeline.inference import predict_dataset
from .pipeline.train import train
from .temporal import TemporalToggles

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class IOFailure(Exception):
    pass


def worker_threads():
    raw = os.environ.get("EVL_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"EVL_THREADS must be a positive integer, got {raw!r}")
    return n


def fmt(x):
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def write_tsv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(fmt(x) for x in r) + "\n")


def build_backbone(cfg):
    if cfg.backbone_weights:
        return Backbone(cfg.backbone, _load_archive(cfg.backbone_weights))
    return Backbone.random(cfg.backbone, seed=cfg.backbone_seed, **cfg.backbone_init)


def _load_archive(path):
    try:
        return ck.load(path)
    except FileNotFoundError as exc:
        raise IOFailure(f"no such file: {path}") from exc


def _load_data(path, what):
    if path is None:
        raise ConfigError(f"no {what} dataset given (set data.{what} or pass --data)")
    if not (Path(path) / "index.tsv").exists():
        raise IOFailure(f"{what} dataset not found: {Path(path) / 'index.tsv'}")
    return load_dataset(path)


def load_model(cfg, ckpt_path):
    arc = _load_archive(ckpt_path)
    bb = Backbone(cfg.backbone, arc)
    dec = EVLDecoder(cfg.decoder, seed=cfg.seed)
    dec.load_archive(arc)
    return EVLModel(bb, dec)


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    clips = _load_data(cfg.train_data, "train")
    model = EVLModel(build_backbone(cfg), EVLDecoder(cfg.decoder, seed=cfg.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(model, clips, cfg.train)
    rows = [(m["step"], m["loss"], m["lr"], m["train_acc"]) for m in result.metrics]
    write_tsv(out / "metrics.tsv", ("step", "loss", "lr", "train_acc"), rows)
    arc = model.backbone.to_archive()
    arc.update(model.decoder.to_archive())
    ck.save(arc, out / "checkpoint.evlt")
    last = result.metrics[-1]["loss"] if result.metrics else float("nan")
    print(f"trained {cfg.train.steps} steps in {result.seconds:.1f}s; final loss {last:.6f}")
    print(f"wrote {out / 'checkpoint.evlt'} and {out / 'metrics.tsv'}")
    return EXIT_OK


def cmd_eval(args):
    cfg = load_config(args.config)
    model = load_model(cfg, args.ckpt)
    clips = _load_data(args.data or cfg.eval_data, "eval")
    probs = predict_dataset(model, clips, cfg.eval_sampling)
    labels = np.array([c.label for c in clips])
    pred = probs.argmax(-1)
    rows = []
    for k in range(cfg.decoder.num_classes):
        mask = labels == k
        if mask.any():
            name = CLASS_NAMES[k] if k < len(CLASS_NAMES) else str(k)
            rows.append((k, name, int(mask.sum()), float(np.mean(pred[mask] == k))))
    top1 = float(np.mean(pred == labels))
    rows.append(("all", "all", len(labels), top1))
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "eval.tsv"
    write_tsv(out, ("class", "name", "count", "accuracy"), rows)
    print(f"top-1 accuracy {top1:.6f} on {len(labels)} clips")
    for k, name, n, acc in rows[:-1]:
        print(f"  {k:>3} {name:<8} n={n:<5d} acc={acc:.6f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_flops(args):
    cfg = load_config(args.config)
    dec = cfg.decoder
    if args.full:
        depth = cfg.backbone.depth
        dec = DecoderConfig(num_blocks=depth, feature_layers=tuple(range(-depth, 0)), width=dec.width,
                            heads=dec.heads, mlp_factor=dec.mlp_factor, num_classes=dec.num_classes,
                            reduction="none", toggles=TemporalToggles(), max_frames=dec.max_frames,
                            grid=dec.grid)
    frames = args.frames or cfg.eval_sampling.frames
    views = args.views or cfg.eval_sampling.views
    use = None if args.blocks == 0 else dec
    if args.blocks not in (None, 0):
        raise ConfigError("--blocks only accepts 0 (report without decoder)")
    rep = model_flops(cfg.backbone, use, frames, views, num_classes=dec.num_classes)
    g = cfg.backbone.grid
    ratio = decoder_encoder_ratio(g, g, frames, cfg.backbone.width, cfg.backbone.mlp_factor)
    print(f"frames={frames} views={views} decoder_blocks={0 if use is None else use.num_blocks}")
    print(rep.render())
    print(f"decoder/encoder block ratio: exact {ratio.exact:.6f}, simplified {ratio.simplified:.6f}")
    print(f"add-on / backbone: {100 * rep['addon_ratio']:.2f}%")
    if args.json:
        doc = rep.as_dict()
        doc["ratio.exact"] = ratio.exact
        doc["ratio.simplified"] = ratio.simplified
        Path(args.json).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_synth(args):
    if args.size < 0:
        raise ConfigError("--size must be non-negative")
    cfg = SynthConfig(image_size=args.image_size, frames=args.frames)
    workers = worker_threads()
    make = lambda i: make_clip(np.random.default_rng([args.seed, i]), i % len(CLASS_NAMES), cfg)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        clips = list(pool.map(make, range(args.size)))
    index = write_dataset(clips, args.out)
    print(f"wrote {len(clips)} clips and {index}")
    return EXIT_OK


def cmd_export_attn(args):
    cfg = load_config(args.config)
    model = load_model(cfg, args.ckpt)
    try:
        clip = load_clip(args.clip)
    except FileNotFoundError as exc:
        raise IOFailure(f"no such clip: {args.clip}") from exc
    from .pipeline.sampling import sample_frames
    (idx,) = sample_frames(clip.length, cfg.eval_sampling)[:1]
    vols = {n: v.select(idx) for n, v in model.clip_features(clip).items()}
    from .temporal import adjacent_attention
    arc = ck.CheckpointArchive()
    for n in sorted(vols):
        a_prev, a_next = adjacent_attention(vols[n].q, vols[n].k, vols[n].heads)
        arc[f"layer{n}.a_prev"] = a_prev
        arc[f"layer{n}.a_next"] = a_next
    pred = model.forward([vols], trace=True)
    for i, a in enumerate(pred.attention):
        arc[f"decoder.block{i}.attn"] = a[0]
    arc["frame_indices"] = np.asarray(idx, dtype=np.float32)
    ck.save(arc, args.out)
    print(f"wrote {len(arc)} tensors to {args.out}")
    return EXIT_OK


def make_parser():
    p = argparse.ArgumentParser(prog="evl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="train the decoder on a dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_train)
    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data")
    e.add_argument("--out", help="eval.tsv path (default: next to the checkpoint)")
    e.set_defaults(fn=cmd_eval)
    f = sub.add_parser("flops", help="analytic cost report")
    f.add_argument("--config", required=True)
    f.add_argument("--full", action="store_true", help="one decoder block per backbone layer")
    f.add_argument("--frames", type=int)
    f.add_argument("--views", type=int)
    f.add_argument("--blocks", type=int, help="0 drops the decoder from the report")
    f.add_argument("--json", help="also write the report as JSON")
    f.set_defaults(fn=cmd_flops)
    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--image-size", type=int, default=32)
    s.set_defaults(fn=cmd_synth)
    x = sub.add_parser("export-attn", help="dump attention maps for one clip")
    x.add_argument("--config", required=True)
    x.add_argument("--ckpt", required=True)
    x.add_argument("--clip", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_attn)
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        worker_threads()
        return args.fn(args)
    except NumericalError as exc:
        print(f"error: numerical abort at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IOFailure, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EVLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
