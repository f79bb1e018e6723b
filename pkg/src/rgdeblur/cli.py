"""Command line entry point: ``rgdeblur <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .alignment import make_flow_provider
from .datagen import DatasetManifest, ingest_dataset, write_synthetic_dataset
from .imagecore import read_image, write_image
from .kernelgen import kernel_to_image, seed_to_kernel
from .pipeline import evaluate, infer, load_checkpoint, load_config, make_config, train, write_report
from .pipeline.config import parse_override
from .reblur import compose_reblur

log = logging.getLogger("rgdeblur")


def cmd_synth(args):
    shift = tuple(args.shift) if args.shift else None
    manifest = write_synthetic_dataset(
        args.out, args.count, seed=args.seed, size=args.size, m=args.m,
        max_shift=args.max_shift, max_zoom=args.max_zoom, shift=shift, split=args.split,
    )
    print(f"wrote {len(manifest)} pairs to {args.out}")


def cmd_ingest(args):
    manifest = ingest_dataset(args.root, args.crop or None, args.seed, args.split)
    out = Path(args.out) if args.out else Path(args.root) / "manifest.jsonl"
    manifest.write(out)
    print(f"{len(manifest)} pairs, {len(manifest.rejects)} rejected -> {out}")


def _config_from_args(args):
    overrides = dict(parse_override(s) for s in args.set or [])
    if args.config:
        return load_config(args.config, **overrides)
    return make_config(args.profile, args.variant, **overrides)


def cmd_train(args):
    manifest = DatasetManifest.read(args.manifest)
    state = None
    if args.resume:
        state = load_checkpoint(args.resume)
        config = state.config
        if args.set:
            config = config.replace(**dict(parse_override(s) for s in args.set))
            state.config = config
    else:
        config = _config_from_args(args)
    state = train(config, manifest, args.run_dir, state=state)
    print(f"trained to epoch {state.epoch}; checkpoint in {args.run_dir}")


def _provider_from_args(args, state):
    if args.flow == "classical":
        cfg = state.config
        return make_flow_provider("classical", levels=cfg.flow_levels, iterations=cfg.flow_iterations,
                                  smoothness=cfg.flow_smoothness)
    return make_flow_provider(args.flow, root=args.flow_root)


def cmd_eval(args):
    state = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.read(args.manifest)
    report = evaluate(state, manifest, _provider_from_args(args, state))
    jpath, cpath = write_report(report, args.out)
    print(json.dumps({k: v for k, v in report["mean"].items()}, indent=2))
    print(f"report: {jpath} {cpath}")


def cmd_infer(args):
    state = load_checkpoint(args.checkpoint)
    blurry = read_image(args.image)
    deblurred, _, preview = infer(state, blurry)
    write_image(args.out, deblurred, bits=args.bits)
    if args.blurmap_out:
        write_image(args.blurmap_out, preview, bits=args.bits)
    print(f"wrote {args.out}")


def _load_volume(path: str, key: str) -> torch.Tensor:
    data = np.load(path)
    if isinstance(data, np.lib.npyio.NpzFile):
        data = data[key]
    return torch.from_numpy(np.asarray(data, dtype=np.float32))


def cmd_reblur(args):
    img = read_image(args.image)
    seeds = _load_volume(args.seeds, "seeds")
    weights = _load_volume(args.weights or args.seeds, "weights")
    with torch.no_grad():
        out = compose_reblur(img[None], seeds[None], weights[None])[0]
    write_image(args.out, out, bits=args.bits)
    print(f"wrote {args.out}")


def cmd_kernel_viz(args):
    seed = torch.tensor([float(v) for v in args.seed.split(",")], dtype=torch.float64)
    kernel = seed_to_kernel(seed, len(seed))
    img = kernel_to_image(kernel)
    if args.scale > 1:
        img = img.repeat_interleave(args.scale, 1).repeat_interleave(args.scale, 2)
    write_image(args.out, img)
    if args.print:
        np.set_printoptions(precision=5, suppress=True, linewidth=160)
        print(kernel.numpy())
    print(f"wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rgdeblur", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic misaligned dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--m", type=int, default=8)
    s.add_argument("--max-shift", type=float, default=3.0)
    s.add_argument("--max-zoom", type=float, default=1.0)
    s.add_argument("--shift", type=float, nargs=2, metavar=("DX", "DY"), help="fixed shift for every pair")
    s.add_argument("--split", default="train")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="build a manifest from root/{blurry,sharp}")
    s.add_argument("root")
    s.add_argument("--crop", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="train from a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--run-dir", required=True)
    s.add_argument("--config", help="TOML file mirroring TrainConfig")
    s.add_argument("--profile", default="desk", choices=["paper", "desk"])
    s.add_argument("--variant", default="full")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    s.add_argument("--resume", metavar="CHECKPOINT")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="warped-GT metrics for a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--flow", default="classical", choices=["classical", "precomputed", "synthetic-gt"])
    s.add_argument("--flow-root")
    s.add_argument("--out", required=True, help="output prefix for .json and .csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="deblur one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--blurmap-out")
    s.add_argument("--bits", type=int, default=8, choices=[8, 16])
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("reblur", help="reblur an image with given seeds and weights")
    s.add_argument("--image", required=True)
    s.add_argument("--seeds", required=True, help=".npy (M, H, W) or .npz with 'seeds' and 'weights'")
    s.add_argument("--weights", help=".npy (m, H, W); defaults to the 'weights' entry of --seeds")
    s.add_argument("--out", required=True)
    s.add_argument("--bits", type=int, default=8, choices=[8, 16])
    s.set_defaults(func=cmd_reblur)

    s = sub.add_parser("kernel-viz", help="render a seed vector as a kernel image")
    s.add_argument("--seed", required=True, help="comma-separated a_0,...,a_{i-1}")
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=int, default=16)
    s.add_argument("--print", action="store_true")
    s.set_defaults(func=cmd_kernel_viz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
