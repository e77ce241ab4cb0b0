"""Command-line entry points."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config_file import load_config
from .core import Profile, read_dataset, write_dataset
from .errors import UmgenError
from .trainer import TrainConfig, train


def _cmd_make_data(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    from .world import make_dataset
    stats = make_dataset(seeds, args.per_seed, args.len, args.out,
                         Profile.desk(), blocks=args.blocks)
    print(f"wrote {stats['sequences']} sequences to {args.out}")
    return 0


def _cmd_fit_vq(args) -> int:
    from .tokenizer import map_to_tensor
    from .vq import fit_codebook, grid_to_patches, save_codebook
    prof = Profile.desk()
    sequences = read_dataset(args.data)
    if args.modality == "map":
        patches = np.concatenate([grid_to_patches(map_to_tensor(f.map), prof.patch)
                                  for s in sequences for f in s.frames])
        channels = 7
    else:
        patches = np.concatenate([grid_to_patches(f.image.pixels, prof.patch)
                                  for s in sequences for f in s.frames])
        channels = 3
    cb = fit_codebook(patches, args.k, iters=args.iters, seed=args.seed,
                      patch=prof.patch, channels=channels)
    save_codebook(args.out, cb)
    print(f"fitted {args.modality} codebook k={args.k} "
          f"(max residual {cb.fit_max_dist:.4f}) -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = TrainConfig.from_flat(load_config(args.config)) if args.config \
        else TrainConfig()
    if args.variant:
        cfg.variant = args.variant
    log = train(cfg, args.data, args.out)
    last = log[-1] if log else {}
    print(f"trained {len(log)} steps; final loss {last.get('loss', float('nan')):.4f} "
          f"acc {last.get('acc', float('nan')):.3f} -> {args.out}")
    return 0


def _cmd_gen(args) -> int:
    from .model.bundle import load_bundle
    from .rollout import OverridePlan, rollout
    bundle = load_bundle(args.ckpt)
    sequences = read_dataset(args.init)
    plan = OverridePlan()
    if args.plan:
        with open(args.plan) as fh:
            plan = OverridePlan.from_json(json.load(fh))
    out = []
    for i, seq in enumerate(sequences):
        out.append(rollout(bundle, seq, args.frames, plan=plan,
                           seed=args.seed + i, mode=args.mode))
    write_dataset(args.out, out)
    print(f"extended {len(out)} sequences by {args.frames} frames -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .model.bundle import load_bundle
    from .eval import collision_rate, l2_trajectory_error, map_token_accuracy, mmd_report
    from .rollout import rollout
    metrics = [m.strip() for m in args.metrics.split(",")]
    reference = read_dataset(args.data)
    report: dict = {}
    bundle = load_bundle(args.ckpt) if args.ckpt else None

    if args.gen:
        generated = read_dataset(args.gen)
    else:
        if bundle is None:
            raise UmgenError("eval needs --ckpt to generate, or --gen FILE")
        prefix = bundle.profile.block_size
        generated = []
        for i, seq in enumerate(reference):
            init = type(seq)(frames=seq.frames[:prefix], world_seed=seq.world_seed,
                             ego_pose=seq.ego_pose[:prefix])
            generated.append(rollout(bundle, init,
                                     len(seq.frames) - prefix, seed=args.seed + i))

    if "mmd" in metrics:
        report["mmd"] = mmd_report(generated, reference).to_dict()
    if "cr" in metrics:
        report["cr"] = collision_rate(generated)
        report["cr_reference"] = collision_rate(reference)
    if "l2" in metrics:
        prefix = (bundle.profile.block_size if bundle else 8)
        rows = []
        for gen, ref in zip(generated, reference):
            horizon = min(len(gen.frames), len(ref.frames)) - prefix
            if horizon > 0:
                rows.append(l2_trajectory_error(gen, ref, horizon, prefix).to_dict())
        report["l2"] = {k: float(np.nanmean([r[k] for r in rows]))
                        for k in rows[0]} if rows else {}
    if "map_acc" in metrics:
        if bundle is None:
            raise UmgenError("map_acc needs --ckpt")
        report["map_acc"] = map_token_accuracy(bundle, reference).to_dict()

    text = json.dumps(report, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _cmd_bench(args) -> int:
    from .eval import bench_per_token
    from .model.bundle import load_bundle
    bundle = load_bundle(args.ckpt)
    models = [m.strip() for m in args.models.split(",")]
    t_list = [int(t) for t in args.T.split(",")]
    report = bench_per_token(bundle, models, t_list, reps=args.reps, seed=args.seed)
    csv = report.to_csv()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(csv)
    print(csv, end="")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn
    from .model.bundle import load_bundle
    from .service import create_app
    bundle = load_bundle(args.ckpt)
    app = create_app(bundle)
    addr = os.environ.get("UMGEN_ADDR", args.addr)
    host, _, port = addr.rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="umgen",
                                description="multimodal driving-scene generator")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("make-data", help="generate a synthetic dataset")
    d.add_argument("--seeds", required=True, help="comma-separated world seeds")
    d.add_argument("--per-seed", type=int, default=4)
    d.add_argument("--len", type=int, default=21)
    d.add_argument("--blocks", type=int, default=4)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=_cmd_make_data)

    v = sub.add_parser("fit-vq", help="fit a patch codebook")
    v.add_argument("--data", required=True)
    v.add_argument("--modality", choices=("map", "image"), required=True)
    v.add_argument("--k", type=int, required=True)
    v.add_argument("--iters", type=int, default=30)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)
    v.set_defaults(fn=_cmd_fit_vq)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=("no_ama",), default=None)
    t.set_defaults(fn=_cmd_train)

    g = sub.add_parser("gen", help="extend sequences by generation")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--init", required=True)
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--plan", default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mode", choices=("full", "tar_only"), default="full")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_cmd_gen)

    e = sub.add_parser("eval", help="evaluate metrics")
    e.add_argument("--ckpt", default=None)
    e.add_argument("--data", required=True)
    e.add_argument("--gen", default=None, help="pre-generated sequences")
    e.add_argument("--metrics", default="mmd,cr,l2,map_acc")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=_cmd_eval)

    b = sub.add_parser("bench", help="per-token time and cache benchmark")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--models", default="umgen,vanilla")
    b.add_argument("--T", default="2,4,8,16")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None)
    b.set_defaults(fn=_cmd_bench)

    s = sub.add_parser("serve", help="run the interactive session service")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--addr", default="127.0.0.1:8008")
    s.set_defaults(fn=_cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except UmgenError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
