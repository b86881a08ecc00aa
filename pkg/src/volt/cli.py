"""Command-line entry point.

Subcommands: gen-data, train, eval, bench, grad-check, inspect-tokens.
All commands are deterministic given the config seeds, exit 0 on success
and print a single machine-parsable `error: ...` line on failure.
Setting VOLT_DETERMINISTIC=1 forces 64-bit deterministic numerics.
"""

from __future__ import annotations

import argparse
import csv
import glob
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import autograd as ag
from . import runtime
from .config import ConfigError, parse_run_config
from .decoder_heads import head_bank, seg_logits
from .model import init_params, prepare_scene, voxel_features
from .scene import SceneSpec, generate_scene, load_scene, save_scene
from .tokenizer import occupied_slot_counts
from .train import DistillSettings, distill_loss, eval_loop, grad_check, train_loop


def _parse_spec_string(text, seed):
    kwargs = {}
    for part in filter(None, (text or "").split(",")):
        key, _, value = part.partition("=")
        if key == "extent":
            kwargs["extent"] = tuple(float(v) for v in value.split("x"))
        elif key == "objects":
            lo, _, hi = value.partition("-")
            kwargs["n_objects"] = (int(lo), int(hi or lo))
        elif key == "classes":
            kwargs["n_classes"] = int(value)
        elif key == "noise":
            kwargs["noise"] = float(value)
        elif key == "density":
            kwargs["density"] = float(value)
        else:
            raise ConfigError(f"unknown scene-spec key {key!r}")
    return SceneSpec(seed=seed, **kwargs)


def _load_dataset_scenes(cfg, scenes_override=None):
    """{dataset: [PointCloud]} from the config's globs (or an override glob)."""
    out = {}
    for name, ds in cfg.datasets.items():
        if scenes_override is not None:
            paths = sorted(glob.glob(scenes_override))
        else:
            paths = ds.scene_paths(cfg.base_dir)
        if not paths:
            raise ConfigError(f"no scene files found for dataset {name!r}")
        out[name] = [load_scene(p) for p in paths]
        if scenes_override is not None:
            break  # an explicit glob addresses a single dataset
    if not out:
        raise ConfigError("config defines no [dataset.*] sections")
    return out


def _model_from(cfg, scenes_by_dataset):
    first = next(iter(scenes_by_dataset.values()))[0]
    return cfg.model_config(in_channels=first.n_channels)


def cmd_gen_data(args):
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        spec = _parse_spec_string(args.spec, seed=args.seed + i)
        cloud = generate_scene(spec)
        path = os.path.join(args.out, f"scene_{i:04d}.volt")
        save_scene(cloud, path)
        print(f"wrote {path} ({cloud.n_points} points)")
    return 0


def cmd_train(args):
    cfg = parse_run_config(args.config)
    scenes = _load_dataset_scenes(cfg)
    model_cfg = _model_from(cfg, scenes)
    result = train_loop(
        model_cfg,
        cfg.voxel_size,
        scenes,
        cfg.out_dir,
        settings=cfg.train,
        augment_cfg=cfg.augment if cfg.augment_enabled else None,
        distill=cfg.distill,
        grid_shift=cfg.grid_shift,
    )
    final = result["final"]
    print(
        f"trained {cfg.train.steps} steps in {result['wall_time_s']:.1f}s: "
        f"miou={final['eval_miou']:.4f} voxel_acc={final['eval_voxel_acc']:.4f}"
    )
    print(f"checkpoint: {result['checkpoint']}")
    print(f"metrics: {result['metrics']}")
    return 0


def cmd_eval(args):
    cfg = parse_run_config(args.config)
    scenes = _load_dataset_scenes(cfg, args.scenes)
    model_cfg = _model_from(cfg, scenes)
    out_dir = args.out or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    report = eval_loop(
        args.checkpoint,
        model_cfg,
        cfg.voxel_size,
        scenes,
        use_ema=not args.raw_weights,
        dump_dir=out_dir if args.dump_predictions else None,
    )
    csv_path = os.path.join(out_dir, "miou_report.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["dataset", "metric", "value"])
        for name, body in report["datasets"].items():
            writer.writerow([name, "miou", f"{body['miou']:.6f}"])
            writer.writerow([name, "point_acc", f"{body['point_acc']:.6f}"])
            writer.writerow([name, "voxel_acc", f"{body['voxel_acc']:.6f}"])
            for k, iou in enumerate(body["per_class_iou"]):
                if not np.isnan(iou):
                    writer.writerow([name, f"iou_class_{k}", f"{iou:.6f}"])
    for name, body in report["datasets"].items():
        print(
            f"{name}: miou={body['miou']:.4f} point_acc={body['point_acc']:.4f} "
            f"voxel_acc={body['voxel_acc']:.4f}"
        )
    print(f"mean miou={report['mean_miou']:.4f}")
    print(f"report: {csv_path}")
    return 0


def bench_scenes(model_cfg, voxel_size, clouds, repeat=3, seed=0):
    """Per-scene token counts and forward wall times (eval mode)."""
    store = init_params(model_cfg, seed)
    rows = []
    for i, cloud in enumerate(clouds):
        prepared = prepare_scene(cloud, voxel_size, model_cfg.patch_size)
        times = []
        with ag.no_grad():
            voxel_features(store, model_cfg, [prepared])  # warmup
            for _ in range(repeat):
                t0 = time.perf_counter()
                voxel_features(store, model_cfg, [prepared])
                times.append((time.perf_counter() - t0) * 1e3)
        rows.append(
            dict(
                scene=i,
                points=cloud.n_points,
                voxels=prepared.vset.n_voxels,
                tokens=prepared.patches.n_tokens,
                mean_ms=float(np.mean(times)),
                std_ms=float(np.std(times)),
            )
        )
    return rows


def cmd_bench(args):
    cfg = parse_run_config(args.config)
    scenes = _load_dataset_scenes(cfg, args.scenes)
    model_cfg = _model_from(cfg, scenes)
    clouds = [c for pool in scenes.values() for c in pool]
    rows = bench_scenes(model_cfg, cfg.voxel_size, clouds, repeat=args.repeat, seed=cfg.seed)

    out_dir = args.out or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    bench_path = os.path.join(out_dir, "bench.csv")
    with open(bench_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)

    tokens = np.array([r["tokens"] for r in rows])
    counts, edges = np.histogram(tokens, bins=min(10, max(len(rows), 1)))
    hist_path = os.path.join(out_dir, "seq_hist.csv")
    with open(hist_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, n in zip(edges[:-1], edges[1:], counts):
            writer.writerow([f"{lo:.1f}", f"{hi:.1f}", int(n)])

    print(
        f"{len(rows)} scenes: mean tokens {tokens.mean():.0f}, "
        f"mean forward {np.mean([r['mean_ms'] for r in rows]):.1f} ms"
    )
    print(f"wrote {bench_path} and {hist_path}")
    return 0


def cmd_grad_check(args):
    runtime.set_deterministic(True)
    try:
        cfg = parse_run_config(args.config)
        classes = (
            next(iter(cfg.datasets.values())).classes if cfg.datasets else 6
        )
        model_cfg = cfg.model_config(in_channels=3)
        if model_cfg.distill_classes is None:
            model_cfg = replace(
                model_cfg,
                distill_classes=classes,
                dataset_classes=dict(model_cfg.dataset_classes) or {"main": classes},
            )
        dataset_id = next(iter(model_cfg.dataset_classes))

        spec = SceneSpec(
            seed=cfg.seed + 11,
            extent=(1.2, 1.2, 1.0),
            n_objects=(1, 1),
            n_classes=classes,
            density=60.0,
            noise=0.01,
        )
        prepared = prepare_scene(
            generate_scene(spec), cfg.voxel_size, model_cfg.patch_size
        )
        store = init_params(model_cfg, cfg.seed)
        heads = head_bank(store, model_cfg.dataset_classes, with_distill=True)
        labels = prepared.vset.labels

        def loss_fn():
            feats = voxel_features(store, model_cfg, [prepared])[0]
            return distill_loss(feats, labels, labels, heads, dataset_id)

        overall, per_param = grad_check(
            loss_fn, store, eps=args.eps, n_coords=args.coords,
            rng=np.random.default_rng(cfg.seed),
        )
        groups = {}
        for name, err in per_param.items():
            top = name.split(".", 1)[0]
            module = {"embed": "tokenizer", "blocks": "encoder", "final_ln": "encoder"}.get(
                top, top
            )
            groups[module] = max(groups.get(module, 0.0), err)
        for module in sorted(groups):
            print(f"module={module} max_rel_err={groups[module]:.3e}")
        print(f"overall max_rel_err={overall:.3e}")
        return 0
    finally:
        runtime.set_deterministic(None)


def cmd_inspect_tokens(args):
    cfg = parse_run_config(args.config)
    cloud = load_scene(args.scene)
    model_cfg = cfg.model_config(in_channels=cloud.n_channels)
    prepared = prepare_scene(cloud, cfg.voxel_size, model_cfg.patch_size)
    patches = prepared.patches
    slots = occupied_slot_counts(patches)
    dest = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(dest)
        writer.writerow(["token_index", "px", "py", "pz", "occupied_slots"])
        for t in range(patches.n_tokens):
            px, py, pz = patches.patch_coords[t]
            writer.writerow([t, int(px), int(py), int(pz), int(slots[t])])
    finally:
        if args.out:
            dest.close()
            print(f"wrote {args.out} ({patches.n_tokens} tokens)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="volt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic labeled scenes")
    p.add_argument("--spec", default="", help="e.g. extent=4x4x2.5,objects=3-6,classes=6")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (mIoU report)")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", default=None, help="override scene glob")
    p.add_argument("--out", default=None)
    p.add_argument("--raw-weights", action="store_true", help="skip EMA weights")
    p.add_argument("--dump-predictions", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="token counts and forward wall time per scene")
    p.add_argument("--config", required=True)
    p.add_argument("--scenes", default=None)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("grad-check", help="finite-difference gradient check")
    p.add_argument("--config", required=True)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=220)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("inspect-tokens", help="dump token grid positions as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_inspect_tokens)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # single-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
