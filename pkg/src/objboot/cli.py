"""Command-line entry point: pretrain, eval-knn, eval-probe, cluster-debug."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .clustering import assignment_grids, cluster_joint, dump_assignments, kmeans_joint, label_objects
from .config import ConfigError, load_config
from .encoder import encode, view_patches
from .synthdata import augment_pair, derive_seed
from .train import init_state, load_state, run_eval, run_pretrain, training_scenes


def _overrides(args) -> dict[str, str]:
    items = dict(kv.split("=", 1) for kv in args.set or [])
    if args.seed is not None:
        items["train.seed"] = str(args.seed)
    return items


def _config(args):
    return load_config(args.config, _overrides(args))


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    last, metrics = run_pretrain(cfg, args.out, resume=args.resume)
    print(f"checkpoint: {last}\nmetrics: {metrics}")
    return 0


def _eval(args, method: str) -> int:
    out = Path(args.out) / f"eval_{method}.csv"
    rows = run_eval(args.checkpoint, out, methods=(method,), eval_overrides=_overrides(args) or None)
    for row in rows:
        print(f"ratio={row['ratio']:>4}  mIoU={100 * row[f'{method}_miou']:.2f}")
    print(f"results: {out}")
    return 0


def cmd_cluster_debug(args) -> int:
    if args.checkpoint:
        state, cfg = load_state(args.checkpoint)
    else:
        cfg = _config(args)
        state = init_state(cfg)
    scenes = training_scenes(cfg)[: args.images]
    records = []
    for scene in scenes:
        v1, v2 = augment_pair(scene, derive_seed(cfg.train.seed, 99, scene.image_id), cfg.aug)
        tokens, _ = encode(state.teacher, view_patches([v1, v2]))
        if cfg.cluster.method == "oracle":
            assignment, objects = label_objects(v1.patch_labels, v2.patch_labels, tokens[0], tokens[1],
                                                cfg.scene.num_classes)
        elif cfg.cluster.method == "kmeans":
            assignment, objects = kmeans_joint(tokens[0], tokens[1], cfg.cluster, scene.image_id)
        else:
            coords = np.concatenate([v1.patch_coords, v2.patch_coords])
            assignment, objects = cluster_joint(tokens[0], tokens[1], coords, cfg.cluster, scene.image_id)
        rec = {"image_id": scene.image_id, "valid": objects.valid_mask.tolist(),
               "labels_view1": v1.patch_labels.reshape(v1.grid).tolist(),
               "labels_view2": v2.patch_labels.reshape(v2.grid).tolist()}
        rec.update(assignment_grids(assignment, v1.grid))
        records.append(rec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_assignments(out / "assignments.json", records)
    print(f"assignments: {out / 'assignments.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="objboot")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", default="runs/default", help="output directory")
        p.add_argument("--seed", type=int, help="overrides train.seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="extra config override")
        return p

    p = common(sub.add_parser("pretrain", help="self-supervised pretraining"))
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)
    for name, method in (("eval-knn", "knn"), ("eval-probe", "probe")):
        p = common(sub.add_parser(name, help=f"dense {method} evaluation of a checkpoint"))
        p.add_argument("--checkpoint", required=True)
        p.set_defaults(func=lambda a, m=method: _eval(a, m))
    p = common(sub.add_parser("cluster-debug", help="dump joint-space cluster assignments"))
    p.add_argument("--checkpoint")
    p.add_argument("--images", type=int, default=4)
    p.set_defaults(func=cmd_cluster_debug)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
