"""Command-line interface: scene generation, training, rendering, evaluation."""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import protocol
from .field import FieldModel
from .render import model_field_fn, render_image
from .scenes import generate_toy_scene, load_dataset, render_dataset_images, save_dataset
from .train import TrainConfig, model_evaluator, train


def _cmd_gen_scene(args):
    rng = np.random.default_rng(args.seed)
    scene = generate_toy_scene(args.spec, args.views, rng, width=args.size,
                               height=args.size, hemisphere=args.hemisphere)
    images = render_dataset_images(scene, n_samples=args.oracle_samples)
    save_dataset(scene, images, args.out)
    print(f"wrote {args.views}-view '{args.spec}' dataset to {args.out}")


def _cmd_train(args):
    cfg = TrainConfig.from_json(args.config)
    result = train(cfg, args.out,
                   progress=lambda it, loss: print(f"iter {it:6d}  loss/ray {loss:.6f}"))
    print(f"checkpoint: {result.checkpoint_path}")


def _sources_for(args, dataset, target):
    pool_ids = [i for i in dataset.train_ids
                if protocol.pose_difference(target, dataset.cameras[i]) > 0.0]
    pool_cams = [dataset.cameras[i] for i in pool_ids]
    if args.sources == "auto":
        rng = np.random.default_rng(args.seed)
        picked = protocol.sample_source_views(target, pool_cams, rng)
    else:
        n_sets = max(int(args.sources[1]), 3)
        sets = protocol.rank_source_sets(target, pool_cams, n_sets)
        picked = sets[int(args.sources[1]) - 1]
    return [pool_ids[i] for i in picked]


def _cmd_render(args):
    dataset = load_dataset(args.dataset)
    model = FieldModel.load(args.checkpoint)
    target = dataset.cameras[args.view]
    view_ids = _sources_for(args, dataset, target)
    sources = model.prepare_sources(dataset.images[view_ids],
                                    [dataset.cameras[i] for i in view_ids])
    img = render_image(target, model_field_fn(model, sources), args.samples,
                       sampler="midpoint")
    Image.fromarray(np.round(255.0 * img.rgb).astype(np.uint8)).save(args.out)
    print(f"rendered view {args.view} with sources {view_ids} -> {args.out}")


def _cmd_eval(args):
    dataset = load_dataset(args.dataset)
    model = FieldModel.load(args.checkpoint)
    report = model_evaluator(model, dataset, args.sets, n_samples=args.samples,
                             checkpoint=args.checkpoint)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_json())
        print(f"report written to {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(prog="attnfield")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a procedural multi-view dataset")
    p.add_argument("--spec", required=True, choices=["sphere", "two-blobs", "box-grid"])
    p.add_argument("--views", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--oracle-samples", type=int, default=256)
    p.add_argument("--hemisphere", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_scene)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("render", help="render one dataset view from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--sources", default="auto", choices=["s1", "s2", "s3", "s4", "auto"])
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_render)

    p = sub.add_parser("eval", help="score held-out views over ranked source sets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--sets", type=int, default=3)
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--out", default="")
    p.set_defaults(fn=_cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except Exception as exc:  # CLI contract: nonzero exit with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
