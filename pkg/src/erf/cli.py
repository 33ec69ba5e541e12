"""Command line interface: erf <command> [options]."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, apply_overrides, dump_config, load_config
from .data import DataError, load_nerf_synthetic, save_nerf_synthetic, scene_bounds, write_png
from .optimize import NumericalError
from .render import RENDER_MODES, render_view
from .scene import Aabb
from .serialize import ModelFormatError, load_model, save_model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

DEFAULT_AABB = ([-1.5, -1.5, -1.5], [1.5, 1.5, 1.5])

log = logging.getLogger("erf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(count: int):
    def parse(text: str):
        vals = [float(x) for x in text.replace(",", " ").split()]
        if len(vals) != count:
            raise argparse.ArgumentTypeError(f"expected {count} numbers, got {len(vals)}")
        return vals
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, bitwise reproducible run")
    common.add_argument("--config", type=Path, help="key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration value")
    common.add_argument("--threads", type=int, default=None, help="worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="erf", description="Explicit radiance field reconstruction.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--scene", default="checkered_cube",
                   choices=["checkered_cube", "textured_slab", "sphere"])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--views", type=int, default=20, help="training views")
    p.add_argument("--test-views", type=int, default=5)
    p.add_argument("--res", type=int, default=64)

    p = sub.add_parser("init", parents=[common], help="create a random model for a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--depth", type=int, default=None, help="initial dense depth")

    p = sub.add_parser("train", parents=[common], help="coarse-to-fine reconstruction")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--init", type=Path, help="start from this model instead of a random one")
    p.add_argument("--iters", type=int, default=None, help="total optimisation steps")
    p.add_argument("--phases", type=int, default=None, help="maximum number of phases")
    p.add_argument("--stats", type=Path, help="JSON-lines training log (default OUT.jsonl)")
    p.add_argument("--checkpoints", type=Path,
                   help="directory for per-phase models (default OUT.phases/)")

    p = sub.add_parser("render", parents=[common], help="render dataset views")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--views", type=int, nargs="*", help="view indices within the split")
    p.add_argument("--mode", default="color", choices=RENDER_MODES)
    p.add_argument("--mip", type=int, default=0)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM over the test split")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])

    p = sub.add_parser("edit", parents=[common], help="recolour or cut a box region")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--op", required=True, choices=["recolor", "cut"])
    p.add_argument("--box", type=_floats(6), required=True,
                   help="'xmin ymin zmin xmax ymax zmax'")
    p.add_argument("--matrix", type=_floats(9), help="row-major 3x3 channel map (recolor)")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient oracle")
    p.add_argument("--data", type=Path, help="dataset (default: small synthetic cube)")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--abs-tol", type=float, default=1e-9)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--rays", type=int, default=16)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--max-params", type=int, default=None)

    p = sub.add_parser("info", parents=[common], help="model statistics")
    p.add_argument("--model", type=Path, required=True)
    return parser


def _config(args) -> Config:
    try:
        cfg = load_config(args.config)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad config file: {exc}") from exc
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key] = value
    try:
        return apply_overrides(cfg, pairs)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _threads(args):
    n = 1 if args.deterministic else args.threads
    if n is not None:
        import numba

        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def _dataset_aabb(path: Path) -> Aabb:
    bounds = scene_bounds(path)
    if bounds is None:
        log.warning("no aabb stored with the dataset; using %s", DEFAULT_AABB)
        return Aabb(*DEFAULT_AABB)
    return Aabb(*bounds)


def _load_data(path: Path, cfg: Config):
    return load_nerf_synthetic(path, white_background=cfg.white_background)


def cmd_synth(args, cfg):
    from .synthetic import make_synthetic_scene

    dataset, scene = make_synthetic_scene(args.scene, args.views, args.test_views, args.res,
                                          args.seed)
    box = scene.aabb
    save_nerf_synthetic(dataset, args.out, {"aabb": [box.min.tolist(), box.max.tolist()],
                                            "scene": args.scene})
    print(f"wrote {len(dataset.train)} train and {len(dataset.test)} test views to {args.out}")
    return EXIT_OK


def cmd_init(args, cfg):
    from .pipeline import initial_model

    if args.depth is not None:
        cfg = cfg.replace(init_depth=args.depth)
    _load_data(args.data, cfg)
    model = initial_model(_dataset_aabb(args.data), cfg, args.seed)
    save_model(model, args.out)
    print(f"nodes={model.svo.n_nodes} depth={model.svo.max_depth} out={args.out}")
    return EXIT_OK


def cmd_train(args, cfg):
    from .pipeline import fit, initial_model

    dataset = _load_data(args.data, cfg)
    model = load_model(args.init) if args.init else initial_model(_dataset_aabb(args.data),
                                                                  cfg, args.seed)
    stats = args.stats or args.out.with_name(args.out.name + ".jsonl")
    ckpt = args.checkpoints or args.out.with_name(args.out.name + ".phases")
    with open(stats, "w") as fh:
        result = fit(model, dataset, cfg, seed=args.seed, iterations=args.iters,
                     log_file=fh, checkpoint_dir=ckpt, max_phases=args.phases)
    save_model(result.model, args.out)
    print(f"iterations={result.trainer.iteration} phases={result.phases} "
          f"nodes={result.model.svo.n_nodes} out={args.out}")
    return EXIT_OK


def _views(dataset, split, picks):
    pool = list(range(len(dataset.cameras))) if split == "all" else dataset.indices(split)
    if picks:
        try:
            return [pool[i] for i in picks]
        except IndexError as exc:
            raise UsageError(f"view index out of range for split {split!r}") from exc
    return pool


def cmd_render(args, cfg):
    model = load_model(args.model)
    dataset = _load_data(args.data, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    for i in _views(dataset, args.split, args.views):
        out = render_view(model, dataset.cameras[i], args.mip, cfg.samples_per_side,
                          cfg.renderer, cfg.sensor, seed=args.seed,
                          max_samples=cfg.render_max_samples)
        if args.mode == "color":
            img = out.color
        elif args.mode == "opacity":
            img = np.repeat(out.opacity[..., None], 3, axis=2)
        elif args.mode == "depth":
            d = np.where(out.opacity > 1e-3, out.depth, 0.0)
            scale = d.max() if d.max() > 0 else 1.0
            img = np.repeat((d / scale)[..., None], 3, axis=2)
            np.save(args.out / f"{dataset.names[i]}_depth.npy", out.depth)
        else:
            img = 0.5 * (out.normal + 1.0)
        write_png(args.out / f"{dataset.names[i]}_{args.mode}.png", img)
    print(f"rendered {args.mode} views to {args.out}")
    return EXIT_OK


def cmd_eval(args, cfg):
    from .pipeline import evaluate

    model = load_model(args.model)
    dataset = _load_data(args.data, cfg)
    views = dataset.indices(args.split)
    result = evaluate(model, dataset, cfg, views, seed=args.seed)
    for i, (p, s) in zip(views, result["per_view"]):
        print(f"view={dataset.names[i]} psnr={p:.4f} ssim={s:.5f}")
    print(f"psnr={result['psnr']:.4f}")
    print(f"ssim={result['ssim']:.5f}")
    return EXIT_OK


def cmd_edit(args, cfg):
    from .edit import edit_cut, edit_recolor

    model = load_model(args.model)
    box = Aabb(args.box[:3], args.box[3:])
    if args.op == "recolor":
        if args.matrix is None:
            raise UsageError("--op recolor needs --matrix")
        model = edit_recolor(model, box, np.asarray(args.matrix).reshape(3, 3))
    else:
        model = edit_cut(model, box)
    save_model(model, args.out)
    print(f"{args.op} written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    from .gradcheck import oracle_problem, run_gradient_check

    dataset = aabb = None
    if args.data is not None:
        dataset = _load_data(args.data, cfg)
        aabb = _dataset_aabb(args.data)
    problem = oracle_problem(dataset, aabb, args.seed, args.depth, args.rays, args.samples,
                             config=cfg)
    report = run_gradient_check(problem, args.h, args.tol, args.abs_tol, args.max_params,
                                args.seed)
    print(report.summary())
    print("gradcheck=" + ("pass" if report.passed else "fail"))
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_info(args, cfg):
    model = load_model(args.model)
    svo = model.svo
    counts = np.bincount(svo.depth)
    print(f"nodes={svo.n_nodes}")
    print(f"leaves={int(np.sum(svo.children < 0))}")
    print(f"max_depth={svo.max_depth}")
    print(f"sh_bands={svo.sh_bands}")
    print(f"root_side={svo.root_side:g}")
    print(f"aabb_min={' '.join(f'{x:g}' for x in model.aabb.min)}")
    print(f"aabb_max={' '.join(f'{x:g}' for x in model.aabb.max)}")
    print(f"cube_resolution={model.background.resolution}")
    print(f"parameters={model.n_params}")
    print("nodes_per_level=" + ",".join(str(int(c)) for c in counts))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "init": cmd_init, "train": cmd_train, "render": cmd_render,
            "eval": cmd_eval, "edit": cmd_edit, "gradcheck": cmd_gradcheck, "info": cmd_info}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        _threads(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (DataError, ModelFormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"erf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"erf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
