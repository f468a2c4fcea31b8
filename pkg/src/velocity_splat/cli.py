"""Command-line entry point: ``velocity-splat <subcommand> ...``.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .deformation import TimeStamp
from .ekf import NoiseModel, refine_trajectories, write_trajectories
from .errors import DataError, NonFiniteLoss, SingularInnovation, SingularJacobian
from .io import flow_to_color, read_flo, write_flo, write_ppm
from .metrics import compare_datasets, evaluate
from .rasterizer import render
from .synthetic import (load_dataset, make_scene, recipe_from_dict, recipe_to_dict, synthesize,
                        two_group_recipe, write_dataset)
from .train import Checkpoint, TrainConfig, run

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _frames(spec: str, n_frames: int) -> list[int]:
    if spec in (None, "all"):
        return list(range(n_frames))
    out = []
    for part in spec.split(","):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    bad = [k for k in out if not 0 <= k < n_frames]
    if bad:
        raise DataError(f"frames {bad} outside 0..{n_frames - 1}")
    return out


def _ints(spec: str) -> list[int]:
    return [int(s) for s in spec.split(",") if s.strip()]


# -- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.config:
        recipe = recipe_from_dict(_read_json(args.config))
        if args.seed is not None:
            recipe.seed = args.seed
    else:
        recipe = two_group_recipe(seed=0 if args.seed is None else args.seed)
    scene, spec, cams = make_scene(recipe)
    ds = synthesize(scene, spec, cams, workers=args.workers)
    write_dataset(ds, args.out)
    (Path(args.out) / "recipe.json").write_text(json.dumps(recipe_to_dict(recipe), indent=1) + "\n")
    print(f"wrote {ds.n_views} views x {ds.n_frames} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations
    ds = load_dataset(args.dataset)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    ckpt, log = run(cfg, ds, out_dir=args.out, workers=args.workers)
    last = log.rows[-1] if log.rows else {}
    print(f"trained {ckpt.iteration} iterations, {len(ckpt.scene)} Gaussians, final loss {last.get('total', float('nan')):.6g}")
    return 0


def cmd_render(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    ds = load_dataset(args.dataset)
    if not 0 <= args.camera < ds.n_views:
        raise DataError(f"camera {args.camera} outside 0..{ds.n_views - 1}")
    cam = ds.cameras[args.camera]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = ds.n_frames
    with torch.no_grad():
        for k in _frames(args.frames, n):
            buf = render(ckpt.scene, ckpt.field, TimeStamp.frame(k, n), cam, with_velocity=k < n - 1)
            write_ppm(out / f"frame_{k:04d}.ppm", buf.color.numpy())
            if buf.velocity is not None:
                vel = buf.velocity.numpy()
                write_flo(out / f"velocity_{k:04d}.flo", vel)
                write_ppm(out / f"velocity_{k:04d}.ppm", flow_to_color(vel))
    print(f"rendered camera {args.camera} to {out}")
    return 0


def cmd_refine(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    ds = load_dataset(args.dataset)
    noise = NoiseModel()
    if args.config:
        d = _read_json(args.config)
        noise = NoiseModel(**{k: np.asarray(v, dtype=np.float64) if isinstance(v, list) else v for k, v in d.items()})
    views = _ints(args.cameras) if args.cameras else list(range(ds.n_views))
    n = ds.n_frames
    cams = [ds.cameras[v] for v in views]
    with torch.no_grad():
        depths = [[render(ckpt.scene, ckpt.field, TimeStamp.frame(k, n), c, with_velocity=False).depth.numpy()
                   for k in range(n)] for c in cams]
    flows = [ds.flows[v] for v in views]
    res = refine_trajectories(ckpt.scene, ckpt.field, cams, flows, depths, noise, n_frames=n, workers=args.workers)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_trajectories(args.out, res)
    print(f"refined {res.positions.shape[0]} trajectories over {n} frames to {args.out}")
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.dataset)
    cams = _ints(args.cameras)
    bad = [c for c in cams if not 0 <= c < ds.n_views]
    if bad:
        raise DataError(f"cameras {bad} outside 0..{ds.n_views - 1}")
    if args.prediction:
        report = compare_datasets(load_dataset(args.prediction), ds, cams)
    else:
        if not args.checkpoint:
            raise DataError("eval needs --checkpoint or --prediction")
        ckpt = Checkpoint.load(args.checkpoint)
        report = evaluate(ckpt.scene, ckpt.field, ds, cams)
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_flowviz(args) -> int:
    flow, valid = read_flo(args.input)
    flow = flow.astype(np.float64)
    flow[~valid] = np.nan
    write_ppm(args.out, flow_to_color(flow, args.max_flow))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="velocity-splat", description="Dynamic Gaussian splatting with flow supervision.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--workers", type=int, default=1, help="worker threads (results do not depend on it)")
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", help="scene recipe JSON (default: two-group scene)")
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a model on a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config", help="training config JSON")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--iterations", type=int, default=None)
    common(s)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("render", help="render color and velocity from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True, help="dataset supplying cameras and frame count")
    s.add_argument("--camera", type=int, default=0)
    s.add_argument("--frames", default="all", help="e.g. 0,3,5-9 or all")
    s.add_argument("--out", required=True)
    common(s, seed=False)
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("refine", help="EKF trajectory refinement")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True, help="dataset supplying cameras and flows")
    s.add_argument("--config", help="noise model JSON (Q, Rn, P0, gate)")
    s.add_argument("--cameras", default=None, help="comma-separated views (default: all)")
    s.add_argument("--out", required=True, help="trajectory JSON-lines file")
    common(s, seed=False)
    s.set_defaults(fn=cmd_refine)

    s = sub.add_parser("eval", help="evaluate held-out cameras")
    s.add_argument("--dataset", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--prediction", help="a dataset directory to score instead of a checkpoint")
    s.add_argument("--cameras", default="0")
    s.add_argument("--out", help="also write the report here")
    common(s, seed=False)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("flowviz", help="false-color image of a .flo file")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-flow", type=float, default=None)
    s.set_defaults(fn=cmd_flowviz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(1)
    try:
        return args.fn(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLoss, SingularJacobian, SingularInnovation, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
