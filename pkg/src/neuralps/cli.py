"""Command-line interface: fit, synth, eval, sphere.

Exit codes: 0 success, 1 numeric failure during optimization, 2 malformed
input/usage. fit and eval print machine-readable metrics JSON on stdout.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from . import sceneio, train
from .nets import Model
from .render import Light
from .sceneio import _write_png  # shared PNG writer


def _build_parser():
    p = argparse.ArgumentParser(
        prog="neuralps",
        description="Self-supervised photometric stereo with coordinate MLPs")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a dataset directory")
    f.add_argument("dataset_dir")
    f.add_argument("--config", help="plain key=value config file")
    f.add_argument("--out", help="output directory (default <dataset>/estimate)")
    f.add_argument("--ablate", action="append", default=[],
                   choices=["shadow", "tv", "specular"])
    f.add_argument("--seed", type=int)
    f.add_argument("--iterations", type=int)
    f.add_argument("--grayscale", action="store_true",
                   help="average channels before fitting")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("kind", choices=["sphere", "step", "composite"])
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--lights", type=int, default=16)
    s.add_argument("--material", choices=["lambertian", "specular"],
                   default="lambertian")
    s.add_argument("--block-height", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")

    e = sub.add_parser("eval", help="score an estimate against ground truth")
    e.add_argument("est_dir")
    e.add_argument("gt_dir")

    b = sub.add_parser("sphere", help="re-render a BRDF sphere for one pixel")
    b.add_argument("est_dir")
    b.add_argument("--pixel", required=True, metavar="X,Y")
    b.add_argument("--light", required=True, metavar="LX,LY,LZ",
                   help="dataset-convention light direction")
    b.add_argument("--resolution", type=int, default=128)
    b.add_argument("--out")
    return p


def cmd_fit(args):
    cfg = train.FitConfig.from_file(args.config) if args.config else train.FitConfig()
    for name in args.ablate:
        setattr(cfg, f"use_{name}", False)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations

    stack = sceneio.load_dataset(args.dataset_dir, grayscale=args.grayscale)
    t0 = time.perf_counter()
    est, history, model = train.fit(stack, cfg)
    runtime = time.perf_counter() - t0

    if cfg.drop_images:
        stack = stack.drop_images(cfg.drop_images)
    gt_normal = Path(args.dataset_dir) / "normal_gt.png"
    mae_deg = None
    if gt_normal.exists():
        gt_n, gt_mask, _ = sceneio.load_gt(args.dataset_dir)
        mae_deg = metrics_mod.mae(est.normals, gt_n, gt_mask & est.mask)
    psnr_mean, _ = metrics_mod.mean_rerender_psnr(est.rerendered, stack.images,
                                                  stack.mask)
    report = {
        "mae_deg": mae_deg,
        "psnr_db": psnr_mean,
        "runtime_s": runtime,
        "config_echo": train.config_echo(cfg),
    }
    out = Path(args.out) if args.out else Path(args.dataset_dir) / "estimate"
    sceneio.export_maps(est, out, metrics=report)
    train.write_history(history, out / "loss_history.csv")
    model.save(out / "params.bin")
    cfg.to_file(out / "config.txt")
    print(json.dumps(report))
    return 0


def cmd_synth(args):
    size, lights, seed = args.size, args.lights, args.seed
    if args.kind == "sphere":
        scene, stack = sceneio.make_sphere_scene(size, size, lights,
                                                 args.material, seed)
    elif args.kind == "step":
        bh = args.block_height if args.block_height else 0.18 * size
        scene = sceneio.make_step_scene(size, size, bh, lights, seed)
        stack = scene.render_stack()
    else:
        scene, stack = sceneio.make_composite_scene(size, size, lights, seed,
                                                    args.material)
    out = Path(args.out) if args.out else Path(f"synth_{args.kind}")
    sceneio.save_scene(scene, stack, out)
    print(str(out))
    return 0


def cmd_eval(args):
    t0 = time.perf_counter()
    est_dir = Path(args.est_dir)
    stack = sceneio.load_dataset(args.gt_dir)
    gt_n, gt_mask, _ = sceneio.load_gt(args.gt_dir)
    est_img = sceneio._read_png(est_dir / "normal.png")
    est_n = sceneio.decode_normal_map(est_img, gt_mask)
    mae_deg = metrics_mod.mae(est_n, gt_n, gt_mask)
    psnrs = []
    for i in range(stack.n_images):
        path = est_dir / f"rerender_{i:02d}.png"
        if not path.exists():
            break
        psnrs.append(metrics_mod.psnr(sceneio._read_png(path), stack.images[i],
                                      gt_mask))
    import math

    finite = [v for v in psnrs if math.isfinite(v)]
    report = {
        "mae_deg": mae_deg,
        "psnr_db": float(np.mean(finite)) if finite else None,
        "runtime_s": time.perf_counter() - t0,
    }
    (est_dir / "eval_metrics.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report))
    return 0


def cmd_sphere(args):
    est_dir = Path(args.est_dir)
    model = Model.load(est_dir / "params.bin")
    meta = model.store.meta
    try:
        px, py = (int(v) for v in args.pixel.split(","))
        lx, ly, lz = (float(v) for v in args.light.split(","))
    except ValueError:
        raise ValueError("--pixel expects X,Y and --light expects LX,LY,LZ")
    H, W = int(meta["H"]), int(meta["W"])
    if not (0 <= px < W and 0 <= py < H):
        raise ValueError(f"pixel {px},{py} outside {W}x{H} image")
    coords = np.array([[(px + 0.5) / W * 2 - 1, (py + 0.5) / H * 2 - 1]])
    _, rho, c = model.eval_surface(coords, np.asarray(meta["color_stats"]))
    d = sceneio.to_internal([lx, ly, lz])
    d = d / np.linalg.norm(d)
    img = metrics_mod.render_brdf_sphere(rho[0], c[0], model.basis, Light(d),
                                         args.resolution, normalize=True)
    out = Path(args.out) if args.out else est_dir / f"brdf_sphere_{px}_{py}.png"
    _write_png(out, img, bits=8)
    print(str(out))
    return 0


_COMMANDS = {"fit": cmd_fit, "synth": cmd_synth, "eval": cmd_eval,
             "sphere": cmd_sphere}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except train.FitDivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
