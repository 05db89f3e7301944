"""Command-line entry points: gen, train, render, eval, gradcheck."""
from __future__ import annotations

import os

# Pin BLAS threading before numpy loads anywhere in this process: tiny
# matrices gain nothing from threads and single-threaded runs are the
# documented determinism mode.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointsplat",
                                description="Point-feature-aware Gaussian splatting workbench")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--gaussians", type=int, default=200)
    g.add_argument("--views", type=int, default=12)
    g.add_argument("--train-views", type=int, default=3)
    g.add_argument("--size", type=int, default=64)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--k", type=int, default=None, dest="knn_k",
                   help="attention neighborhood size (0 disables interaction)")
    t.add_argument("--no-interaction", action="store_true",
                   help="shorthand for --k 0")
    t.add_argument("--fusion", choices=("variance", "mean"), default=None)
    t.add_argument("--pe-bands", type=int, default=None, dest="pe_bands")
    t.add_argument("--color", choices=("learned", "sh"), default=None, dest="color_mode")
    t.add_argument("--sh-degree", type=int, default=None, dest="sh_degree")
    t.add_argument("--no-depth-loss", action="store_true")
    t.add_argument("--no-smooth-loss", action="store_true")
    t.add_argument("--quiet", action="store_true")

    r = sub.add_parser("render", help="render a view from a checkpoint")
    r.add_argument("--data", required=True, help="dataset dir (cameras)")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True, help="output prefix (writes <out>.png, <out>_depth.png)")
    view = r.add_mutually_exclusive_group(required=True)
    view.add_argument("--view", type=int, default=None, help="camera id")
    view.add_argument("--sweep", type=float, default=None,
                      help="interpolated pose parameter t in [0,1]")
    r.add_argument("--debug-tiles", default=None, help="dump per-tile splat counts")

    e = sub.add_parser("eval", help="evaluate a checkpoint on dataset views")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", default=None, help="metrics.json path (default: <data>/metrics.json)")
    e.add_argument("--split", choices=("test", "train"), default="test")

    c = sub.add_parser("gradcheck", help="run the finite-difference suites")
    c.add_argument("--seed", type=int, default=3)
    return p


def cmd_gen(args) -> int:
    from . import io as pio
    from . import synthetic

    _, dataset = synthetic.gen_scene(args.seed, n_gaussians=args.gaussians,
                                     n_views=args.views, n_train=args.train_views,
                                     size=args.size)
    pio.save_dataset(args.out, dataset)
    print(f"wrote {dataset.n_views} views ({len(dataset.train_ids)} train) to {args.out}")
    return 0


def cmd_train(args) -> int:
    from . import io as pio
    from .config import load_config
    from .training import train

    overrides = {k: getattr(args, k) for k in
                 ("iters", "seed", "knn_k", "fusion", "pe_bands", "color_mode", "sh_degree")}
    if args.no_interaction:
        overrides["knn_k"] = 0
    if args.no_depth_loss:
        overrides["lambda3"] = 0.0
    if args.no_smooth_loss:
        overrides["lambda4"] = 0.0
    cfg = load_config(args.config, overrides)
    dataset = pio.load_dataset(args.data)
    result = train(dataset, cfg, args.out, quiet=args.quiet)
    print(f"checkpoint: {result['checkpoint']}")
    print(f"metrics:    {result['metrics_csv']}")
    return 0


def _slerp(qa: np.ndarray, qb: np.ndarray, t: float) -> np.ndarray:
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb, dot = -qb, -dot
    if dot > 0.9995:
        q = qa + t * (qb - qa)
        return q / np.linalg.norm(q)
    ang = np.arccos(np.clip(dot, -1.0, 1.0))
    return (np.sin((1 - t) * ang) * qa + np.sin(t * ang) * qb) / np.sin(ang)


def _rot_to_quat(R: np.ndarray) -> np.ndarray:
    w = np.sqrt(max(0.0, 1.0 + R[0, 0] + R[1, 1] + R[2, 2])) / 2.0
    if w > 1e-8:
        x = (R[2, 1] - R[1, 2]) / (4 * w)
        y = (R[0, 2] - R[2, 0]) / (4 * w)
        z = (R[1, 0] - R[0, 1]) / (4 * w)
    else:  # fall back on the dominant diagonal term
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(0.0, 1.0 + R[i, i] - R[j, j] - R[k, k])) * 2.0
        q = np.zeros(4)
        q[1 + i] = s / 4
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
        return q / np.linalg.norm(q)
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q)


def interpolate_pose(cameras, t: float):
    """SLERP rotations / lerp centers along the camera path, t in [0, 1]."""
    from .scene import Camera, quat_to_rot

    cams = sorted(cameras, key=lambda c: c.cam_id)
    t = float(np.clip(t, 0.0, 1.0))
    seg = t * (len(cams) - 1)
    i = min(int(seg), len(cams) - 2)
    frac = seg - i
    ca, cb = cams[i], cams[i + 1]
    q = _slerp(_rot_to_quat(ca.rotation), _rot_to_quat(cb.rotation), frac)
    R = quat_to_rot(q)
    center = (1 - frac) * ca.center + frac * cb.center
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ center
    return Camera(world_to_cam=w2c, fx=ca.fx, fy=ca.fy, cx=ca.cx, cy=ca.cy,
                  width=ca.width, height=ca.height, cam_id=-1)


def cmd_render(args) -> int:
    from . import io as pio
    from . import raster
    from .training import load_checkpoint

    dataset = pio.load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    if args.view is not None:
        matches = [c for c in dataset.cameras if c.cam_id == args.view]
        if not matches:
            raise ValueError(f"no camera with id {args.view}")
        cam = matches[0]
    else:
        cam = interpolate_pose(dataset.cameras, args.sweep)

    rgb, opac, sigma, _ = model.decode_attributes(cam)
    image, depth, weight = raster.render(
        model.cloud.mu, sigma, rgb, opac, cam,
        background=np.asarray(model.config.background),
        tile_debug=args.debug_tiles)
    img, dep, wgt = image.data, depth.data, weight.data

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pio.write_image(out.with_suffix(".png"), np.clip(img, 0, 1))
    covered = wgt > 1e-4
    norm = np.where(covered, dep / np.where(covered, wgt, 1.0), 0.0)
    lo, hi = (norm[covered].min(), norm[covered].max()) if covered.any() else (0.0, 1.0)
    vis = np.where(covered, (norm - lo) / max(hi - lo, 1e-9), 0.0)
    pio.write_image(Path(str(out) + "_depth.png"), np.repeat(vis[:, :, None], 3, axis=2))
    print(f"wrote {out.with_suffix('.png')}")
    return 0


def cmd_eval(args) -> int:
    from . import io as pio
    from . import metrics
    from .training import load_checkpoint

    dataset = pio.load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    ids = dataset.test_ids if args.split == "test" else dataset.train_ids
    rows = []
    for i in ids:
        img, _, _ = model.render_view(dataset.cameras[i])
        img = np.clip(img, 0.0, 1.0)
        rows.append({"id": i,
                     "psnr": metrics.psnr(img, dataset.images[i]),
                     "ssim": metrics.ssim(img, dataset.images[i])})
    summary = {
        "split": args.split,
        "views": rows,
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
        "n_views": len(rows),
    }
    out = Path(args.out) if args.out else Path(args.data) / "metrics.json"
    out.write_text(json.dumps(summary, indent=1))
    print(f"{'view':>5} {'psnr':>8} {'ssim':>7}")
    for r in rows:
        print(f"{r['id']:>5} {r['psnr']:>8.2f} {r['ssim']:>7.3f}")
    print(f"mean psnr {summary['mean_psnr']:.2f}  mean ssim {summary['mean_ssim']:.3f}")
    print(f"wrote {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    return 0 if run_all(seed=args.seed) else 1


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {"gen": cmd_gen, "train": cmd_train, "render": cmd_render,
                "eval": cmd_eval, "gradcheck": cmd_gradcheck}
    try:
        return handlers[args.command](args)
    except Exception as err:  # runtime failures exit 1 with a message
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
