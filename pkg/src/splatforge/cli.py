"""Command-line entry points: render a posed frame, benchmark over a camera
ring, or serve the interactive streaming loop."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import estimators, evalkit, fit, pcio, service
from .gaussians import Camera
from .rasterizer import render

_ESTIMATOR_FLAGS = {"global": "global_isotropic", "pca": "local_pca",
                    "neural": "neural"}


def apply_thread_cap() -> None:
    """SPLATFORGE_THREADS caps the worker count; it never raises it."""
    raw = os.environ.get("SPLATFORGE_THREADS")
    if raw is None:
        return
    try:
        requested = int(raw)
        if requested < 1:
            raise ValueError
    except ValueError:
        print(f"ignoring SPLATFORGE_THREADS={raw!r}: expected a positive "
              "integer", file=sys.stderr)
        return
    import numba

    numba.set_num_threads(min(requested, numba.config.NUMBA_NUM_THREADS))


def _parse_background(text: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError("background must be 'r,g,b'")
    values = tuple(float(p) for p in parts)
    if not all(0.0 <= v <= 1.0 for v in values):
        raise ValueError("background components must lie in [0, 1]")
    return values


def _estimate(cloud, args):
    """Run the configured estimator, returning (splats, preprocess seconds)."""
    kind = _ESTIMATOR_FLAGS[args.estimator]
    if kind == "neural" and args.weights is None:
        print("no --weights given; neural estimator falls back to random "
              "weights (seed 0)", file=sys.stderr)
    cfg = estimators.EstimatorConfig(kind=kind, sigma_multiplier=args.sigma_mult,
                                     weights_path=args.weights)
    start = time.perf_counter()
    splats = estimators.run_estimator(cloud, cfg)
    return splats, time.perf_counter() - start


def _framing_sphere(positions: np.ndarray):
    centroid = positions.mean(axis=0)
    radius = float(np.linalg.norm(positions - centroid, axis=1).max())
    return centroid, max(radius, 1e-6)


def default_pose(positions: np.ndarray, mode: str,
                 resolution: int = 512) -> service.PoseMessage:
    """Head-on view from 3 bounding radii out; the cloud's bounding sphere
    projects to ~50% of the frame width."""
    centroid, radius = _framing_sphere(positions)
    distance = 3.0 * radius
    focal = 0.25 * resolution * np.sqrt(distance ** 2 - radius ** 2) / radius
    translation = np.array([0.0, 0.0, distance]) - centroid
    return service.PoseMessage((1.0, 0.0, 0.0, 0.0), tuple(translation),
                               focal, focal, resolution, resolution, mode)


def circle_cameras(positions: np.ndarray, n_views: int, resolution: int) -> list:
    """Cameras on a ring around the centroid (y axis), all looking inward;
    centers are exactly equidistant from the centroid by construction."""
    centroid, radius = _framing_sphere(positions)
    distance = 3.0 * radius
    focal = 0.25 * resolution * np.sqrt(distance ** 2 - radius ** 2) / radius
    offset = np.array([0.0, 0.0, distance])
    cams = []
    for k in range(n_views):
        theta = 2.0 * np.pi * k / n_views
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        cams.append(Camera(rot, offset - rot @ centroid, focal, focal,
                           resolution / 2.0, resolution / 2.0,
                           resolution, resolution))
    return cams


def cmd_render(args) -> int:
    cloud = pcio.load_ply(args.input)
    splats, preprocess_s = _estimate(cloud, args)
    if args.camera is not None:
        with open(args.camera, "r", encoding="utf-8") as fh:
            pose = service.parse_pose(json.load(fh), require_sequence=False)
        if args.mode is not None:
            pose = replace(pose, mode=args.mode)
    else:
        pose = default_pose(splats.centers, args.mode or "rgb")
    background = _parse_background(args.background)
    start = time.perf_counter()
    rgba = service.render_pose(splats, pose, background)
    render_s = time.perf_counter() - start

    from PIL import Image

    Image.fromarray(rgba, "RGBA").save(args.out)
    print(f"preprocess_ms={preprocess_s * 1e3:.3f} render_ms={render_s * 1e3:.3f}")
    return 0


def cmd_bench(args) -> int:
    if (args.scene is None) == (args.input is None):
        print("bench needs exactly one of --input or --scene", file=sys.stderr)
        return 2
    callback = None
    if args.scene is not None:
        cloud, callback = evalkit.make_scene(args.scene, args.points, args.seed)
    else:
        cloud = pcio.load_ply(args.input)
    background = _parse_background(args.background)
    splats, preprocess_s = _estimate(cloud, args)
    cams = circle_cameras(cloud.positions, args.views, args.resolution)

    if args.iterations > 0:
        if callback is None:
            print("--iterations needs --scene for its training targets",
                  file=sys.stderr)
            return 2
        views = []
        for cam in cams:
            ref = callback(cam, background)
            views.append(fit.TrainView(cam, ref.rgb, ref.normal))
        splats, _ = fit.fit_scene(splats, views,
                                  fit.FitConfig(iterations=args.iterations))

    render_ms = []
    psnrs = []
    for index, cam in enumerate(cams):
        start = time.perf_counter()
        fb = render(splats, cam, "rgb", background)
        render_ms.append((time.perf_counter() - start) * 1e3)
        if callback is None:
            continue
        ref = callback(cam, background)
        view_psnr = evalkit.psnr(fb.rgb, ref.rgb)
        psnrs.append(view_psnr)
        scored = evalkit.ms_ssim(fb.rgb, ref.rgb) if args.resolution >= 176 else None
        report = evalkit.MetricReport(
            view_psnr, scored, evalkit.hole_ratio(fb, ref.silhouette),
            metadata={"view": index, "scene": args.scene, "points": args.points,
                      "seed": args.seed, "resolution": args.resolution,
                      "background": list(background),
                      "estimator": _ESTIMATOR_FLAGS[args.estimator],
                      "iterations": args.iterations})
        print(report.to_json())

    aggregate = {"views": args.views,
                 "preprocess_ms": preprocess_s * 1e3,
                 "render_ms_mean": float(np.mean(render_ms)),
                 "render_ms_p50": float(np.percentile(render_ms, 50)),
                 "render_ms_p99": float(np.percentile(render_ms, 99))}
    if psnrs:
        mean_psnr = float(np.mean(psnrs))
        aggregate["psnr_db_mean"] = "inf" if np.isinf(mean_psnr) else mean_psnr
    print(json.dumps(aggregate))
    return 0


def cmd_serve(args) -> int:
    cloud = pcio.load_ply(args.input)
    splats, preprocess_s = _estimate(cloud, args)
    server = service.start_server(splats, int(preprocess_s * 1e6),
                                  args.host, args.port)
    # getsockname, not args.port: --port 0 binds an ephemeral port
    port = server.socket.getsockname()[1]
    print(f"serving {len(splats)} splats on {args.host}:{port}",
          file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatforge",
        description="point clouds in, splat renders out")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--estimator", choices=sorted(_ESTIMATOR_FLAGS),
                        default="pca")
    common.add_argument("--weights", default=None,
                        help="network weights file for --estimator neural")
    common.add_argument("--sigma-mult", dest="sigma_mult", type=float,
                        default=1.5)
    common.add_argument("--background", default="0,0,0",
                        help="'r,g,b' components in [0, 1]")

    p_render = sub.add_parser("render", parents=[common],
                              help="render one posed frame to PNG")
    p_render.add_argument("--input", required=True)
    p_render.add_argument("--camera", default=None,
                          help="JSON pose file; defaults to a head-on framing")
    p_render.add_argument("--mode", choices=sorted(service.MODE_CODES),
                          default=None)
    p_render.add_argument("--out", required=True)

    p_bench = sub.add_parser("bench", parents=[common],
                             help="latency and quality over a camera ring")
    p_bench.add_argument("--input", default=None)
    p_bench.add_argument("--scene", choices=evalkit.SCENE_KINDS, default=None,
                         help="analytic scene with reference scoring")
    p_bench.add_argument("--points", type=int, default=50000)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--views", type=int, default=12)
    p_bench.add_argument("--resolution", type=int, default=512)
    p_bench.add_argument("--iterations", type=int, default=0,
                         help="refinement steps against the scene references")

    p_serve = sub.add_parser("serve", parents=[common],
                             help="stream frames for posed requests")
    p_serve.add_argument("--input", required=True)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8765)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    apply_thread_cap()
    command = {"render": cmd_render, "bench": cmd_bench,
               "serve": cmd_serve}[args.command]
    try:
        return command(args)
    except FileNotFoundError as exc:
        name = exc.filename if exc.filename is not None else exc
        print(f"input file not found: {name}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(str(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
