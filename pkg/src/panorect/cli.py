"""Command line: ``panorect stitch | fixture | validate``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .energy import EnergyWeights
from .errors import InvalidInputError, PanorectError
from .fixtures import LAYOUTS, generate_fixture, write_fixture
from .pipeline import MODES, PipelineConfig, run
from .render import largest_interior_rectangle, render_at_full_resolution, save_mask, save_png
from .scene import load_project, validate_manifest
from .video import BLOCK, OVERLAP, stitch_video

log = logging.getLogger("panorect")

EXIT_CODES = {"config": 2, "data": 3, "solver": 4, "geometry": 4}
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


def _positive(kind=float):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}")
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
        return v
    return parse


def _nonnegative(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative: {text!r}")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InvalidInputError(message)


def build_parser() -> argparse.ArgumentParser:
    w = EnergyWeights()
    p = _Parser(prog="panorect", description="Panorama stitching with piecewise rectangular boundaries.")
    p.add_argument("--version", action="version", version=f"panorect {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("stitch", help="stitch the images of a manifest")
    s.add_argument("--manifest", required=True, help="project manifest (JSON), or a video manifest listing frames")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--mode", choices=MODES, default="piecewise")
    s.add_argument("--gamma-a", type=_positive(), default=w.alignment, help="feature alignment weight")
    s.add_argument("--gamma-s", type=_nonnegative, default=w.shape, help="shape preservation weight")
    s.add_argument("--gamma-g", type=_nonnegative, default=w.similarity, help="global similarity weight")
    s.add_argument("--gamma-r", type=_nonnegative, default=w.boundary, help="regular boundary weight")
    s.add_argument("--gamma-l", type=_nonnegative, default=w.line, help="line preservation weight")
    s.add_argument("--grid-cell", type=_positive(), default=40.0, help="mesh cell size in pixels")
    s.add_argument("--no-refine", action="store_true", help="skip step removal")
    s.add_argument("--accept-ratio", type=_positive(), default=0.05,
                   help="largest relative energy increase accepted per removed step")
    s.add_argument("--downsample-mp", type=_positive(), default=0.5, help="solve at this many megapixels per image")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--video-block", type=_positive(int), default=BLOCK, help="frames per block")
    s.add_argument("--video-overlap", type=_positive(int), default=OVERLAP, help="frames shared by adjacent blocks")
    s.add_argument("--no-render", action="store_true", help="write the report only")

    f = sub.add_parser("fixture", help="write a synthetic test scene")
    f.add_argument("--layout", choices=LAYOUTS, default="pair")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--noise", type=_nonnegative, default=None, help="match noise in pixels")
    f.add_argument("--out", required=True)

    v = sub.add_parser("validate", help="list every problem in a manifest")
    v.add_argument("--manifest", required=True)
    return p


def config_from_args(a) -> PipelineConfig:
    weights = EnergyWeights(a.gamma_a, a.gamma_s, a.gamma_g, a.gamma_r, a.gamma_l)
    return PipelineConfig(weights=weights, grid_cell=a.grid_cell, refine=not a.no_refine,
                          accept_ratio=a.accept_ratio, downsample_mp=a.downsample_mp, seed=a.seed)


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _stitch(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    config = config_from_args(a)
    with open(a.manifest) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{a.manifest}: not JSON ({exc})")
    if isinstance(doc, dict) and "frames" in doc:
        return _stitch_video(a, doc, config, out)
    scene = load_project(a.manifest)
    result = run(scene, config, a.mode)
    report = result.report
    doc = {"version": __version__, "manifest": os.path.abspath(a.manifest), "seed": a.seed,
           "config": _config_json(config)}
    if not a.no_render:
        t0 = time.perf_counter()
        pano = render_at_full_resolution(scene, result.final)
        report.crop = list(largest_interior_rectangle(pano.coverage))
        save_png(out / "panorama.png", pano)
        save_mask(out / "coverage.png", pano.coverage)
        report.timings["render"] = time.perf_counter() - t0
        doc["origin"] = list(pano.origin)
    doc.update(report.to_json())
    _write_json(out / "report.json", doc)
    np.savez(out / "vertices.npz", **{f"image_{k}": v for k, v in sorted(result.final.vertices().items())})
    log.info("wrote %s", out)
    return 0


def _stitch_video(a, doc, config, out) -> int:
    base = Path(a.manifest).parent
    frames = [load_project(base / p) for p in doc["frames"]]
    res = stitch_video(frames, a.video_block, a.video_overlap, config, a.mode)
    sched = res.schedule
    frames_json = []
    for f in range(sched.n_frames):
        k, k1, w = sched.weights(f)
        frames_json.append({"frame": f, "block": k, "next_block": k1, "w": w})
        if not a.no_render:
            meshes = res.frame_meshes(f)
            state = res.blocks[0].final
            pano = render_at_full_resolution(frames[f], type(state)(meshes, 0.0, {}, 0, None, state.scale_factors))
            (out / "frames").mkdir(exist_ok=True)
            save_png(out / "frames" / f"frame_{f:04d}.png", pano)
    report = {"version": __version__, "config": _config_json(config), "block": sched.block,
              "overlap": sched.overlap, "block_starts": sched.starts, "frames": frames_json,
              "blocks": [b.report.to_json(timings=False) for b in res.blocks]}
    _write_json(out / "report.json", report)
    np.savez(out / "video_vertices.npz",
             **{f"frame_{f}_image_{k}": v for f, verts in enumerate(res.vertices) for k, v in sorted(verts.items())})
    return 0


def _config_json(c: PipelineConfig):
    w = c.weights
    return {"gamma_a": w.alignment, "gamma_s": w.shape, "gamma_g": w.similarity, "gamma_r": w.boundary,
            "gamma_l": w.line, "grid_cell": c.grid_cell, "refine": c.refine, "accept_ratio": c.accept_ratio,
            "downsample_mp": c.downsample_mp}


def _fixture(a) -> int:
    fx = generate_fixture(a.layout, seed=a.seed, noise=a.noise)
    path = write_fixture(fx, a.out, seed=a.seed)
    print(path)
    return 0


def _validate(a) -> int:
    diags = validate_manifest(a.manifest)
    for d in diags:
        print(f"{d.kind}: {d.message}")
    if not diags:
        print("ok")
    return 0 if not diags else EXIT_CODES["data"]


def main(argv=None) -> int:
    level = os.environ.get("PANORECT_LOG", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command == "stitch":
            return _stitch(args)
        if args.command == "fixture":
            return _fixture(args)
        return _validate(args)
    except PanorectError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 4)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error [data]: {exc}", file=sys.stderr)
        return EXIT_CODES["data"]


if __name__ == "__main__":
    sys.exit(main())
