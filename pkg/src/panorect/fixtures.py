"""Seeded synthetic scenes with known ground-truth warps.

Every image is a window onto one procedural "world" texture.  Image ``i`` maps
into the world through a 3x3 matrix (a similarity or a homography), so exact
matches, straight lines and the warp each image should receive all follow
from the layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .errors import FixtureError
from .scene import FeatureMatchSet, ImageRecord, Scene, save_project


def similarity(scale=1.0, angle_deg=0.0, tx=0.0, ty=0.0) -> np.ndarray:
    c, s = math.cos(math.radians(angle_deg)), math.sin(math.radians(angle_deg))
    return np.array([[scale * c, -scale * s, tx], [scale * s, scale * c, ty], [0.0, 0.0, 1.0]])


def apply(M, pts) -> np.ndarray:
    p = np.asarray(pts, dtype=float).reshape(-1, 2)
    h = p @ M[:2, :2].T + M[:2, 2]
    w = p @ M[2, :2] + M[2, 2]
    return h / w[:, None]


@dataclass
class FixtureImage:
    width: int
    height: int
    to_world: np.ndarray  # 3x3, image -> world
    face_boxes: list = field(default_factory=list)


@dataclass
class LayoutSpec:
    name: str
    images: list
    n_matches: int = 60
    noise: float = 0.0
    margin: float = 4.0  # keep matches this far inside the overlap
    lines: list = field(default_factory=list)  # world segments [x0, y0, x1, y1]
    required: list = field(default_factory=list)  # image pairs that must overlap
    min_overlap: float = 0.02
    match_box: tuple | None = None  # world rectangle (x0, y0, x1, y1) that matches must fall in


@dataclass(eq=False)
class Fixture:
    scene: Scene
    spec: LayoutSpec
    truth: dict  # image id -> 3x3 map into the reference image frame
    world_lines: list

    def true_positions(self, image_id, points) -> np.ndarray:
        return apply(self.truth[image_id], points)

    def ground_truth_json(self):
        return {"layout": self.spec.name,
                "warps": {str(k): np.round(v, 12).tolist() for k, v in sorted(self.truth.items())}}


def footprint(img: FixtureImage) -> np.ndarray:
    c = np.array([[0, 0], [img.width, 0], [img.width, img.height], [0, img.height]], dtype=float)
    return apply(img.to_world, c)


def overlap_polygon(a: FixtureImage, b: FixtureImage):
    area, poly = cv2.intersectConvexConvex(footprint(a).astype(np.float32), footprint(b).astype(np.float32))
    if poly is None or area <= 0:
        return 0.0, None
    return float(area), poly.reshape(-1, 2).astype(float)


def overlap_fraction(a, b) -> float:
    area, _ = overlap_polygon(a, b)
    return area / min(a.width * a.height, b.width * b.height)


def _sample_overlap(rng, poly, n, margin, box=None):
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    if box is not None:
        lo, hi = np.maximum(lo, box[:2]), np.minimum(hi, box[2:])
        if np.any(hi <= lo):
            raise FixtureError("match box misses the overlap region")
    contour = poly.astype(np.float32).reshape(-1, 1, 2)
    out = []
    tries = 0
    while len(out) < n and tries < 200 * n:
        tries += 1
        p = lo + rng.random(2) * (hi - lo)
        if cv2.pointPolygonTest(contour, (float(p[0]), float(p[1])), True) < margin:
            continue
        out.append(p)
    if len(out) < n:
        raise FixtureError("overlap region too small for the requested matches")
    return np.array(out)


def world_texture(rng, n_waves=14):
    """Random smooth colour field: a sum of oriented sinusoids per channel."""
    freq = rng.uniform(1 / 160.0, 1 / 18.0, size=(3, n_waves))
    ang = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
    phase = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
    amp = rng.uniform(0.4, 1.0, size=(3, n_waves))

    def sample(xy):
        out = np.empty(xy.shape[:-1] + (3,))
        for ch in range(3):
            acc = np.zeros(xy.shape[:-1])
            for k in range(n_waves):
                d = np.cos(ang[ch, k]) * xy[..., 0] + np.sin(ang[ch, k]) * xy[..., 1]
                acc += amp[ch, k] * np.sin(2 * np.pi * freq[ch, k] * d + phase[ch, k])
            out[..., ch] = acc / amp[ch].sum()
        return np.clip(127.5 + 120 * out, 0, 255)

    return sample


def render_image(img: FixtureImage, texture, world_lines=()) -> np.ndarray:
    ys, xs = np.mgrid[0:img.height, 0:img.width]
    pix = np.stack([xs + 0.5, ys + 0.5], axis=-1).reshape(-1, 2)
    world = apply(img.to_world, pix).reshape(img.height, img.width, 2)
    rgb = texture(world)
    if len(world_lines):
        inv = np.linalg.inv(img.to_world)
        for seg in world_lines:
            ends = apply(inv, np.reshape(seg, (2, 2)))
            pts = np.round(ends * 16).astype(np.int32)
            cv2.line(rgb, tuple(pts[0]), tuple(pts[1]), (20, 20, 20), 2, cv2.LINE_AA, shift=4)
    return rgb.astype(np.uint8)


def clip_segment(seg, width, height):
    """Part of segment ``seg`` inside ``[0, width] x [0, height]`` (Liang-Barsky), or None."""
    x0, y0, x1, y1 = map(float, seg)
    dx, dy = x1 - x0, y1 - y0
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, x0), (dx, width - x0), (-dy, y0), (dy, height - y0)):
        if p == 0:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return None
    return [x0 + t0 * dx, y0 + t0 * dy, x0 + t1 * dx, y0 + t1 * dy]


def build_fixture(spec: LayoutSpec, seed=0) -> Fixture:
    rng = np.random.default_rng(seed)
    imgs = spec.images
    n = len(imgs)
    for i, j in spec.required:
        if overlap_fraction(imgs[i], imgs[j]) <= 0:
            raise FixtureError(f"required pair ({i}, {j}) does not overlap")
    records = [ImageRecord(k, f"image_{k}.png", im.width, im.height, [list(map(float, b)) for b in im.face_boxes])
               for k, im in enumerate(imgs)]
    inv = [np.linalg.inv(im.to_world) for im in imgs]
    matches = []
    for i in range(n):
        for j in range(i + 1, n):
            if overlap_fraction(imgs[i], imgs[j]) < spec.min_overlap:
                continue
            _, poly = overlap_polygon(imgs[i], imgs[j])
            box = None if spec.match_box is None else np.asarray(spec.match_box, dtype=float)
            world = _sample_overlap(rng, poly, spec.n_matches, spec.margin, box)
            pi, pj = apply(inv[i], world), apply(inv[j], world)
            if spec.noise > 0:
                pi = pi + rng.normal(0, spec.noise, pi.shape)
                pj = pj + rng.normal(0, spec.noise, pj.shape)
            ok = _in_bounds(pi, imgs[i]) & _in_bounds(pj, imgs[j])
            matches.append(FeatureMatchSet(i, j, np.hstack([pi[ok], pj[ok]])))
    lines = {}
    for k, im in enumerate(imgs):
        segs = []
        for seg in spec.lines:
            local = apply(inv[k], np.reshape(seg, (2, 2))).ravel()
            c = clip_segment(local, im.width, im.height)
            if c is not None and math.hypot(c[2] - c[0], c[3] - c[1]) > 1.0:
                segs.append(c)
        if segs:
            lines[k] = np.array(segs)
    scene = Scene(records, matches, lines, reference=0, reference_angle=0.0)
    truth = {k: inv[0] @ im.to_world for k, im in enumerate(imgs)}
    return Fixture(scene, spec, truth, list(spec.lines))


def _in_bounds(p, im):
    return (p[:, 0] >= 0) & (p[:, 0] <= im.width) & (p[:, 1] >= 0) & (p[:, 1] <= im.height)


# ---------------------------------------------------------------------------
# named layouts

def _grid_images(size, placements):
    w, h = size
    return [FixtureImage(w, h, similarity(*p)) for p in placements]


def layout(name: str, noise=0.0) -> LayoutSpec:
    """Named layouts used by the tests, the acceptance suite and the CLI."""
    if name == "pair":
        imgs = _grid_images((400, 300), [(1, 0, 0, 0), (1, 0, 280, 0)])
        return LayoutSpec(name, imgs, noise=noise, required=[(0, 1)])
    if name == "pair-similarity":
        imgs = _grid_images((400, 300), [(1, 0, 0, 0), (1.1, 6.0, 250, -10)])
        return LayoutSpec(name, imgs, noise=noise, required=[(0, 1)])
    if name == "2x2":
        imgs = _grid_images((400, 300), [(1, 0, 0, 0), (1, 1.5, 300, 12),
                                         (1, -1.0, 8, 220), (1, 0.5, 310, 236)])
        return LayoutSpec(name, imgs, noise=noise, required=[(0, 1), (0, 2), (1, 3), (2, 3)])
    if name == "l-shape":
        imgs = _grid_images((400, 300), [(1, 0, 0, 0), (1, 0, 200, 150)])
        return LayoutSpec(name, imgs, noise=noise, margin=30.0, required=[(0, 1)])
    if name == "staircase":
        imgs = _grid_images((400, 300), [(1, 0, 0, 0), (1, 0, 220, 120), (1, 0, 440, 240)])
        return LayoutSpec(name, imgs, noise=noise, margin=20.0, required=[(0, 1), (1, 2)])
    if name == "five":
        imgs = _grid_images((800, 600), [(1, 0, 0, 0), (1, 2.0, 600, 25), (1, -1.5, 1200, -20),
                                         (1, 1.0, 1800, 30), (1, -2.0, 2400, 0)])
        return LayoutSpec(name, imgs, n_matches=80, noise=noise, required=[(0, 1), (1, 2), (2, 3), (3, 4)])
    if name == "lined":
        imgs = _grid_images((400, 300), [(1, 0, 0, 0), (1, 4.0, 260, 40)])
        lines = [[-50, 60, 700, 90], [-50, 250, 700, 280], [150, -40, 170, 500], [520, -40, 500, 500]]
        return LayoutSpec(name, imgs, noise=noise, lines=lines, required=[(0, 1)])
    if name == "portrait":
        imgs = [FixtureImage(300, 400, similarity(1, 0, 0, 0), face_boxes=[[90, 100, 120, 140]]),
                FixtureImage(400, 300, similarity(1, 3.0, 220, 90))]
        return LayoutSpec(name, imgs, noise=noise, required=[(0, 1)])
    if name == "featureless-corner":
        # tilted row whose top band carries no matches, with a corner image hanging lower
        imgs = _grid_images((800, 600), [(1, 0, 0, 0), (1, 4.0, 600, 25), (1, -3.0, 1200, -20),
                                         (1, 2.0, 1800, 30), (1, 0, 1960, 120)])
        return LayoutSpec(name, imgs, n_matches=80, noise=1.0 if noise == 0.0 else noise, margin=10.0,
                          match_box=(-1e4, 200, 1e4, 1e4), required=[(0, 1), (1, 2), (2, 3), (3, 4)])
    if name == "deep-notch":
        imgs = _grid_images((600, 450), [(1, 0, 0, 0), (1, 0, 300, 220)])
        return LayoutSpec(name, imgs, noise=noise, margin=62.0, required=[(0, 1)])
    raise FixtureError(f"unknown layout {name!r}; choose from {', '.join(LAYOUTS)}")


LAYOUTS = ("pair", "pair-similarity", "2x2", "l-shape", "staircase", "five", "lined", "portrait",
           "featureless-corner", "deep-notch")


def generate_fixture(name_or_spec, seed=0, noise=None) -> Fixture:
    spec = name_or_spec if isinstance(name_or_spec, LayoutSpec) else layout(name_or_spec)
    if noise is not None:
        spec = LayoutSpec(**{**vars(spec), "noise": noise})
    return build_fixture(spec, seed)


def write_fixture(fixture: Fixture, out_dir, seed=0) -> Path:
    """Manifest, PNG images and ground-truth warps under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    texture = world_texture(np.random.default_rng([seed, 1]))
    for rec, img in zip(fixture.scene.images, fixture.spec.images):
        rgb = render_image(img, texture, fixture.world_lines)
        Image.fromarray(rgb).save(out / rec.path, optimize=False)
    fixture.scene.base_dir = str(out)
    manifest = out / "manifest.json"
    save_project(fixture.scene, manifest)
    with open(out / "ground_truth.json", "w") as fh:
        json.dump(fixture.ground_truth_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def video_frames(name="pair", n_frames=70, seed=0, noise=0.5) -> list[Scene]:
    """Scenes of a fixed rig over ``n_frames``; each frame re-samples its noisy matches."""
    spec = layout(name)
    spec = LayoutSpec(**{**vars(spec), "noise": noise})
    return [build_fixture(spec, [seed, f]).scene for f in range(n_frames)]
