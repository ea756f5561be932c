"""Project manifests, the image match graph and global similarity estimation."""

from __future__ import annotations

import json
import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image

from .errors import (DanglingReferenceError, DisconnectedGraphError, ManifestError,
                     OutOfDomainError, SchemaError, SimilarityFitError)

log = logging.getLogger(__name__)

MIN_MATCHES = 8

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["images"],
    "properties": {
        "images": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "path"],
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "path": {"type": "string"},
                    "face_boxes": {
                        "type": "array",
                        "items": {"type": "array", "items": {"type": "number"},
                                  "minItems": 4, "maxItems": 4},
                    },
                },
            },
        },
        "matches": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["i", "j", "points"],
                "properties": {
                    "i": {"type": "integer"},
                    "j": {"type": "integer"},
                    "points": {
                        "type": "array",
                        "items": {"type": "array", "items": {"type": "number"},
                                  "minItems": 4, "maxItems": 4},
                    },
                },
            },
        },
        "lines": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image", "segments"],
                "properties": {
                    "image": {"type": "integer"},
                    "segments": {
                        "type": "array",
                        "items": {"type": "array", "items": {"type": "number"},
                                  "minItems": 4, "maxItems": 4},
                    },
                },
            },
        },
        "reference": {"type": "integer"},
        "reference_angle_degrees": {"type": "number"},
    },
}


@dataclass
class ImageRecord:
    id: int
    path: str
    width: int
    height: int
    face_boxes: list = field(default_factory=list)


@dataclass(eq=False)
class FeatureMatchSet:
    """Matched points between images ``i`` and ``j``; rows are ``[xi, yi, xj, yj]``."""

    i: int
    j: int
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 4)
        _, first = np.unique(pts, axis=0, return_index=True)
        self.points = pts[np.sort(first)]

    def oriented(self, a, b) -> tuple[np.ndarray, np.ndarray]:
        """Points in image ``a`` and their partners in image ``b``."""
        if (a, b) == (self.i, self.j):
            return self.points[:, :2], self.points[:, 2:]
        if (a, b) == (self.j, self.i):
            return self.points[:, 2:], self.points[:, :2]
        raise KeyError((a, b))


@dataclass(eq=False)
class Scene:
    images: list
    matches: list = field(default_factory=list)
    lines: dict = field(default_factory=dict)
    reference: int = 0
    reference_angle: float = 0.0
    base_dir: str = "."

    def image(self, image_id) -> ImageRecord:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    @property
    def ids(self):
        return [im.id for im in self.images]

    def matches_for(self, image_id):
        return [m for m in self.matches if image_id in (m.i, m.j)]

    def image_path(self, image_id) -> str:
        p = self.image(image_id).path
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def to_manifest(self) -> dict:
        images = []
        for im in self.images:
            rec = {"id": im.id, "path": im.path}
            if im.face_boxes:
                rec["face_boxes"] = [[float(v) for v in b] for b in im.face_boxes]
            images.append(rec)
        return {
            "images": images,
            "matches": [{"i": m.i, "j": m.j, "points": m.points.tolist()} for m in self.matches],
            "lines": [{"image": k, "segments": np.asarray(v, dtype=float).tolist()}
                      for k, v in sorted(self.lines.items()) if len(v)],
            "reference": self.reference,
            "reference_angle_degrees": math.degrees(self.reference_angle),
        }

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        dims = [(im.width, im.height) for im in self.images]
        odims = [(im.width, im.height) for im in other.images]
        return self.to_manifest() == other.to_manifest() and dims == odims

    def scaled(self, factors: dict) -> "Scene":
        """Copy with every image's geometry scaled by ``factors[id]`` (for downsampled solves)."""
        images = [ImageRecord(im.id, im.path, im.width * factors[im.id], im.height * factors[im.id],
                              [[v * factors[im.id] for v in b] for b in im.face_boxes])
                  for im in self.images]
        matches = []
        for m in self.matches:
            p = m.points.copy()
            p[:, :2] *= factors[m.i]
            p[:, 2:] *= factors[m.j]
            matches.append(FeatureMatchSet(m.i, m.j, p))
        lines = {k: np.asarray(v, dtype=float) * factors[k] for k, v in self.lines.items()}
        return Scene(images, matches, lines, self.reference, self.reference_angle, self.base_dir)


@dataclass
class Diagnostic:
    kind: str  # schema | dangling | missing-file | bounds | duplicate
    message: str


def _read_manifest(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {exc}") from None


def _probe(path):
    with Image.open(path) as im:
        return im.size


def _diagnose(doc, base_dir, dims=None) -> list[Diagnostic]:
    out = []
    validator = jsonschema.Draft7Validator(MANIFEST_SCHEMA)
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path)):
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        out.append(Diagnostic("schema", f"{where}: {err.message}"))
    if out:
        return out

    ids = [im["id"] for im in doc["images"]]
    seen = set()
    for i in ids:
        if i in seen:
            out.append(Diagnostic("duplicate", f"duplicate image id {i}"))
        seen.add(i)
    if dims is None:
        dims = {}
        for im in doc["images"]:
            p = im["path"] if os.path.isabs(im["path"]) else os.path.join(base_dir, im["path"])
            try:
                dims[im["id"]] = _probe(p)
            except (OSError, ValueError):
                out.append(Diagnostic("missing-file", f"image {im['id']}: cannot read {p}"))

    for k, m in enumerate(doc.get("matches", [])):
        i, j = m["i"], m["j"]
        if i == j:
            out.append(Diagnostic("schema", f"matches/{k}: pair ({i}, {j}) matches an image to itself"))
            continue
        missing = [x for x in (i, j) if x not in seen]
        if missing:
            out.append(Diagnostic("dangling", f"matches/{k}: pair ({i}, {j}) references unknown image {missing}"))
            continue
        for n, row in enumerate(m["points"]):
            for img, (x, y) in ((i, row[:2]), (j, row[2:])):
                if img in dims and not _inside(x, y, dims[img]):
                    out.append(Diagnostic(
                        "bounds", f"matches/{k} ({i}, {j}) point {n}: ({x}, {y}) outside image {img}"))
    for k, ln in enumerate(doc.get("lines", [])):
        img = ln["image"]
        if img not in seen:
            out.append(Diagnostic("dangling", f"lines/{k}: unknown image {img}"))
            continue
        for n, s in enumerate(ln["segments"]):
            for x, y in (s[:2], s[2:]):
                if img in dims and not _inside(x, y, dims[img]):
                    out.append(Diagnostic("bounds", f"lines/{k} segment {n}: ({x}, {y}) outside image {img}"))
    ref = doc.get("reference")
    if ref is not None and ref not in seen:
        out.append(Diagnostic("dangling", f"reference {ref} is not an image id"))
    return out


def _inside(x, y, wh):
    return 0.0 <= x <= wh[0] and 0.0 <= y <= wh[1]


def validate_manifest(path) -> list[Diagnostic]:
    """All schema and referential problems of a manifest, without stopping at the first."""
    doc = _read_manifest(path)
    return _diagnose(doc, os.path.dirname(os.path.abspath(path)))


_ERRORS = {"schema": SchemaError, "duplicate": SchemaError, "dangling": DanglingReferenceError,
           "missing-file": ManifestError, "bounds": OutOfDomainError}


def scene_from_manifest(doc, base_dir=".", dims=None) -> Scene:
    diags = _diagnose(doc, base_dir, dims)
    if diags:
        first = diags[0]
        raise _ERRORS[first.kind]("; ".join(d.message for d in diags))
    if dims is None:
        dims = {im["id"]: _probe(im["path"] if os.path.isabs(im["path"]) else os.path.join(base_dir, im["path"]))
                for im in doc["images"]}
    images = [ImageRecord(im["id"], im["path"], int(dims[im["id"]][0]), int(dims[im["id"]][1]),
                          [list(map(float, b)) for b in im.get("face_boxes", [])])
              for im in doc["images"]]
    matches = [FeatureMatchSet(m["i"], m["j"], np.array(m["points"], dtype=float).reshape(-1, 4))
               for m in doc.get("matches", [])]
    lines = {}
    for ln in doc.get("lines", []):
        segs = np.array(ln["segments"], dtype=float).reshape(-1, 4)
        lines[ln["image"]] = np.vstack([lines[ln["image"]], segs]) if ln["image"] in lines else segs
    return Scene(images, matches, lines,
                 reference=doc.get("reference", images[0].id),
                 reference_angle=math.radians(doc.get("reference_angle_degrees", 0.0)),
                 base_dir=base_dir)


def load_project(manifest_path) -> Scene:
    doc = _read_manifest(manifest_path)
    return scene_from_manifest(doc, os.path.dirname(os.path.abspath(manifest_path)))


def save_project(scene: Scene, manifest_path) -> None:
    """Write ``scene`` as a manifest; relative image paths are rewritten against the new location."""
    target = Path(manifest_path).parent
    target.mkdir(parents=True, exist_ok=True)
    doc = scene.to_manifest()
    for rec, im in zip(doc["images"], scene.images):
        if not os.path.isabs(im.path):
            rec["path"] = os.path.relpath(os.path.abspath(scene.image_path(im.id)), target.resolve())
    with open(manifest_path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def sample_line(segment, spacing) -> np.ndarray:
    """Evenly spaced samples ``l_0 .. l_p`` with ``p = floor(length / spacing)``."""
    a = np.asarray(segment[:2], dtype=float)
    b = np.asarray(segment[2:], dtype=float)
    p = int(np.floor(np.linalg.norm(b - a) / spacing))
    p = max(p, 1)
    t = np.arange(p + 1) / p
    return a[None, :] * (1 - t[:, None]) + b[None, :] * t[:, None]


# ---------------------------------------------------------------------------
# match graph

@dataclass
class MatchGraph:
    nodes: list
    edges: dict  # (i, j) with i < j -> match count
    parent: dict  # spanning tree, reference maps to None
    order: list  # BFS order from the reference

    def neighbours(self, n):
        out = []
        for i, j in self.edges:
            if i == n:
                out.append(j)
            elif j == n:
                out.append(i)
        return sorted(out)

    def tree_edges(self):
        return [(self.parent[n], n) for n in self.order if self.parent[n] is not None]


def _components(nodes, adj):
    seen, comps = set(), []
    for n in nodes:
        if n in seen:
            continue
        comp, queue = [], deque([n])
        seen.add(n)
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        comps.append(comp)
    return comps


def build_match_graph(scene: Scene, min_matches=MIN_MATCHES) -> MatchGraph:
    nodes = sorted(scene.ids)
    counts = {}
    for m in scene.matches:
        key = (min(m.i, m.j), max(m.i, m.j))
        counts[key] = counts.get(key, 0) + len(m.points)
    edges = {k: v for k, v in sorted(counts.items()) if v >= min_matches}
    adj = {n: [] for n in nodes}
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    for n in adj:
        adj[n].sort()
    comps = _components(nodes, adj)
    if len(comps) > 1:
        raise DisconnectedGraphError(comps)

    parent = {scene.reference: None}
    order, queue = [], deque([scene.reference])
    while queue:
        u = queue.popleft()
        order.append(u)
        for v in adj[u]:
            if v not in parent:
                parent[v] = u
                queue.append(v)
    return MatchGraph(nodes, edges, parent, order)


# ---------------------------------------------------------------------------
# global similarity

def fit_similarity(src, dst) -> tuple[complex, complex]:
    """Least-squares ``dst ~ a * src + t`` over complex points; returns (a, t).

    ``a = s * exp(i*theta)`` is the scale/rotation; reflections are excluded.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) < 2:
        raise SimilarityFitError(f"need at least 2 matches to fit a similarity, got {len(src)}")
    zs = src[:, 0] + 1j * src[:, 1]
    zd = dst[:, 0] + 1j * dst[:, 1]
    ms, md = zs.mean(), zd.mean()
    zs0, zd0 = zs - ms, zd - md
    den = float(np.sum(np.abs(zs0) ** 2))
    if den <= 1e-24:
        raise SimilarityFitError("match points are coincident; similarity undefined")
    a = np.sum(np.conj(zs0) * zd0) / den
    return complex(a), complex(md - a * ms)


@dataclass
class GlobalSimilarityParams:
    """Per-image target scale ``s_i`` and rotation ``theta_i`` relative to the reference.

    ``placement[i]`` is the full similarity ``(a, t)`` taking image ``i`` rest
    coordinates into the panorama frame; it seeds the solver.
    """

    scales: dict
    angles: dict
    reference: int
    placement: dict

    def place(self, image_id, points) -> np.ndarray:
        a, t = self.placement[image_id]
        z = np.asarray(points, dtype=float)
        w = a * (z[..., 0] + 1j * z[..., 1]) + t
        return np.stack([w.real, w.imag], axis=-1)


def estimate_global_similarity(scene: Scene, graph: MatchGraph) -> GlobalSimilarityParams:
    ref = scene.reference
    a_ref = complex(math.cos(scene.reference_angle), math.sin(scene.reference_angle))
    scales, angles = {ref: 1.0}, {ref: scene.reference_angle}
    placement = {ref: (a_ref, 0j)}
    by_pair = {}
    for m in scene.matches:
        by_pair.setdefault((m.i, m.j), []).append(m)
    for parent, child in graph.tree_edges():
        src, dst = [], []
        for key in ((parent, child), (child, parent)):
            for m in by_pair.get(key, []):
                c_pts, p_pts = m.oriented(child, parent)
                src.append(c_pts)
                dst.append(p_pts)
        src, dst = np.vstack(src), np.vstack(dst)
        try:
            a, t = fit_similarity(src, dst)
        except SimilarityFitError as exc:
            raise SimilarityFitError(f"edge ({parent}, {child}): {exc}") from None
        ap, tp = placement[parent]
        placement[child] = (ap * a, ap * t + tp)
        scales[child] = scales[parent] * abs(a)
        angles[child] = angles[parent] + math.atan2(a.imag, a.real)
    return GlobalSimilarityParams(scales, angles, ref, placement)
