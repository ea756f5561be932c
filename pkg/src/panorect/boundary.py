"""Boundary sides, direction-consistent sections and removable steps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CornerError, GeometryError, StepError
from .polygon import CompoundPolygon

log = logging.getLogger(__name__)

SIDE_NAMES = ("top", "right", "bottom", "left")
HORIZONTAL, VERTICAL = 0, 1
# dominant section direction per side
DOMINANT = (HORIZONTAL, VERTICAL, HORIZONTAL, VERTICAL)


@dataclass(eq=False)
class BoundarySide:
    k: int  # 0 top, 1 right, 2 bottom, 3 left
    points: list
    corners: tuple  # (first, last) BoundaryPoint

    @property
    def name(self):
        return SIDE_NAMES[self.k]


@dataclass(eq=False)
class BoundarySection:
    side: int
    dir: int
    val: float
    points: list

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.points], dtype=float).reshape(-1, 2)

    @property
    def keys(self):
        return [p.key for p in self.points]

    def extent(self) -> float:
        """Length of the section along its own direction."""
        pos = self.positions
        axis = 0 if self.dir == HORIZONTAL else 1
        return float(pos[:, axis].max() - pos[:, axis].min()) if len(pos) else 0.0

    def deviation(self, vertices=None) -> np.ndarray:
        """Orthogonal distance of each point from the target line."""
        axis = 1 if self.dir == HORIZONTAL else 0
        if vertices is None:
            pos = self.positions
        else:
            pos = np.array([p.reconstruct(vertices) for p in self.points]).reshape(-1, 2)
        return np.abs(pos[:, axis] - self.val)

    def to_json(self):
        return {"side": SIDE_NAMES[self.side], "dir": self.dir, "val": float(self.val),
                "n_points": len(self.points)}


@dataclass(eq=False)
class Step:
    side: int
    index: int  # position of the step section within its side
    height: float
    removable: bool

    def to_json(self):
        return {"side": SIDE_NAMES[self.side], "index": self.index, "height": float(self.height),
                "removable": bool(self.removable)}


def bounding_box(positions):
    p = np.asarray(positions, dtype=float)
    return float(p[:, 0].min()), float(p[:, 1].min()), float(p[:, 0].max()), float(p[:, 1].max())


def extract_sides(compound: CompoundPolygon, vertices=None) -> list[BoundarySide]:
    """Split the compound loop into top/right/bottom/left runs at the corner vertices."""
    pts = compound.points
    if vertices is not None:
        pts = [replace(p, position=tuple(map(float, p.reconstruct(vertices)))) for p in pts]
    pos = np.array([p.position for p in pts], dtype=float)
    x0, y0, x1, y1 = bounding_box(pos)
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    cand = np.array([k for k, p in enumerate(pts) if p.on_vertex == 1])
    if cand.size < 4:
        raise CornerError("compound polygon has fewer than 4 mesh vertices")
    idx = []
    for c in corners:
        d = np.linalg.norm(pos[cand] - c, axis=1)
        idx.append(int(cand[int(np.argmin(d))]))
    if len(set(idx)) < 4:
        raise CornerError(f"two bounding-box corners map to the same boundary vertex: {idx}")
    n = len(pts)
    rel = [(i - idx[0]) % n for i in idx]
    if not rel[0] < rel[1] < rel[2] < rel[3]:
        raise CornerError(f"corner vertices are out of clockwise order: {idx}")
    sides = []
    for k in range(4):
        a, b = idx[k], idx[(k + 1) % 4]
        span = (b - a) % n
        run = [pts[(a + t) % n] for t in range(span + 1)]
        sides.append(BoundarySide(k, run, (run[0], run[-1])))
    return sides


def _direction(p, q):
    return HORIZONTAL if abs(q[0] - p[0]) >= abs(q[1] - p[1]) else VERTICAL


def analyze_sections(side: BoundarySide) -> list[BoundarySection]:
    """Group a side's points into alternating horizontal/vertical sections.

    Adjacent point pairs start as sections; neighbours with the same direction
    merge, and sections with fewer than two interior points are folded into the
    previous section (the next one for a leading section) until nothing changes.
    """
    pos = np.array([p.position for p in side.points], dtype=float)
    if len(pos) < 2:
        raise GeometryError(f"{side.name} side has fewer than 2 points")
    secs = [[j, j + 1, _direction(pos[j], pos[j + 1])] for j in range(len(pos) - 1)]
    changed = True
    while changed:
        changed = False
        merged = []
        for s in secs:
            if merged and merged[-1][2] == s[2]:
                merged[-1][1] = s[1]
                changed = True
            else:
                merged.append(list(s))
        secs = merged
        if len(secs) < 2:
            break
        out = []
        for i, s in enumerate(secs):
            small = s[1] - s[0] - 1 < 2
            if small and out:
                out[-1][1] = s[1]
                changed = True
            elif small and i + 1 < len(secs):
                secs[i + 1][0] = s[0]
                changed = True
            else:
                out.append(s)
        secs = out
    result = []
    for a, b, d in secs:
        run = side.points[a:b + 1]
        axis = 1 if d == HORIZONTAL else 0
        result.append(BoundarySection(side.k, d, float(pos[a:b + 1, axis].mean()), list(run)))
    return result


def _join(first: BoundarySection, second: BoundarySection, side) -> BoundarySection:
    pts = list(first.points) + [p for p in second.points if p.key != first.points[-1].key]
    axis = 1 if first.dir == HORIZONTAL else 0
    val = float(np.mean([p.position[axis] for p in pts]))
    return BoundarySection(side, first.dir, val, pts)


def side_sections(sides) -> list[list[BoundarySection]]:
    """Sections of all four sides, with every side starting and ending in its dominant direction.

    A side that begins (ends) with an off-direction run hands it to the previous
    (next) side, where that direction is dominant; otherwise the shared corner
    point would be pulled onto two parallel target lines at once.
    """
    secs = [analyze_sections(s) for s in sides]
    for _ in range(8):
        moved = False
        for k in range(4):
            prev, nxt = (k - 1) % 4, (k + 1) % 4
            if len(secs[k]) > 1 and secs[k][0].dir != DOMINANT[k]:
                head = secs[k].pop(0)
                tail = secs[prev][-1]
                if tail.dir == head.dir:
                    secs[prev][-1] = _join(tail, head, prev)
                else:
                    secs[prev].append(BoundarySection(prev, head.dir, head.val, head.points))
                moved = True
            if len(secs[k]) > 1 and secs[k][-1].dir != DOMINANT[k]:
                tail = secs[k].pop()
                head = secs[nxt][0]
                if tail.dir == head.dir:
                    secs[nxt][0] = _join(tail, head, nxt)
                else:
                    secs[nxt].insert(0, BoundarySection(nxt, tail.dir, tail.val, tail.points))
                moved = True
        if not moved:
            break
    for k, s in enumerate(secs):
        if s[0].dir != DOMINANT[k] or s[-1].dir != DOMINANT[k]:
            raise CornerError(f"{SIDE_NAMES[k]} side does not start and end in its dominant direction")
    return secs


def _polyline_distance(points, line) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    line = np.asarray(line, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros(0)
    if len(line) == 1:
        return np.linalg.norm(pts - line[0], axis=1)
    a, b = line[:-1], line[1:]
    ab = b - a
    L2 = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    ap = pts[:, None, :] - a[None, :, :]
    t = np.clip(np.sum(ap * ab[None], axis=2) / L2[None], 0.0, 1.0)
    proj = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(pts[:, None, :] - proj, axis=2).min(axis=1)


def find_steps(sections_per_side, feature_points=None, clearance=80.0) -> list[Step]:
    """Steps: off-direction sections flanked by two dominant-direction sections.

    A step is removable when no feature point (matched point or line sample,
    already mapped into the panorama) lies within ``clearance`` of either flank.
    """
    feats = np.zeros((0, 2)) if feature_points is None else np.asarray(feature_points, dtype=float).reshape(-1, 2)
    steps = []
    for k, secs in enumerate(sections_per_side):
        dom = DOMINANT[k]
        for i in range(1, len(secs) - 1):
            s = secs[i]
            if s.dir == dom or secs[i - 1].dir != dom or secs[i + 1].dir != dom:
                continue
            removable = True
            if len(feats):
                for flank in (secs[i - 1], secs[i + 1]):
                    if np.any(_polyline_distance(feats, flank.positions) <= clearance):
                        removable = False
                        break
            steps.append(Step(k, i, s.extent(), removable))
    return steps


def remove_step(sections, step: Step) -> list[BoundarySection]:
    """Join the two sections flanking ``step``; returns the side's new section list."""
    if not step.removable:
        raise StepError(f"step {step.index} on the {SIDE_NAMES[step.side]} side is not removable")
    secs = list(sections)
    i = step.index
    if not 0 < i < len(secs) - 1:
        raise StepError(f"step index {i} has no flanking sections")
    left, mid, right = secs[i - 1], secs[i], secs[i + 1]
    if left.dir != right.dir or mid.dir == left.dir:
        raise StepError(f"section {i} is not a step between two parallel sections")
    n1, n2 = len(left.points), len(right.points)
    val = (n1 * left.val + n2 * right.val) / (n1 + n2)
    pts = list(left.points)
    for p in mid.points + right.points:
        if p.key != pts[-1].key:
            pts.append(p)
    merged = BoundarySection(left.side, left.dir, val, pts)
    return secs[:i - 1] + [merged] + secs[i + 2:]


def rectangle_sections(sides) -> list[list[BoundarySection]]:
    """One section per side, targeting the bounding rectangle of all side points."""
    pos = np.vstack([np.array([p.position for p in s.points]) for s in sides])
    x0, y0, x1, y1 = bounding_box(pos)
    vals = (y0, x1, y1, x0)
    return [[BoundarySection(s.k, DOMINANT[s.k], float(vals[s.k]), list(s.points))] for s in sides]


@dataclass(eq=False)
class BoundaryTarget:
    """Per-side section lists with their target lines."""

    sides: list  # 4 lists of BoundarySection
    mode: str = "piecewise"  # none | piecewise | rectangle
    steps: list = field(default_factory=list)

    def sections(self):
        return [s for side in self.sides for s in side]

    @property
    def n_sections(self):
        return sum(len(s) for s in self.sides)

    @property
    def is_rectangle(self):
        return all(len(s) == 1 for s in self.sides)

    def max_deviation(self, vertices) -> float:
        devs = [s.deviation(vertices) for s in self.sections() if s.points]
        return float(max((d.max() for d in devs if len(d)), default=0.0))

    def with_side(self, k, sections) -> "BoundaryTarget":
        sides = [list(s) for s in self.sides]
        sides[k] = list(sections)
        return BoundaryTarget(sides, self.mode, [])

    def to_json(self):
        return {"mode": self.mode,
                "sides": {SIDE_NAMES[k]: [s.to_json() for s in secs] for k, secs in enumerate(self.sides)},
                "n_sections": self.n_sections,
                "steps": [s.to_json() for s in self.steps]}

    def rebind(self, compound: CompoundPolygon, keep=False) -> "BoundaryTarget":
        """Re-attach sections to a freshly extracted compound polygon.

        Points keep their section membership through their provenance key (the
        same mesh vertex, or the crossing of the same two mesh edges, whose
        weights are recomputed).  Points with no counterpart inherit membership
        from their loop neighbours.  With ``keep`` the mesh vertices that left
        the boundary stay in their sections, so a vertex that was pulled onto
        a target line cannot spring back out of it on the next solve.
        """
        slots = [(k, i) for k, side in enumerate(self.sides) for i in range(len(side))]
        member = {}
        for slot in slots:
            sec = self.sides[slot[0]][slot[1]]
            for key in sec.keys:
                member.setdefault(key, set()).add(slot)
        pts = compound.points
        n = len(pts)
        assigned = [set(member.get(p.key, ())) for p in pts]
        known = [k for k in range(n) if assigned[k]]
        if not known:
            raise GeometryError("no boundary point of the new union matches the previous target")
        for k in range(n):
            if assigned[k]:
                continue
            prev = next(assigned[(k - t) % n] for t in range(1, n) if member.get(pts[(k - t) % n].key))
            nxt = next(assigned[(k + t) % n] for t in range(1, n) if member.get(pts[(k + t) % n].key))
            common = prev & nxt
            if common:
                assigned[k] = set(common)
            else:
                cand = sorted(prev | nxt)
                best = min(cand, key=lambda sl: self._distance(sl, pts[k]))
                assigned[k] = {best}
        new_pts = {slot: [] for slot in slots}
        for k in range(n):
            for slot in assigned[k]:
                new_pts[slot].append(k)
        sides = []
        for kk, side in enumerate(self.sides):
            secs = []
            for i, sec in enumerate(side):
                idx = _contiguous(new_pts[(kk, i)], n)
                new = [pts[j] for j in idx]
                if keep:
                    have = {p.key for p in new}
                    new += [p for p in sec.points if p.on_vertex == 1 and p.key not in have]
                secs.append(BoundarySection(sec.side, sec.dir, sec.val, new))
            sides.append(secs)
        return BoundaryTarget(sides, self.mode, list(self.steps))

    def _distance(self, slot, point):
        sec = self.sides[slot[0]][slot[1]]
        axis = 1 if sec.dir == HORIZONTAL else 0
        return abs(point.position[axis] - sec.val)


def _contiguous(indices, n):
    """Loop indices ordered as one run, starting after the largest gap."""
    idx = sorted(indices)
    if len(idx) < 2:
        return idx
    gaps = [(idx[(k + 1) % len(idx)] - idx[k]) % n for k in range(len(idx))]
    start = (int(np.argmax(gaps)) + 1) % len(idx)
    return idx[start:] + idx[:start]


def boundary_trace(compound: CompoundPolygon, target: BoundaryTarget | None = None) -> dict:
    """JSON-ready dump of the compound polygon and section table for debugging."""
    out = {"compound": compound.to_json()}
    if target is not None:
        out["target"] = target.to_json()
        out["sections"] = [dict(s.to_json(), keys=[list(map(str, k)) for k in s.keys]) for s in target.sections()]
    return out
