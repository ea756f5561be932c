"""Boolean union of warped mesh outlines, keeping track of where each boundary point came from.

The union is computed on the arrangement of all outline edges: edges are split
at every crossing, a fragment survives when the space just outside it (on the
side away from its own polygon) is not covered by any other polygon, and the
surviving fragments are chained into loops.  Each output point is either a
mesh vertex (``on_vertex == 1``) or the crossing of two mesh edges (``on_vertex == 0``)
whose position is a fixed linear combination of the four edge endpoints.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DisconnectedUnionError, GeometryError
from .mesh import signed_area

log = logging.getLogger(__name__)

EPS = 1e-9
# edges closer than this many merge tolerances count as collinear; probes sit further out
COLLINEAR = 4
PROBE = 16


@dataclass(frozen=True, eq=False)
class BoundaryPoint:
    position: tuple
    on_vertex: int
    vertex: tuple | None = None  # (image_id, vertex) when on_vertex == 1
    edge_vertices: tuple | None = None  # 4 x (image_id, vertex) when on_vertex == 0
    mix: tuple | None = None  # 4 weights when on_vertex == 0

    @property
    def key(self):
        if self.on_vertex == 1:
            return ("v",) + tuple(self.vertex)
        return ("x",) + tuple(self.edge_vertices)

    def reconstruct(self, vertices) -> np.ndarray:
        """Position from current vertex arrays (dict image_id -> (n, 2))."""
        if self.on_vertex == 1:
            img, v = self.vertex
            return np.asarray(vertices[img][v], dtype=float)
        return sum(e * np.asarray(vertices[img][v], dtype=float) for (img, v), e in zip(self.edge_vertices, self.mix))

    def to_json(self):
        d = {"x": float(self.position[0]), "y": float(self.position[1]), "on_vertex": self.on_vertex}
        if self.on_vertex == 1:
            d["vertex"] = list(self.vertex)
        else:
            d["edge_vertices"] = [list(k) for k in self.edge_vertices]
            d["mix"] = [float(e) for e in self.mix]
        return d


@dataclass(frozen=True, eq=False)
class Polygon:
    """A closed loop with a vertex reference for every point."""

    image_id: int
    points: np.ndarray
    refs: tuple  # (image_id, vertex) per point

    @classmethod
    def from_outline(cls, outline):
        return cls(outline.image_id, np.asarray(outline.points, dtype=float),
                   tuple((outline.image_id, int(v)) for v in outline.indices))

    @classmethod
    def from_points(cls, image_id, points):
        pts = np.asarray(points, dtype=float)
        return cls(image_id, pts, tuple((image_id, k) for k in range(len(pts))))


@dataclass(eq=False)
class CompoundPolygon:
    points: list  # BoundaryPoint, clockwise (positive area in y-down coordinates)
    n_sources: int
    holes: list = field(default_factory=list)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.points], dtype=float)

    def area(self) -> float:
        return signed_area(self.positions)

    def net_area(self) -> float:
        return self.area() + sum(signed_area(np.array([p.position for p in h])) for h in self.holes)

    def to_json(self):
        return {"points": [p.to_json() for p in self.points],
                "holes": [[p.to_json() for p in h] for h in self.holes],
                "n_sources": self.n_sources}


def _pt(p):
    return (float(p[0]), float(p[1]))


def _cross(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def _inside(points, poly) -> np.ndarray:
    """Even-odd point-in-polygon for many points against one loop."""
    px, py = points[:, 0][:, None], points[:, 1][:, None]
    a = poly[None, :, :]
    b = np.roll(poly, -1, axis=0)[None, :, :]
    ay, by = a[..., 1], b[..., 1]
    crosses = (ay > py) != (by > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = a[..., 0] + (py - ay) * (b[..., 0] - a[..., 0]) / (by - ay)
    hit = crosses & (px < xint)
    return (np.count_nonzero(hit, axis=1) % 2) == 1


class _Node:
    __slots__ = ("pos", "prov")

    def __init__(self, pos, prov):
        self.pos = pos
        self.prov = prov  # BoundaryPoint candidate


def polygon_union(polygons) -> CompoundPolygon:
    """Outer boundary of the union of simple polygons, with provenance per point."""
    polys = []
    for p in polygons:
        if not isinstance(p, Polygon):
            p = Polygon.from_outline(p)
        pts = p.points
        if len(pts) < 3:
            raise GeometryError(f"polygon {p.image_id} has fewer than 3 points")
        if signed_area(pts) < 0:
            p = Polygon(p.image_id, pts[::-1].copy(), tuple(reversed(p.refs)))
        polys.append(p)
    if not polys:
        raise GeometryError("polygon_union needs at least one polygon")
    order = sorted(range(len(polys)), key=lambda k: polys[k].image_id)
    polys = [polys[k] for k in order]

    allpts = np.vstack([p.points for p in polys])
    scale = max(1.0, float(np.abs(allpts).max()))
    eps = EPS * scale

    # edges: start, end, polygon index, edge index, vertex refs
    E0, E1, owner, ref0, ref1 = [], [], [], [], []
    for k, p in enumerate(polys):
        n = len(p.points)
        for e in range(n):
            E0.append(p.points[e])
            E1.append(p.points[(e + 1) % n])
            owner.append(k)
            ref0.append(p.refs[e])
            ref1.append(p.refs[(e + 1) % n])
    E0, E1, owner = np.array(E0), np.array(E1), np.array(owner)
    n_edges = len(E0)

    # candidate points: every vertex, then every crossing
    cand_pos, cand_prov = [], []
    split = [[] for _ in range(n_edges)]  # (t, candidate index)
    for e in range(n_edges):
        cand_pos.append(E0[e])
        cand_prov.append(BoundaryPoint(_pt(E0[e]), 1, vertex=ref0[e]))
        split[e].append((0.0, len(cand_pos) - 1))
    first = 0
    for p in polys:
        n = len(p.points)
        for e in range(first, first + n):
            nxt = first + (e - first + 1) % n
            split[e].append((1.0, split[nxt][0][1]))
        first += n

    d = E1 - E0
    length = np.linalg.norm(d, axis=1)
    for a in range(n_edges):
        others = np.where(owner > owner[a])[0]
        if others.size == 0:
            continue
        # bounding-box prefilter
        lo_a = np.minimum(E0[a], E1[a]) - eps
        hi_a = np.maximum(E0[a], E1[a]) + eps
        lo_b = np.minimum(E0[others], E1[others])
        hi_b = np.maximum(E0[others], E1[others])
        near = np.all((lo_b <= hi_a) & (hi_b >= lo_a), axis=1)
        for b in others[near]:
            _intersect(a, b, E0, E1, d, length, eps, ref0, ref1, cand_pos, cand_prov, split)

    # merge coincident candidates; prefer mesh vertices, then lowest key
    cand_pos = np.array(cand_pos)
    tree = cKDTree(cand_pos)
    parent = list(range(len(cand_pos)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in sorted(tree.query_pairs(eps)):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups = {}
    for i in range(len(cand_pos)):
        groups.setdefault(find(i), []).append(i)
    rep = {}
    nodes = {}
    for root, members in groups.items():
        best = min(members, key=lambda m: (1 - cand_prov[m].on_vertex, _keysort(cand_prov[m].key)))
        prov = cand_prov[best]
        nodes[root] = _Node(np.array(prov.position, dtype=float), prov)
        for m in members:
            rep[m] = root

    # fragments along each edge
    frags = []  # (start node, end node, owner, edge)
    for e in range(n_edges):
        seq = sorted(split[e], key=lambda tc: tc[0])
        ids = []
        for _, ci in seq:
            r = rep[ci]
            if not ids or ids[-1] != r:
                ids.append(r)
        for s, t in zip(ids[:-1], ids[1:]):
            if s != t:
                frags.append((s, t, int(owner[e]), e))

    if not frags:
        raise GeometryError("union has no boundary")
    fs = np.array([nodes[f[0]].pos for f in frags])
    fe = np.array([nodes[f[1]].pos for f in frags])
    mid = 0.5 * (fs + fe)
    dirv = fe - fs
    dn = np.linalg.norm(dirv, axis=1)[:, None]
    # interior lies to the right of travel (positive orientation, y down): outward is the left
    outward = np.stack([dirv[:, 1], -dirv[:, 0]], axis=1) / dn
    probe = mid + outward * (PROBE * eps)
    fowner = np.array([f[2] for f in frags])
    covered = np.zeros(len(frags), dtype=bool)
    for k, p in enumerate(polys):
        sel = fowner != k
        covered[sel] |= _inside(probe[sel], p.points)
    kept = [f for f, c in zip(frags, covered) if not c]
    # identical fragments from several polygons: keep the first owner's
    seen, unique = set(), []
    for f in kept:
        if (f[0], f[1]) in seen:
            continue
        seen.add((f[0], f[1]))
        unique.append(f)

    loops = _trace(unique, nodes)
    outer, holes = [], []
    for loop in loops:
        pts = np.array([nodes[n].pos for n in loop])
        a = signed_area(pts)
        if abs(a) <= eps * eps:
            continue
        (outer if a > 0 else holes).append(loop)
    if len(outer) != 1:
        raise DisconnectedUnionError(f"union has {len(outer)} separate components")
    outer_loop = _canonical_start(outer[0], nodes)
    compound = CompoundPolygon([nodes[n].prov for n in outer_loop], len(polys),
                               [[nodes[n].prov for n in h] for h in holes])
    if holes:
        log.info("union has %d interior hole(s); excluded from boundary constraints", len(holes))
    return compound


def _keysort(key):
    return tuple(str(k) if isinstance(k, str) else k for k in key)


def _intersect(a, b, E0, E1, d, length, eps, ref0, ref1, cand_pos, cand_prov, split):
    p, r = E0[a], d[a]
    q, s = E0[b], d[b]
    rxs = r[0] * s[1] - r[1] * s[0]
    qp = q - p
    la, lb = length[a], length[b]
    tol = COLLINEAR * eps
    # distance of each edge's endpoints from the other edge's line
    off_b = max(abs(_cross(r, q - p)), abs(_cross(r, E1[b] - p))) / la
    off_a = max(abs(_cross(s, p - q)), abs(_cross(s, E1[a] - q))) / lb
    if min(off_a, off_b) > tol and abs(rxs) > 1e-12 * la * lb:
        t = (qp[0] * s[1] - qp[1] * s[0]) / rxs
        u = (qp[0] * r[1] - qp[1] * r[0]) / rxs
        ta, tb = eps / la, eps / lb
        if -ta <= t <= 1 + ta and -tb <= u <= 1 + tb:
            t = min(max(t, 0.0), 1.0)
            u = min(max(u, 0.0), 1.0)
            edge_vertices = (ref0[a], ref1[a], ref0[b], ref1[b])
            mix = (0.5 * (1 - t), 0.5 * t, 0.5 * (1 - u), 0.5 * u)
            # the symmetric weights average the two parameterisations
            pos = 0.5 * (p + t * r) + 0.5 * (q + u * s)
            cand_pos.append(pos)
            cand_prov.append(BoundaryPoint(_pt(pos), 0, edge_vertices=edge_vertices, mix=mix))
            ci = len(cand_pos) - 1
            split[a].append((t, ci))
            split[b].append((u, ci))
        return
    # parallel: only collinear overlaps matter
    if min(off_a, off_b) > tol:
        return
    for e_from, e_to, pt_idx_src in ((a, b, 0), (a, b, 1), (b, a, 0), (b, a, 1)):
        src = E0[e_to] if pt_idx_src == 0 else E1[e_to]
        t = float(np.dot(src - E0[e_from], d[e_from]) / (length[e_from] ** 2))
        if eps / length[e_from] < t < 1 - eps / length[e_from]:
            # endpoint of e_to lies inside e_from: split e_from at that vertex
            ref = ref0[e_to] if pt_idx_src == 0 else ref1[e_to]
            cand_pos.append(np.array(src, dtype=float))
            cand_prov.append(BoundaryPoint(_pt(src), 1, vertex=ref))
            split[e_from].append((t, len(cand_pos) - 1))


def _trace(frags, nodes):
    out = {}
    for f in frags:
        out.setdefault(f[0], []).append(f)
    used = set()
    loops = []
    for start in frags:
        if start in used:
            continue
        loop = []
        f = start
        while True:
            used.add(f)
            loop.append(f[0])
            nxt = [g for g in out.get(f[1], []) if g not in used]
            if not nxt:
                break
            if len(nxt) > 1:
                nxt = [_sharpest_right(f, nxt, nodes)]
            f = nxt[0]
        if loop and f[1] == loop[0]:
            loops.append(loop)
        else:
            log.debug("dropping open chain of %d fragments", len(loop))
    return loops


def _sharpest_right(f, options, nodes):
    """Among outgoing fragments, the one turning furthest toward the interior (right, y down)."""
    pin = nodes[f[1]].pos - nodes[f[0]].pos
    ang_in = math.atan2(pin[1], pin[0])
    best, best_turn = None, None
    for g in options:
        v = nodes[g[1]].pos - nodes[g[0]].pos
        turn = (math.atan2(v[1], v[0]) - ang_in + math.pi) % (2 * math.pi) - math.pi
        if best is None or turn > best_turn:
            best, best_turn = g, turn
    return best


def _canonical_start(loop, nodes):
    pos = np.array([nodes[n].pos for n in loop])
    k = min(range(len(loop)), key=lambda i: (pos[i][0], pos[i][1]))
    return loop[k:] + loop[:k]


def polygon_from_points(points):
    """Convenience for tests and tooling: a bare point loop as a Polygon."""
    return Polygon.from_points(0, points)
