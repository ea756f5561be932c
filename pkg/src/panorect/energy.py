"""Quadratic energy terms over warped mesh vertices and their minimisation.

Every term is a block of linear residual rows ``A x - b`` over the stacked
coordinate vector ``x = [x_0, y_0, x_1, y_1, ...]`` of all meshes, so the total
energy is a sparse quadratic form minimised by one linear solve.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .errors import (ConvergenceError, GeometryError, InvalidInputError, OutOfDomainError,
                     RankDeficiencyError)
from .mesh import GridMesh, anchor_arrays
from .scene import sample_line

log = logging.getLogger(__name__)

# residual-row shape terms: (apex, right-angle vertex, other) as TL=0, TR=1, BR=2, BL=3
TRIANGLES = ((1, 0, 3), (2, 1, 0), (3, 2, 1), (0, 3, 2))
FACE_SALIENCY = 20.0


@dataclass(frozen=True)
class EnergyWeights:
    alignment: float = 1.0
    shape: float = 6.5
    similarity: float = 0.5
    boundary: float = 1e3
    line: float = 15.0

    def __post_init__(self):
        for name in ("alignment", "shape", "similarity", "boundary", "line"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"weight {name} must be nonnegative")
        if self.alignment <= 0:
            raise InvalidInputError("alignment weight must be positive")

    def for_kind(self, kind):
        return getattr(self, kind)


class VariableLayout:
    """Maps ``(image_id, vertex)`` to slots in the global unknown vector."""

    def __init__(self, meshes, fixed=None):
        self.meshes = list(meshes)
        self.offsets = {}
        n = 0
        for m in self.meshes:
            if m.image_id in self.offsets:
                raise InvalidInputError(f"duplicate mesh for image {m.image_id}")
            self.offsets[m.image_id] = n
            n += m.n_vertices
        self.n_vertices = n
        # fixed: {(image_id, vertex): (x, y)}
        self.fixed = dict(fixed or {})
        for (img, v) in self.fixed:
            if img not in self.offsets or not 0 <= v < self.mesh(img).n_vertices:
                raise InvalidInputError(f"fixed vertex {(img, v)} does not exist")

    @property
    def size(self) -> int:
        return 2 * self.n_vertices

    def mesh(self, image_id) -> GridMesh:
        return self.meshes[list(self.offsets).index(image_id)]

    def slot(self, image_id, vertex):
        return self.offsets[image_id] + np.asarray(vertex)

    def col(self, image_id, vertex, axis):
        return 2 * (self.offsets[image_id] + np.asarray(vertex)) + axis

    def fixed_columns(self):
        cols, vals = [], []
        for (img, v), xy in sorted(self.fixed.items()):
            for axis in (0, 1):
                cols.append(int(self.col(img, v, axis)))
                vals.append(float(xy[axis]))
        return np.array(cols, dtype=np.int64), np.array(vals)

    def pack(self, vertices) -> np.ndarray:
        """``vertices``: dict image_id -> (n, 2) array, or list of meshes (warped)."""
        if not isinstance(vertices, dict):
            vertices = {m.image_id: m.warped_vertices for m in vertices}
        x = np.empty(self.size)
        for m in self.meshes:
            o = self.offsets[m.image_id]
            x[2 * o:2 * (o + m.n_vertices)] = np.asarray(vertices[m.image_id], dtype=float).ravel()
        return x

    def unpack(self, x) -> dict:
        out = {}
        for m in self.meshes:
            o = self.offsets[m.image_id]
            out[m.image_id] = np.asarray(x[2 * o:2 * (o + m.n_vertices)]).reshape(-1, 2).copy()
        return out

    def describe_column(self, c):
        c = int(c)
        slot, axis = divmod(c, 2)
        for m in self.meshes:
            o = self.offsets[m.image_id]
            if o <= slot < o + m.n_vertices:
                return m.image_id, slot - o, "xy"[axis]
        raise IndexError(c)


@dataclass(eq=False)
class QuadraticTerm:
    """Weighted sum of squared linear residuals ``weight * ||A x - b||^2``."""

    kind: str
    A: sp.csr_matrix
    b: np.ndarray
    weight: float = 1.0

    @property
    def n_rows(self):
        return self.A.shape[0]

    def residuals(self, x):
        return self.A @ x - self.b

    def raw_value(self, x) -> float:
        r = self.residuals(x)
        return float(r @ r)

    def value(self, x) -> float:
        return self.weight * self.raw_value(x)

    def with_weight(self, weight) -> "QuadraticTerm":
        return QuadraticTerm(self.kind, self.A, self.b, weight)


class _Rows:
    def __init__(self, n_cols):
        self.n_cols = n_cols
        self.n = 0
        self.r, self.c, self.v, self.b = [], [], [], []

    def add(self, cols, vals, rhs):
        """Add ``k`` rows; ``cols``/``vals`` are (k, m) arrays, ``rhs`` (k,)."""
        cols = np.atleast_2d(np.asarray(cols, dtype=np.int64))
        vals = np.atleast_2d(np.asarray(vals, dtype=float))
        k = cols.shape[0]
        if k == 0:
            return
        rows = np.repeat(np.arange(self.n, self.n + k), cols.shape[1])
        self.r.append(rows)
        self.c.append(cols.ravel())
        self.v.append(vals.ravel())
        self.b.append(np.broadcast_to(np.asarray(rhs, dtype=float), (k,)).copy())
        self.n += k

    def term(self, kind, weight) -> QuadraticTerm:
        if self.n == 0:
            A = sp.csr_matrix((0, self.n_cols))
            return QuadraticTerm(kind, A, np.zeros(0), weight)
        A = sp.coo_matrix((np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))),
                          shape=(self.n, self.n_cols)).tocsr()
        A.sum_duplicates()
        return QuadraticTerm(kind, A, np.concatenate(self.b), weight)


# ---------------------------------------------------------------------------
# terms

def term_feature_alignment(scene, graph, layout: VariableLayout, weight=1.0) -> QuadraticTerm:
    """Matched feature points of every graph edge should land on the same spot."""
    rows = _Rows(layout.size)
    for m in scene.matches:
        key = (min(m.i, m.j), max(m.i, m.j))
        if key not in graph.edges:
            continue
        try:
            vi, wi = anchor_arrays(layout.mesh(m.i), m.points[:, :2])
            vj, wj = anchor_arrays(layout.mesh(m.j), m.points[:, 2:])
        except OutOfDomainError as exc:
            raise OutOfDomainError(f"match set ({m.i}, {m.j}): {exc}") from None
        for axis in (0, 1):
            cols = np.hstack([layout.col(m.i, vi, axis), layout.col(m.j, vj, axis)])
            vals = np.hstack([wi, -wj])
            rows.add(cols, vals, 0.0)
    return rows.term("alignment", weight)


def shape_triangles(mesh: GridMesh):
    """(n, 3) vertex ids ``(apex, right-angle, other)`` and ``ratio`` for all 4 triangles per quad."""
    quads = mesh.all_quads()
    tri = np.concatenate([quads[:, list(t)] for t in TRIANGLES])
    rest = mesh.rest_vertices
    a = np.linalg.norm(rest[tri[:, 0]] - rest[tri[:, 1]], axis=1)
    d = np.linalg.norm(rest[tri[:, 2]] - rest[tri[:, 1]], axis=1)
    if np.any(a <= 0) or np.any(d <= 0):
        raise GeometryError(f"mesh {mesh.image_id} has a degenerate rest triangle")
    return tri, a / d


def term_shape_consistency(layout: VariableLayout, saliency=None, weight=1.0) -> QuadraticTerm:
    """As-rigid-as-possible triangle residuals, 4 right triangles per quad.

    ``saliency`` optionally maps image_id -> per-vertex weights; each residual
    is scaled by the square root of its apex vertex's weight.
    """
    rows = _Rows(layout.size)
    for mesh in layout.meshes:
        tri, ratio = shape_triangles(mesh)
        j, j1, j0 = tri[:, 0], tri[:, 1], tri[:, 2]
        alpha = np.ones(mesh.n_vertices)
        if saliency is not None and mesh.image_id in saliency:
            alpha = np.asarray(saliency[mesh.image_id], dtype=float)
        s = np.sqrt(alpha[j])[:, None]
        img = mesh.image_id
        one = np.ones_like(ratio)
        # R = rotation by 90 degrees: R(u) = (u_y, -u_x)
        cols_x = np.stack([layout.col(img, j, 0), layout.col(img, j1, 0),
                           layout.col(img, j0, 1), layout.col(img, j1, 1)], axis=1)
        vals_x = np.stack([one, -one, -ratio, ratio], axis=1) * s
        cols_y = np.stack([layout.col(img, j, 1), layout.col(img, j1, 1),
                           layout.col(img, j0, 0), layout.col(img, j1, 0)], axis=1)
        vals_y = np.stack([one, -one, ratio, -ratio], axis=1) * s
        rows.add(cols_x, vals_x, 0.0)
        rows.add(cols_y, vals_y, 0.0)
    return rows.term("shape", weight)


def overlap_quads(mesh: GridMesh, points) -> np.ndarray:
    """Boolean (rows, cols) mask of quads holding a matched point, dilated by one ring."""
    mask = np.zeros((mesh.rows, mesh.cols), dtype=bool)
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts):
        cw, ch = mesh.cell_size
        c = np.clip((pts[:, 0] // cw).astype(int), 0, mesh.cols - 1)
        r = np.clip((pts[:, 1] // ch).astype(int), 0, mesh.rows - 1)
        mask[r, c] = True
        mask = ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool))
    return mask


def quad_distances(overlap: np.ndarray) -> np.ndarray:
    """Chebyshev distance (in quads) from each quad centre to the nearest overlap quad."""
    if not overlap.any():
        return np.zeros(overlap.shape)
    return ndimage.distance_transform_cdt(~overlap, metric="chessboard").astype(float)


def mesh_edges(mesh: GridMesh):
    """All grid edges as (n, 2) vertex ids plus the quads on either side (-1 if none)."""
    R, C = mesh.rows, mesh.cols
    edges, quads = [], []
    for r in range(R + 1):
        for c in range(C):
            edges.append((mesh.vid(r, c), mesh.vid(r, c + 1)))
            quads.append((r - 1, c, r, c))
    for r in range(R):
        for c in range(C + 1):
            edges.append((mesh.vid(r, c), mesh.vid(r + 1, c)))
            quads.append((r, c - 1, r, c))
    return np.array(edges, dtype=np.int64), np.array(quads, dtype=np.int64)


def similarity_edge_weights(mesh: GridMesh, points) -> np.ndarray:
    """Per-edge weights: mean quad distance to the overlap region, normalised by the grid diagonal."""
    overlap = overlap_quads(mesh, points)
    dist = quad_distances(overlap)
    edges, quads = mesh_edges(mesh)
    total = np.zeros(len(edges))
    count = np.zeros(len(edges))
    for k in (0, 2):
        r, c = quads[:, k], quads[:, k + 1]
        ok = (r >= 0) & (r < mesh.rows) & (c >= 0) & (c < mesh.cols)
        total[ok] += dist[r[ok], c[ok]]
        count[ok] += 1
    edge_w = total / (math.hypot(mesh.rows, mesh.cols) * count)
    if overlap.all():
        # every quad overlaps: the printed weight vanishes everywhere and would
        # leave scale and rotation unconstrained
        edge_w = np.full(len(edges), 1.0 / math.hypot(mesh.rows, mesh.cols))
    return edge_w


def matched_points(scene, image_id) -> np.ndarray:
    pts = []
    for m in scene.matches_for(image_id):
        a, _ = m.oriented(image_id, m.j if m.i == image_id else m.i)
        pts.append(a)
    return np.vstack(pts) if pts else np.zeros((0, 2))


def term_global_similarity(layout: VariableLayout, params, scene, weight=1.0, pixel_units=True,
                           include_reference=True) -> QuadraticTerm:
    """Pull every mesh edge toward its image's target scale and rotation (the reference uses ``s=1``).

    With ``pixel_units`` each residual is multiplied by the rest edge length, so
    the term measures ``|e - s R(theta) e0|`` in pixels like the other terms.
    The bare coefficient form is scale-free and lets noisy alignment shrink the
    whole panorama toward a point.
    """
    rows = _Rows(layout.size)
    for mesh in layout.meshes:
        img = mesh.image_id
        if img == params.reference and not include_reference:
            continue
        s, th = params.scales[img], params.angles[img]
        edges, _ = mesh_edges(mesh)
        edge_w = similarity_edge_weights(mesh, matched_points(scene, img))
        keep = edge_w > 0
        edges, edge_w = edges[keep], edge_w[keep]
        a, b = edges[:, 0], edges[:, 1]
        e0 = mesh.rest_vertices[b] - mesh.rest_vertices[a]
        n2 = np.sum(e0 * e0, axis=1)
        sb = np.sqrt(edge_w)
        if pixel_units:
            sb = sb * np.sqrt(n2)
        ex, ey = e0[:, 0] / n2, e0[:, 1] / n2
        xa, ya = layout.col(img, a, 0), layout.col(img, a, 1)
        xb, yb = layout.col(img, b, 0), layout.col(img, b, 1)
        # c_x = (e . e0) / |e0|^2
        rows.add(np.stack([xb, xa, yb, ya], axis=1),
                 np.stack([ex, -ex, ey, -ey], axis=1) * sb[:, None],
                 sb * s * math.cos(th))
        # c_y = (e0 x e) / |e0|^2
        rows.add(np.stack([yb, ya, xb, xa], axis=1),
                 np.stack([ex, -ex, -ey, ey], axis=1) * sb[:, None],
                 sb * s * math.sin(th))
    return rows.term("similarity", weight)


def line_samples(scene, spacing):
    """Yield (image_id, samples) for every stored segment."""
    for img, segs in sorted(scene.lines.items()):
        for seg in np.asarray(segs, dtype=float).reshape(-1, 4):
            yield img, sample_line(seg, spacing)


def term_line_preservation(layout: VariableLayout, scene, spacing=20.0, weight=1.0) -> QuadraticTerm:
    """Interior line samples should stay on the chord between the warped endpoints."""
    rows = _Rows(layout.size)
    skipped = 0
    for img, samples in line_samples(scene, spacing):
        p = len(samples) - 1
        if p < 2:
            skipped += 1
            continue
        vids, w = anchor_arrays(layout.mesh(img), samples)
        j = np.arange(1, p)
        t = j / p
        for axis in (0, 1):
            c0 = np.broadcast_to(layout.col(img, vids[0], axis), (len(j), 4))
            cp = np.broadcast_to(layout.col(img, vids[p], axis), (len(j), 4))
            cj = layout.col(img, vids[j], axis)
            vals = np.hstack([(1 - t)[:, None] * w[0][None, :], t[:, None] * w[p][None, :], -w[j]])
            rows.add(np.hstack([c0, cp, cj]), vals, 0.0)
    if skipped:
        log.warning("skipped %d line segment(s) shorter than two sample spacings", skipped)
    return rows.term("line", weight)


def term_regular_boundary(layout: VariableLayout, sections, weight=1.0) -> QuadraticTerm:
    """Boundary points of each section should sit on the section's target line.

    ``sections`` is an iterable of objects with ``dir`` (0 horizontal, 1 vertical),
    ``val`` and ``points`` (``BoundaryPoint``).
    """
    rows = _Rows(layout.size)
    for sec in sections:
        axis = 1 if sec.dir == 0 else 0
        for pt in sec.points:
            if pt.on_vertex == 1:
                img, v = pt.vertex
                rows.add([[layout.col(img, v, axis)]], [[1.0]], sec.val)
            else:
                if pt.edge_vertices is None or pt.mix is None:
                    raise GeometryError(f"intersection point at {tuple(pt.position)} lacks interpolation weights")
                cols = [layout.col(img, v, axis) for img, v in pt.edge_vertices]
                rows.add([cols], [pt.mix], sec.val)
    return rows.term("boundary", weight)


# ---------------------------------------------------------------------------
# assembly and solve

@dataclass(eq=False)
class SparseQuadratic:
    """``E(x) = x^T H x - 2 g^T x + c`` with some coordinates pinned."""

    H: sp.csr_matrix
    g: np.ndarray
    c: float
    layout: VariableLayout
    terms: list = field(default_factory=list)

    def value(self, x) -> float:
        return float(x @ (self.H @ x) - 2.0 * self.g @ x + self.c)

    def gradient(self, x) -> np.ndarray:
        return 2.0 * (self.H @ x - self.g)

    def breakdown(self, x) -> dict:
        out = {}
        for t in self.terms:
            out[t.kind] = out.get(t.kind, 0.0) + t.value(x)
        return out

    def reduced(self):
        """Free-coordinate system ``H_ff x_f = rhs`` after substituting pinned values."""
        fc, fv = self.layout.fixed_columns()
        free = np.setdiff1d(np.arange(self.layout.size), fc)
        Hff = self.H[free][:, free].tocsc()
        rhs = self.g[free] - (self.H[free][:, fc] @ fv if len(fc) else 0.0)
        return free, fc, fv, Hff, rhs

    def expand(self, xf, free, fc, fv):
        x = np.empty(self.layout.size)
        x[free] = xf
        x[fc] = fv
        return x


def assemble(terms, layout: VariableLayout) -> SparseQuadratic:
    terms = [t for t in terms if t is not None]
    if not terms:
        raise InvalidInputError("assemble needs at least one term")
    n = layout.size
    H = sp.csr_matrix((n, n))
    g = np.zeros(n)
    c = 0.0
    for t in terms:
        if t.n_rows == 0 or t.weight == 0:
            continue
        At = t.A.T.tocsr()
        H = H + t.weight * (At @ t.A)
        g += t.weight * (At @ t.b)
        c += t.weight * float(t.b @ t.b)
    H = ((H + H.T) * 0.5).tocsr()
    return SparseQuadratic(H, g, c, layout, list(terms))


@dataclass
class SolveResult:
    x: np.ndarray
    energy: float
    iterations: int
    gradient_norm: float
    mode: str


def _null_directions(system, Hff, free, limit=4000):
    n = Hff.shape[0]
    if n > limit:
        return ["(system too large to enumerate null directions)"]
    w, V = np.linalg.eigh(Hff.toarray())
    tol = 1e-9 * max(abs(w).max(), 1.0)
    names = []
    for k in np.where(w <= tol)[0][:8]:
        v = V[:, k]
        top = np.argsort(-np.abs(v))[:3]
        cols = [system.layout.describe_column(free[i]) for i in top]
        imgs = sorted({c[0] for c in cols})
        names.append("images %s: vertices %s" % (imgs, ", ".join(f"{c[1]}{c[2]}" for c in cols)))
    return names


def minimize(system: SparseQuadratic, init=None, mode="direct", max_iter=20000) -> SolveResult:
    """Minimise the quadratic; ``init`` (full vector) warm-starts the iterative mode."""
    free, fc, fv, Hff, rhs = system.reduced()
    tol = 1e-8 * (1.0 + np.linalg.norm(rhs))
    iterations = 0
    if mode == "direct":
        try:
            lu = spla.splu(Hff, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                           options={"SymmetricMode": True})
        except RuntimeError:
            raise RankDeficiencyError("energy system is singular after fixing vertices",
                                      _null_directions(system, Hff, free)) from None
        piv = np.abs(lu.U.diagonal())
        if piv.min() <= 1e-11 * piv.max():
            dirs = _null_directions(system, Hff, free)
            raise RankDeficiencyError(
                "energy system is rank deficient after fixing vertices; free null directions: "
                + "; ".join(dirs), dirs)
        xf = lu.solve(rhs)
        for _ in range(3):
            r = rhs - Hff @ xf
            if 2.0 * np.linalg.norm(r) <= tol:
                break
            xf = xf + lu.solve(r)
    elif mode == "iterative":
        x0 = None if init is None else np.asarray(init, dtype=float)[free]
        d = Hff.diagonal()
        if np.any(d <= 0):
            raise RankDeficiencyError("unconstrained coordinates in energy system",
                                      [system.layout.describe_column(free[i]) for i in np.where(d <= 0)[0][:8]])
        M = sp.diags(1.0 / d)
        count = [0]

        def cb(_):
            count[0] += 1

        # gradient = 2 * residual, so half the tolerance on the residual
        xf, info = spla.cg(Hff, rhs, x0=x0, rtol=0.0, atol=0.5 * tol, maxiter=max_iter, M=M, callback=cb)
        iterations = count[0]
        if info != 0:
            raise ConvergenceError(f"conjugate gradient stopped after {iterations} iterations",
                                   float(np.linalg.norm(rhs - Hff @ xf)))
    else:
        raise InvalidInputError(f"unknown solve mode {mode!r}")
    x = system.expand(xf, free, fc, fv)
    gn = 2.0 * float(np.linalg.norm(rhs - Hff @ xf))
    return SolveResult(x, system.value(x), iterations, gn, mode)


def saliency_from_boxes(mesh: GridMesh, boxes, value=FACE_SALIENCY) -> np.ndarray:
    """Per-vertex shape weights: ``value`` for rest vertices inside any box, 1 elsewhere."""
    alpha = np.ones(mesh.n_vertices)
    rest = mesh.rest_vertices
    for x, y, w, h in boxes:
        inside = (rest[:, 0] >= x) & (rest[:, 0] <= x + w) & (rest[:, 1] >= y) & (rest[:, 1] <= y + h)
        alpha[inside] = value
    return alpha
