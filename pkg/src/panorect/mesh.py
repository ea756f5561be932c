"""Regular quad meshes, bilinear anchors and mesh outlines."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, OutOfDomainError

log = logging.getLogger(__name__)

CLAMP_TOL = 1e-9


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GridMesh:
    """A ``rows x cols`` lattice of quads laid over one image.

    Vertices are stored row-major: vertex ``(r, c)`` has index ``r * (cols + 1) + c``.
    ``rest_vertices`` are image pixel coordinates, ``warped_vertices`` live in the
    panorama frame.
    """

    image_id: int
    rows: int
    cols: int
    width: float
    height: float
    rest_vertices: np.ndarray
    warped_vertices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rest_vertices", _frozen(self.rest_vertices))
        object.__setattr__(self, "warped_vertices", _frozen(self.warped_vertices))
        n = (self.rows + 1) * (self.cols + 1)
        if self.rest_vertices.shape != (n, 2) or self.warped_vertices.shape != (n, 2):
            raise InvalidInputError(f"mesh {self.image_id}: expected {n} vertices")

    @property
    def n_vertices(self) -> int:
        return (self.rows + 1) * (self.cols + 1)

    @property
    def cell_size(self) -> tuple[float, float]:
        return self.width / self.cols, self.height / self.rows

    def vid(self, r, c):
        return r * (self.cols + 1) + c

    def quad_vertices(self, r: int, c: int) -> np.ndarray:
        """Vertex ids of quad (r, c) in the order TL, TR, BR, BL."""
        k = self.cols + 1
        tl = r * k + c
        return np.array([tl, tl + 1, tl + k + 1, tl + k])

    def all_quads(self) -> np.ndarray:
        """(rows*cols, 4) vertex ids, TL/TR/BR/BL per quad, row-major."""
        r, c = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        tl = (r * (self.cols + 1) + c).ravel()
        k = self.cols + 1
        return np.stack([tl, tl + 1, tl + k + 1, tl + k], axis=1)

    def with_warped(self, warped) -> "GridMesh":
        return GridMesh(self.image_id, self.rows, self.cols, self.width, self.height,
                        self.rest_vertices, warped)

    def grid(self, which="warped") -> np.ndarray:
        v = self.warped_vertices if which == "warped" else self.rest_vertices
        return v.reshape(self.rows + 1, self.cols + 1, 2)


@dataclass(frozen=True, eq=False)
class BilinearAnchor:
    """A rest-space point expressed as a convex combination of one quad's corners."""

    image_id: int
    quad: tuple[int, int]
    vertices: np.ndarray  # 4 vertex ids, TL, TR, BR, BL
    weights: np.ndarray = field(repr=True)

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.int64))
        object.__setattr__(self, "weights", _frozen(self.weights))


def build_grid_mesh(image_width, image_height, target_cell=40.0, image_id=0) -> GridMesh:
    if image_width <= 0 or image_height <= 0 or target_cell <= 0:
        raise InvalidInputError(
            f"mesh dimensions must be positive, got {image_width}x{image_height} cell {target_cell}")
    cols = max(1, int(round(image_width / target_cell)))
    rows = max(1, int(round(image_height / target_cell)))
    xs = np.linspace(0.0, float(image_width), cols + 1)
    ys = np.linspace(0.0, float(image_height), rows + 1)
    gx, gy = np.meshgrid(xs, ys)
    rest = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return GridMesh(image_id, rows, cols, float(image_width), float(image_height), rest, rest)


def bilinear_anchor(mesh: GridMesh, point) -> BilinearAnchor:
    x, y = float(point[0]), float(point[1])
    tol = CLAMP_TOL * max(1.0, mesh.width, mesh.height)
    if not (-tol <= x <= mesh.width + tol and -tol <= y <= mesh.height + tol):
        raise OutOfDomainError(
            f"point ({x}, {y}) outside mesh {mesh.image_id} lattice [0,{mesh.width}]x[0,{mesh.height}]")
    x = min(max(x, 0.0), mesh.width)
    y = min(max(y, 0.0), mesh.height)
    cw, ch = mesh.cell_size
    c = min(int(x // cw), mesh.cols - 1)
    r = min(int(y // ch), mesh.rows - 1)
    u = min(max((x - c * cw) / cw, 0.0), 1.0)
    v = min(max((y - r * ch) / ch, 0.0), 1.0)
    w = np.array([(1 - u) * (1 - v), u * (1 - v), u * v, (1 - u) * v])
    return BilinearAnchor(mesh.image_id, (r, c), mesh.quad_vertices(r, c), w)


def anchor_position(anchor: BilinearAnchor, warped) -> np.ndarray:
    warped = np.asarray(warped, dtype=float)
    return anchor.weights @ warped[anchor.vertices]


def anchor_arrays(mesh: GridMesh, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised anchors: returns (n, 4) vertex ids and (n, 4) weights."""
    anchors = [bilinear_anchor(mesh, p) for p in np.asarray(points, dtype=float).reshape(-1, 2)]
    if not anchors:
        return np.zeros((0, 4), dtype=np.int64), np.zeros((0, 4))
    return (np.array([a.vertices for a in anchors]), np.array([a.weights for a in anchors]))


@dataclass(frozen=True, eq=False)
class Outline:
    image_id: int
    indices: np.ndarray
    points: np.ndarray
    folded: bool = False

    def signed_area(self) -> float:
        return signed_area(self.points)


def signed_area(points) -> float:
    """Shoelace area; positive for clockwise loops in y-down image coordinates."""
    p = np.asarray(points, dtype=float)
    q = np.roll(p, -1, axis=0)
    return 0.5 * float(np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]))


def outline_indices(mesh: GridMesh) -> np.ndarray:
    R, C = mesh.rows, mesh.cols
    top = [mesh.vid(0, c) for c in range(C)]
    right = [mesh.vid(r, C) for r in range(R)]
    bottom = [mesh.vid(R, c) for c in range(C, 0, -1)]
    left = [mesh.vid(r, 0) for r in range(R, 0, -1)]
    return np.array(top + right + bottom + left, dtype=np.int64)


def segments_self_intersect(points) -> bool:
    """True if any two non-adjacent edges of the closed loop intersect."""
    p = np.asarray(points, dtype=float)
    n = len(p)
    a, b = p, np.roll(p, -1, axis=0)
    for i in range(n):
        # skip neighbours that share an endpoint
        js = np.arange(i + 2, n)
        if i == 0:
            js = js[js != n - 1]
        if js.size == 0:
            continue
        c, d = a[js], b[js]
        d1 = _cross(b[i] - a[i], c - a[i])
        d2 = _cross(b[i] - a[i], d - a[i])
        d3 = _cross(d - c, a[i] - c)
        d4 = _cross(d - c, b[i] - c)
        if np.any((d1 * d2 < 0) & (d3 * d4 < 0)):
            return True
    return False


def _cross(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def mesh_outline(mesh: GridMesh, use_warped=True) -> Outline:
    idx = outline_indices(mesh)
    pts = (mesh.warped_vertices if use_warped else mesh.rest_vertices)[idx]
    folded = False
    if use_warped:
        folded = signed_area(pts) <= 0 or segments_self_intersect(pts)
        if folded:
            log.warning("warped outline of mesh %d folds over", mesh.image_id)
    return Outline(mesh.image_id, idx, np.array(pts), folded)
