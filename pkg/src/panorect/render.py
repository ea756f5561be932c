"""Texture-map warped meshes into a panorama, feather-blend them and find a crop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import cv2
import numpy as np
from PIL import Image

from .errors import InvalidInputError, OutOfDomainError, ScaleMismatchError
from .mesh import GridMesh, mesh_outline

log = logging.getLogger(__name__)

FEATHER_FLOOR = 1e-4


@dataclass(frozen=True)
class Frame:
    """Integer pixel grid of the output; pixel (c, r) has its centre at (x0 + c + 0.5, y0 + r + 0.5)."""

    x0: int
    y0: int
    width: int
    height: int


@dataclass(eq=False)
class WarpedLayer:
    image_id: int
    color: np.ndarray  # (H, W, C) float
    alpha: np.ndarray  # (H, W) bool
    weight: np.ndarray  # (H, W) float in [0, 1]
    frame: Frame
    skipped_quads: int = 0


@dataclass(eq=False)
class Panorama:
    color: np.ndarray  # (H, W, C) uint8
    coverage: np.ndarray  # (H, W) bool
    frame: Frame
    crop: tuple | None = None  # (x, y, w, h) in pixels of ``color``

    @property
    def origin(self):
        return self.frame.x0, self.frame.y0


def frame_for(meshes, pad=0) -> Frame:
    """Bounding box of all warped outlines, rounded outward to whole pixels."""
    pts = np.vstack([mesh_outline(m).points for m in meshes])
    # tolerate solver round-off so an edge at x = -1e-9 does not add a blank column
    x0, y0 = np.floor(pts.min(axis=0) + 1e-6).astype(int) - pad
    x1, y1 = np.ceil(pts.max(axis=0) - 1e-6).astype(int) + pad
    return Frame(int(x0), int(y0), int(max(1, x1 - x0)), int(max(1, y1 - y0)))


def _triangle_maps(dst, src, frame, map_x, map_y, cover):
    """Fill the inverse map for pixels whose centres fall in triangle ``dst``."""
    lo = np.floor(dst.min(axis=0) - [frame.x0, frame.y0] - 0.5).astype(int)
    hi = np.ceil(dst.max(axis=0) - [frame.x0, frame.y0] - 0.5).astype(int)
    c0, r0 = max(lo[0], 0), max(lo[1], 0)
    c1, r1 = min(hi[0], frame.width - 1), min(hi[1], frame.height - 1)
    if c1 < c0 or r1 < r0:
        return
    cs, rs = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
    px = cs + frame.x0 + 0.5
    py = rs + frame.y0 + 0.5
    a, b, c = dst
    m = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
    det = np.linalg.det(m)
    if abs(det) < 1e-12:
        return
    inv = np.linalg.inv(m)
    dx, dy = px - a[0], py - a[1]
    l1 = inv[0, 0] * dx + inv[0, 1] * dy
    l2 = inv[1, 0] * dx + inv[1, 1] * dy
    tol = -1e-9
    inside = (l1 >= tol) & (l2 >= tol) & (l1 + l2 <= 1 - tol)
    if not inside.any():
        return
    sx = src[0, 0] + l1 * (src[1, 0] - src[0, 0]) + l2 * (src[2, 0] - src[0, 0])
    sy = src[0, 1] + l1 * (src[1, 1] - src[0, 1]) + l2 * (src[2, 1] - src[0, 1])
    rr, cc = rs[inside], cs[inside]
    # source pixel centres sit at integer + 0.5; remap indexes by centre
    map_x[rr, cc] = sx[inside] - 0.5
    map_y[rr, cc] = sy[inside] - 0.5
    cover[rr, cc] = True


def feather_weights(alpha: np.ndarray) -> np.ndarray:
    """Distance to the layer outline, scaled to a maximum of 1 and floored inside the coverage."""
    if not alpha.any():
        return np.zeros(alpha.shape)
    padded = np.pad(alpha.astype(np.uint8), 1)
    dist = cv2.distanceTransform(padded, cv2.DIST_L2, cv2.DIST_MASK_PRECISE)[1:-1, 1:-1].astype(float)
    dist /= dist.max()
    return np.where(alpha, np.maximum(dist, FEATHER_FLOOR), 0.0)


def warp_image(image: np.ndarray, mesh: GridMesh, frame: Frame | None = None) -> WarpedLayer:
    """Inverse-map every warped quad (as two affine triangles) with bilinear sampling."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[0] != mesh.height or img.shape[1] != mesh.width:
        log.warning("image %d is %dx%d but its mesh covers %gx%g", mesh.image_id, img.shape[1], img.shape[0],
                    mesh.width, mesh.height)
    frame = frame or frame_for([mesh])
    map_x = np.full((frame.height, frame.width), -1.0, dtype=np.float32)
    map_y = np.full((frame.height, frame.width), -1.0, dtype=np.float32)
    cover = np.zeros((frame.height, frame.width), dtype=bool)
    rest, warped = mesh.rest_vertices, mesh.warped_vertices
    skipped = 0
    for q in mesh.all_quads():
        wq = warped[q]
        area = 0.5 * np.sum(wq[:, 0] * np.roll(wq[:, 1], -1) - np.roll(wq[:, 0], -1) * wq[:, 1])
        if area <= 0:
            skipped += 1
            continue
        for tri in ((0, 1, 2), (0, 2, 3)):
            idx = q[list(tri)]
            _triangle_maps(warped[idx], rest[idx], frame, map_x, map_y, cover)
    if skipped:
        log.warning("image %d: %d degenerate warped quads skipped", mesh.image_id, skipped)
    src = img.astype(np.float32)
    out = cv2.remap(src, map_x, map_y, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    if out.ndim == 2:
        out = out[..., None]
    out = np.where(cover[..., None], out, 0.0).astype(float)
    return WarpedLayer(mesh.image_id, out, cover, feather_weights(cover), frame, skipped)


def blend(layers) -> Panorama:
    """Feather-weighted average of layers sharing one frame."""
    layers = list(layers)
    if not layers:
        raise InvalidInputError("blend needs at least one layer")
    frame = layers[0].frame
    if any(l.frame != frame for l in layers):
        raise InvalidInputError("layers are on different frames")
    num = np.zeros_like(layers[0].color)
    den = np.zeros(layers[0].alpha.shape)
    cover = np.zeros(layers[0].alpha.shape, dtype=bool)
    for l in layers:
        w = np.where(l.alpha, l.weight, 0.0)
        num += w[..., None] * l.color
        den += w
        cover |= l.alpha
    color = np.zeros_like(num)
    ok = den > 0
    color[ok] = num[ok] / den[ok, None]
    out = np.clip(np.round(color), 0, 255).astype(np.uint8)
    return Panorama(out, cover, frame)


def render(images: dict, meshes, frame: Frame | None = None) -> Panorama:
    frame = frame or frame_for(meshes)
    return blend(warp_image(images[m.image_id], m, frame) for m in meshes)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def upscale_meshes(scene, state):
    """Meshes on the original images: per-image rest lattices, one output scale for all warped vertices."""
    factors = dict(state.scale_factors) or {m.image_id: 1.0 for m in state.meshes}
    out = []
    ref = scene.reference
    if ref not in factors:
        raise ScaleMismatchError(f"no scale factor recorded for reference image {ref}")
    s_out = 1.0 / factors[ref]
    for m in state.meshes:
        if m.image_id not in factors:
            raise ScaleMismatchError(f"no scale factor recorded for image {m.image_id}")
        f = factors[m.image_id]
        im = scene.image(m.image_id)
        if abs(m.width - im.width * f) > 1e-6 * max(1.0, im.width) or \
                abs(m.height - im.height * f) > 1e-6 * max(1.0, im.height):
            raise ScaleMismatchError(f"image {m.image_id}: mesh is {m.width}x{m.height}, expected "
                                     f"{im.width}x{im.height} scaled by {f}")
        out.append(GridMesh(m.image_id, m.rows, m.cols, im.width, im.height,
                            np.asarray(m.rest_vertices) / f, np.asarray(m.warped_vertices) * s_out))
    return out


def render_at_full_resolution(scene, state, images: dict | None = None) -> Panorama:
    """Warp and blend the original images using the (possibly downsampled) solved meshes."""
    meshes = upscale_meshes(scene, state)
    if images is None:
        images = {m.image_id: load_image(scene.image_path(m.image_id)) for m in meshes}
    return render(images, meshes)


def _largest_in_histogram(h):
    """(area, left, width, height) of the largest rectangle under histogram ``h``."""
    best = (0, 0, 0, 0)
    stack = []  # (start, height)
    for i, v in enumerate(list(h) + [0]):
        start = i
        while stack and stack[-1][1] >= v:
            s, hv = stack.pop()
            area = hv * (i - s)
            if area > best[0]:
                best = (area, s, i - s, hv)
            start = s
        stack.append((start, v))
    return best


def largest_interior_rectangle(mask) -> tuple:
    """Largest axis-aligned all-True rectangle ``(x, y, w, h)`` of a boolean mask."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2 or not m.any():
        raise OutOfDomainError("coverage mask is empty")
    heights = np.zeros(m.shape[1], dtype=int)
    best = (0, 0, 0, 0, 0)
    for r in range(m.shape[0]):
        heights = np.where(m[r], heights + 1, 0)
        area, left, width, height = _largest_in_histogram(heights.tolist())
        if area > best[0]:
            best = (area, left, r - height + 1, width, height)
    _, x, y, w, h = best
    return int(x), int(y), int(w), int(h)


def crop_area(mask) -> int:
    _, _, w, h = largest_interior_rectangle(mask)
    return w * h


def coverage_mask(meshes, frame: Frame | None = None, scale=1.0) -> tuple[np.ndarray, Frame]:
    """Pixels whose centres fall in a warped quad, by the same triangle test ``warp_image`` uses."""
    scaled = [m.with_warped(np.asarray(m.warped_vertices) * scale) for m in meshes]
    frame = frame or frame_for(scaled)
    map_x = np.empty((frame.height, frame.width), dtype=np.float32)
    map_y = np.empty_like(map_x)
    cover = np.zeros((frame.height, frame.width), dtype=bool)
    for m in scaled:
        warped = m.warped_vertices
        for q in m.all_quads():
            for tri in ((0, 1, 2), (0, 2, 3)):
                idx = q[list(tri)]
                _triangle_maps(warped[idx], warped[idx], frame, map_x, map_y, cover)
    return cover, frame


def save_png(path, panorama: Panorama, alpha=True):
    rgb = panorama.color
    if rgb.shape[2] == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    if alpha:
        a = (panorama.coverage * 255).astype(np.uint8)[..., None]
        Image.fromarray(np.concatenate([rgb, a], axis=2), "RGBA").save(path)
    else:
        Image.fromarray(rgb, "RGB").save(path)


def save_mask(path, mask):
    Image.fromarray((np.asarray(mask, dtype=bool) * 255).astype(np.uint8), "L").save(path)


def psnr(a, b) -> float:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    mse = float(np.mean(d * d))
    return math.inf if mse == 0 else 10 * math.log10(255.0 ** 2 / mse)
