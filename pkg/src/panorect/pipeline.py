"""End-to-end stitching with regular boundaries."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import energy as en
from .boundary import (BoundaryTarget, extract_sides, find_steps, rectangle_sections, remove_step,
                       side_sections)
from .errors import InvalidInputError, OutOfDomainError
from .mesh import GridMesh, anchor_arrays, build_grid_mesh, mesh_outline
from .polygon import CompoundPolygon, Polygon, polygon_union
from .scene import Scene, build_match_graph, estimate_global_similarity, sample_line

log = logging.getLogger(__name__)

MODES = ("stitch", "rect", "piecewise")
REBIND_TOL = 0.25  # px; re-solve while the refreshed boundary is further than this from its lines


@dataclass
class PipelineConfig:
    weights: en.EnergyWeights = field(default_factory=en.EnergyWeights)
    grid_cell: float = 40.0
    min_matches: int = 8
    line_spacing: float | None = None  # defaults to half a grid cell
    refine: bool = True
    accept_ratio: float = 0.05
    step_clearance_cells: float = 2.0
    solve_mode: str = "direct"
    refine_solve_mode: str = "iterative"
    rebind_rounds: int = 8
    downsample_mp: float = 0.5
    seed: int = 0
    similarity_pixel_units: bool = True

    @property
    def spacing(self):
        return self.line_spacing if self.line_spacing else 0.5 * self.grid_cell


@dataclass(eq=False)
class WarpState:
    meshes: list
    energy: float
    breakdown: dict
    iteration: int = 0
    target: BoundaryTarget | None = None
    scale_factors: dict = field(default_factory=dict)

    def vertices(self) -> dict:
        return {m.image_id: np.array(m.warped_vertices) for m in self.meshes}

    def mesh(self, image_id) -> GridMesh:
        for m in self.meshes:
            if m.image_id == image_id:
                return m
        raise KeyError(image_id)


@dataclass
class IterationRecord:
    iteration: int
    step: dict
    energy_before: float
    energy_after: float
    accepted: bool
    sections_before: int
    sections_after: int


@dataclass
class RunReport:
    mode: str = "piecewise"
    energies: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    boundary: dict | None = None
    timings: dict = field(default_factory=dict)
    breakdown: dict = field(default_factory=dict)
    max_boundary_deviation: float | None = None
    crop: list | None = None
    scale_factors: dict = field(default_factory=dict)

    def to_json(self, timings=True):
        d = {
            "mode": self.mode,
            "energies": [float(e) for e in self.energies],
            "iterations": [vars(it) for it in self.iterations],
            "boundary": self.boundary,
            "energy_breakdown": {k: float(v) for k, v in sorted(self.breakdown.items())},
            "max_boundary_deviation": self.max_boundary_deviation,
            "crop": self.crop,
            "scale_factors": {str(k): float(v) for k, v in sorted(self.scale_factors.items())},
        }
        if timings:
            d["timings"] = {k: round(v, 6) for k, v in self.timings.items()}
        return d


class Stitcher:
    """Holds the scene-dependent pieces (meshes, graph, fixed energy terms) shared by every solve."""

    def __init__(self, scene: Scene, config: PipelineConfig | None = None, saliency=None):
        self.scene = scene
        self.config = config or PipelineConfig()
        self.meshes = [build_grid_mesh(im.width, im.height, self.config.grid_cell, im.id) for im in scene.images]
        self.layout0 = en.VariableLayout(self.meshes)
        self.graph = build_match_graph(scene, self.config.min_matches)
        self.params = estimate_global_similarity(scene, self.graph) if len(scene.images) > 1 else None
        self.saliency = saliency
        self._terms = None
        self._line = None
        self._features = None

    # -- shared pieces ------------------------------------------------------
    def stitch_terms(self):
        if self._terms is None:
            w = self.config.weights
            lay = self.layout0
            self._terms = [
                en.term_feature_alignment(self.scene, self.graph, lay, w.alignment),
                en.term_shape_consistency(lay, self.saliency, w.shape),
                en.term_global_similarity(lay, self.params, self.scene, w.similarity,
                                          self.config.similarity_pixel_units),
            ]
        return self._terms

    def line_term(self):
        if self._line is None:
            self._line = en.term_line_preservation(self.layout0, self.scene, self.config.spacing,
                                                   self.config.weights.line)
        return self._line

    def initial_vertices(self) -> dict:
        if self.params is None:
            return {m.image_id: np.array(m.rest_vertices) for m in self.meshes}
        return {m.image_id: self.params.place(m.image_id, m.rest_vertices) for m in self.meshes}

    def layout_with_pin(self, vertices) -> en.VariableLayout:
        first = self.meshes[0].image_id
        return en.VariableLayout(self.meshes, {(first, 0): tuple(vertices[first][0])})

    def state_from(self, x, layout, system, iteration=0, target=None) -> WarpState:
        verts = layout.unpack(x)
        meshes = [m.with_warped(verts[m.image_id]) for m in self.meshes]
        return WarpState(meshes, system.value(x), system.breakdown(x), iteration, target)

    def feature_anchors(self):
        """Anchors of every matched point and line sample, per image."""
        if self._features is None:
            feats = []
            for m in self.meshes:
                pts = [en.matched_points(self.scene, m.image_id)]
                for seg in np.asarray(self.scene.lines.get(m.image_id, np.zeros((0, 4)))).reshape(-1, 4):
                    pts.append(sample_line(seg, self.config.spacing))
                pts = np.vstack(pts)
                vids, w = anchor_arrays(m, pts)
                feats.append((m.image_id, vids, w))
            self._features = feats
        return self._features

    def warped_features(self, state: WarpState) -> np.ndarray:
        verts = state.vertices()
        out = [np.einsum("nk,nkd->nd", w, verts[img][vids]) for img, vids, w in self.feature_anchors() if len(vids)]
        return np.vstack(out) if out else np.zeros((0, 2))

    def boundary_deviation(self, state: WarpState, target: BoundaryTarget) -> float:
        """Largest distance of the solved outline's boundary points from their section lines."""
        return target.rebind(self.compound(state)).max_deviation(state.vertices())

    @property
    def clearance(self):
        return self.config.step_clearance_cells * self.config.grid_cell

    # -- stages ---------------------------------------------------------------
    def initial_stitch(self) -> WarpState:
        """Minimise alignment + shape + global similarity with the first vertex pinned."""
        if len(self.meshes) == 1:
            m = self.meshes[0]
            return WarpState([m], 0.0, {"alignment": 0.0, "shape": 0.0, "similarity": 0.0})
        init = self.initial_vertices()
        layout = self.layout_with_pin(init)
        system = en.assemble(self.stitch_terms(), layout)
        res = en.minimize(system, layout.pack(init), self.config.solve_mode)
        return self.state_from(res.x, layout, system)

    def compound(self, state: WarpState) -> CompoundPolygon:
        return polygon_union([Polygon.from_outline(mesh_outline(m)) for m in state.meshes])

    def build_boundary_target(self, state: WarpState, mode="piecewise") -> BoundaryTarget:
        compound = self.compound(state)
        sides = extract_sides(compound)
        if mode in ("rect", "rectangle"):
            secs = rectangle_sections(sides)
            mode = "rectangle"
        elif mode == "piecewise":
            secs = side_sections(sides)
        else:
            raise InvalidInputError(f"unknown boundary mode {mode!r}")
        steps = find_steps(secs, self.warped_features(state), self.clearance)
        return BoundaryTarget(secs, mode, steps)

    def _solve_with_target(self, state, target, mode, iteration=0):
        init = state.vertices()
        # the section targets fix translation, so no vertex is pinned here
        layout = en.VariableLayout(self.meshes)
        x0 = layout.pack(init)
        terms = self.stitch_terms() + [self.line_term()]
        res = None
        for _ in range(max(1, self.config.rebind_rounds)):
            bterm = en.term_regular_boundary(layout, target.sections(), self.config.weights.boundary)
            system = en.assemble(terms + [bterm], layout)
            res = en.minimize(system, x0, mode)
            x0 = res.x
            new = self.state_from(res.x, layout, system, iteration, target)
            # crossings slide along their edges and hidden vertices may surface after a solve
            compound = self.compound(new)
            if target.rebind(compound).max_deviation(new.vertices()) <= REBIND_TOL:
                break
            target = target.rebind(compound, keep=True)
        target = target.rebind(self.compound(new), keep=True)
        bterm = en.term_regular_boundary(layout, target.sections(), self.config.weights.boundary)
        system = en.assemble(terms + [bterm], layout)
        return WarpState(new.meshes, system.value(res.x), system.breakdown(res.x), iteration, target)

    def piecewise_stitch(self, state: WarpState, target: BoundaryTarget, mode=None) -> WarpState:
        """Minimise the full energy (stitching + boundary + lines) from ``state``."""
        return self._solve_with_target(state, target, mode or self.config.solve_mode)

    def refine_boundary(self, state: WarpState, target: BoundaryTarget):
        """Greedily remove removable steps while the energy rises by at most ``accept_ratio``."""
        report = RunReport(mode=target.mode)
        report.energies.append(state.energy)
        cur_state, cur_target = state, state.target or target
        e_prev = state.energy
        t = 0
        while True:
            bound = cur_target.rebind(self.compound(cur_state))
            steps = find_steps(bound.sides, self.warped_features(cur_state), self.clearance)
            bound.steps = steps
            cur_target = bound
            candidates = sorted((s for s in steps if s.removable), key=lambda s: (s.height, s.side, s.index))
            if not candidates:
                break
            step = candidates[0]
            t += 1
            new_side = remove_step(bound.sides[step.side], step)
            new_target = bound.with_side(step.side, new_side)
            new_state = self._solve_with_target(cur_state, new_target, self.config.refine_solve_mode, t)
            e_t = new_state.energy
            accepted = (e_t - e_prev) <= self.config.accept_ratio * e_prev
            report.iterations.append(IterationRecord(t, step.to_json(), e_prev, e_t, bool(accepted),
                                                     bound.n_sections, new_state.target.n_sections))
            log.info("refinement %d: step of height %.1f on %s side, E %.4g -> %.4g, %s",
                     t, step.height, step.to_json()["side"], e_prev, e_t, "accepted" if accepted else "rejected")
            if not accepted:
                break
            report.energies.append(e_t)
            cur_state, cur_target, e_prev = new_state, new_state.target, e_t
        cur_state.target = cur_target
        return cur_state, cur_target, report


# ---------------------------------------------------------------------------
# functional front-end

def initial_stitch(scene: Scene, config: PipelineConfig | None = None) -> WarpState:
    return Stitcher(scene, config).initial_stitch()


def face_saliency(scene: Scene, meshes, value=en.FACE_SALIENCY) -> dict | None:
    """Per-vertex shape weights from the face boxes carried by the scene's images."""
    out = {}
    for m in meshes:
        im = scene.image(m.image_id)
        for x, y, w, h in im.face_boxes:
            if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > im.width or y + h > im.height:
                raise OutOfDomainError(f"face box {[x, y, w, h]} outside image {im.id} ({im.width}x{im.height})")
        if im.face_boxes:
            out[m.image_id] = en.saliency_from_boxes(m, im.face_boxes, value)
    return out or None


@dataclass(eq=False)
class PipelineResult:
    initial: WarpState
    final: WarpState
    target: BoundaryTarget | None
    report: RunReport
    stitcher: Stitcher


def downsample_factors(scene: Scene, megapixels) -> dict:
    if not megapixels or megapixels <= 0:
        return {im.id: 1.0 for im in scene.images}
    budget = megapixels * 1e6
    return {im.id: min(1.0, math.sqrt(budget / (im.width * im.height))) for im in scene.images}


def run(scene: Scene, config: PipelineConfig | None = None, mode="piecewise", saliency="faces") -> PipelineResult:
    """Full method on ``scene``; geometry is solved on a copy downsampled to the configured budget."""
    config = config or PipelineConfig()
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}, got {mode!r}")
    timings = {}
    t0 = time.perf_counter()
    factors = downsample_factors(scene, config.downsample_mp)
    work = scene if all(f == 1.0 for f in factors.values()) else scene.scaled(factors)
    stitcher = Stitcher(work, config)
    if saliency == "faces":
        stitcher.saliency = face_saliency(work, stitcher.meshes)
    elif saliency is not None:
        stitcher.saliency = saliency
    timings["setup"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    init = stitcher.initial_stitch()
    init.scale_factors = factors
    timings["initial_stitch"] = time.perf_counter() - t0
    report = RunReport(mode=mode)
    report.energies.append(init.energy)
    report.breakdown = dict(init.breakdown)
    report.scale_factors = factors
    if mode == "stitch":
        report.timings = timings
        return PipelineResult(init, init, None, report, stitcher)

    t0 = time.perf_counter()
    target = stitcher.build_boundary_target(init, "rect" if mode == "rect" else "piecewise")
    timings["boundary"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    state = stitcher.piecewise_stitch(init, target)
    timings["piecewise_stitch"] = time.perf_counter() - t0
    report.energies = [init.energy, state.energy]
    final, final_target = state, state.target
    if mode == "piecewise" and config.refine:
        t0 = time.perf_counter()
        final, final_target, rep = stitcher.refine_boundary(state, state.target)
        timings["refine"] = time.perf_counter() - t0
        report.iterations = rep.iterations
        report.energies = [init.energy] + rep.energies
    final.scale_factors = factors
    report.mode = mode
    report.boundary = final_target.to_json()
    report.breakdown = dict(final.breakdown)
    report.max_boundary_deviation = stitcher.boundary_deviation(final, final_target)
    report.timings = timings
    return PipelineResult(init, final, final_target, report, stitcher)


def piecewise_stitch(scene, state, target, config=None) -> WarpState:
    return Stitcher(scene, config).piecewise_stitch(state, target)


def selfie_stitch(scene: Scene, config: PipelineConfig | None = None, value=en.FACE_SALIENCY) -> PipelineResult:
    """Full pipeline with face-region vertices weighted ``value`` in the shape term."""
    config = config or PipelineConfig()
    factors = downsample_factors(scene, config.downsample_mp)
    work = scene if all(f == 1.0 for f in factors.values()) else scene.scaled(factors)
    probe = [build_grid_mesh(im.width, im.height, config.grid_cell, im.id) for im in work.images]
    return run(scene, config, "piecewise", saliency=face_saliency(work, probe, value))
