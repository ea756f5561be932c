import math

import numpy as np
import pytest

from oracles import Oracle, random_vertices, relative_error
from panorect import energy as en
from panorect.boundary import BoundarySection
from panorect.errors import (ConvergenceError, GeometryError, InvalidInputError, OutOfDomainError,
                             RankDeficiencyError)
from panorect.fixtures import generate_fixture
from panorect.mesh import build_grid_mesh
from panorect.pipeline import PipelineConfig, Stitcher
from panorect.polygon import BoundaryPoint
from panorect.scene import FeatureMatchSet, ImageRecord, MatchGraph, Scene


def _two(width=100, height=100, cell=50, matches=((50, 50, 50, 50),)):
    images = [ImageRecord(0, "a", width, height), ImageRecord(1, "b", width, height)]
    scene = Scene(images, [FeatureMatchSet(0, 1, np.array(matches, dtype=float))])
    meshes = [build_grid_mesh(width, height, cell, k) for k in (0, 1)]
    graph = MatchGraph([0, 1], {(0, 1): len(matches)}, {0: None, 1: 0}, [0, 1])
    return scene, meshes, graph


def _similar(mesh, s, theta, t=(0.0, 0.0)):
    a = s * complex(math.cos(theta), math.sin(theta))
    z = a * (mesh.rest_vertices[:, 0] + 1j * mesh.rest_vertices[:, 1]) + complex(*t)
    return np.stack([z.real, z.imag], axis=1)


@pytest.fixture(scope="module")
def lined():
    fx = generate_fixture("lined", seed=0)
    st = Stitcher(fx.scene, PipelineConfig(grid_cell=60))
    init = st.initial_stitch()
    target = st.build_boundary_target(init)
    return st, target


# -- alignment --------------------------------------------------------------------

def test_alignment_coincident_is_zero():
    scene, meshes, graph = _two()
    lay = en.VariableLayout(meshes)
    t = en.term_feature_alignment(scene, graph, lay, 2.0)
    x = lay.pack({0: meshes[0].rest_vertices, 1: meshes[1].rest_vertices})
    assert t.value(x) == 0.0


def test_alignment_three_pixels():
    scene, meshes, graph = _two()
    lay = en.VariableLayout(meshes)
    t = en.term_feature_alignment(scene, graph, lay, 2.0)
    x = lay.pack({0: meshes[0].rest_vertices, 1: meshes[1].rest_vertices + (3, 0)})
    assert t.value(x) == pytest.approx(2.0 * 9)


def test_alignment_rejects_points_off_lattice():
    scene, meshes, graph = _two(matches=((50, 50, 150, 50),))
    with pytest.raises(OutOfDomainError, match=r"\(0, 1\)"):
        en.term_feature_alignment(scene, graph, en.VariableLayout(meshes))


def test_alignment_recovers_translation():
    fx = generate_fixture("pair", seed=0)
    st = Stitcher(fx.scene, PipelineConfig())
    # alignment and shape leave the overall rotation and scale free, so two vertices are pinned
    m0 = st.meshes[0]
    last = m0.n_vertices - 1
    lay = en.VariableLayout(st.meshes, {(0, 0): (0.0, 0.0), (0, last): tuple(m0.rest_vertices[last])})
    terms = st.stitch_terms()[:2]
    res = en.minimize(en.assemble(terms, lay))
    V = lay.unpack(res.x)
    assert np.abs(V[1] - (st.meshes[1].rest_vertices + (280, 0))).max() <= 1e-6
    assert np.abs(V[0] - st.meshes[0].rest_vertices).max() <= 1e-6


# -- shape --------------------------------------------------------------------------

@pytest.mark.parametrize("s,theta,t", [(1.0, 0.0, (0, 0)), (1.7, 0.4, (30, -12)), (0.6, -2.0, (5, 5))])
def test_shape_similarity_invariant(s, theta, t):
    m = build_grid_mesh(200, 120, 40)
    lay = en.VariableLayout([m])
    term = en.term_shape_consistency(lay)
    assert term.value(lay.pack({0: _similar(m, s, theta, t)})) <= 1e-12


def test_shape_sheared_quad_matches_triangle_sum():
    m = build_grid_mesh(10, 10, 10)
    shear = math.tan(math.radians(10))
    V = m.rest_vertices + np.stack([shear * m.rest_vertices[:, 1], 0 * m.rest_vertices[:, 1]], axis=1)
    lay = en.VariableLayout([m])
    got = en.term_shape_consistency(lay).value(lay.pack({0: V}))
    scene = Scene([ImageRecord(0, "a", 10, 10)])
    ref = Oracle(scene, [m]).value("shape", {0: V})
    assert got > 0
    assert got == pytest.approx(ref, rel=1e-12)


def test_shape_saliency_scales_apex_contributions():
    m = build_grid_mesh(80, 80, 40)
    rng = np.random.default_rng(0)
    V = m.rest_vertices + rng.normal(0, 3, m.rest_vertices.shape)
    lay = en.VariableLayout([m])
    x = lay.pack({0: V})
    alpha = np.ones(m.n_vertices)
    alpha[4] = 20.0
    base = en.term_shape_consistency(lay)
    salient = en.term_shape_consistency(lay, {0: alpha})
    # residual rows whose apex is vertex 4 are the only ones that change
    r0, r1 = base.residuals(x), salient.residuals(x)
    changed = ~np.isclose(r0, r1)
    assert np.allclose(r1[changed] ** 2, 20 * r0[changed] ** 2)
    assert salient.value(x) == pytest.approx(base.value(x) + 19 * float(r0[changed] @ r0[changed]))


def test_saliency_from_boxes():
    m = build_grid_mesh(100, 100, 25)
    alpha = en.saliency_from_boxes(m, [[20, 20, 40, 40]])
    inside = [m.vid(r, c) for r in (1, 2) for c in (1, 2)]
    assert set(np.where(alpha == en.FACE_SALIENCY)[0]) == set(inside)


# -- global similarity -------------------------------------------------------------

def _sim_setup():
    fx = generate_fixture("pair-similarity", seed=0)
    st = Stitcher(fx.scene, PipelineConfig(grid_cell=50))
    return st


def test_similarity_zero_at_target():
    st = _sim_setup()
    p = st.params
    V = {m.image_id: _similar(m, p.scales[m.image_id], p.angles[m.image_id], (7, 9)) for m in st.meshes}
    term = en.term_global_similarity(st.layout0, p, st.scene)
    assert term.value(st.layout0.pack(V)) <= 1e-16 * term.n_rows


def test_overlap_interior_edges_have_zero_weight():
    m = build_grid_mesh(200, 200, 50)
    edge_w = en.similarity_edge_weights(m, [[70, 70], [130, 130]])
    edges, quads = en.mesh_edges(m)
    # the edge between quads (1, 1) and (1, 2) lies inside the dilated overlap
    k = [i for i, q in enumerate(quads) if tuple(q) == (1, 1, 1, 2)][0]
    assert edge_w[k] == 0.0
    assert edge_w.max() > 0


def test_edge_weights_match_brute_force():
    m = build_grid_mesh(160, 160, 40)
    pts = [[10, 10]]
    edge_w = en.similarity_edge_weights(m, pts)
    edges, _ = en.mesh_edges(m)
    ref = Oracle(Scene([ImageRecord(0, "a", 160, 160)]), [m]).edge_weights(m, pts)
    assert len(ref) == len(edges)
    for (a, b), w in zip(edges, edge_w):
        assert w == pytest.approx(ref[(a, b)], abs=1e-15)
    # the far corner quad sits 2 rings away from the dilated 2x2 block
    assert max(ref.values()) == pytest.approx(2 / math.hypot(4, 4))


def test_similarity_variants_match_oracle():
    st = _sim_setup()
    o = Oracle(st.scene, st.meshes, st.params)
    rng = np.random.default_rng(5)
    V = random_vertices(st.meshes, rng)
    x = st.layout0.pack(V)
    for pix in (True, False):
        for ref in (True, False):
            t = en.term_global_similarity(st.layout0, st.params, st.scene, 1.0, pix, ref)
            want = o.value("similarity", V, pixel_units=pix, include_reference=ref)
            assert t.value(x) == pytest.approx(want, rel=1e-10)


# -- lines ----------------------------------------------------------------------------

def _line_scene(segs, cell=20):
    m = build_grid_mesh(100, 100, cell)
    scene = Scene([ImageRecord(0, "a", 100, 100)], lines={0: np.array(segs, dtype=float)})
    return m, scene, en.VariableLayout([m])


def test_line_zero_under_affine_maps():
    m, scene, lay = _line_scene([[5, 7, 93, 61], [10, 90, 80, 12]])
    t = en.term_line_preservation(lay, scene, spacing=10.0)
    assert t.value(lay.pack({0: m.rest_vertices})) == pytest.approx(0.0, abs=1e-20)
    A = np.array([[1.3, 0.4], [-0.2, 0.8]])
    assert t.value(lay.pack({0: m.rest_vertices @ A.T + (4, -9)})) == pytest.approx(0.0, abs=1e-18)


def test_line_midpoint_displacement():
    # a segment along mesh vertices: samples at x = 20, 40, 60 on y = 40
    m, scene, lay = _line_scene([[20, 40, 60, 40]])
    t = en.term_line_preservation(lay, scene, spacing=20.0, weight=15.0)
    V = np.array(m.rest_vertices)
    V[m.vid(2, 2)] += (0, 2)
    assert t.n_rows == 2
    assert t.value(lay.pack({0: V})) == pytest.approx(15.0 * 4)


def test_short_lines_skipped(caplog):
    m, scene, lay = _line_scene([[20, 40, 45, 40]])
    with caplog.at_level("WARNING"):
        t = en.term_line_preservation(lay, scene, spacing=20.0)
    assert t.n_rows == 0 and "skipped 1" in caplog.text


# -- boundary ---------------------------------------------------------------------------

def _top_section(m, val):
    pts = [BoundaryPoint(tuple(m.rest_vertices[m.vid(0, c)]), 1, (0, m.vid(0, c))) for c in range(m.cols + 1)]
    return BoundarySection(0, 0, val, pts)


def test_boundary_zero_on_target_and_two_pixels():
    m = build_grid_mesh(100, 60, 20)
    lay = en.VariableLayout([m])
    sec = _top_section(m, 0.0)
    t = en.term_regular_boundary(lay, [sec], 1e3)
    assert t.value(lay.pack({0: m.rest_vertices})) == 0.0
    V = np.array(m.rest_vertices)
    V[m.vid(0, 2)] += (0, -2)
    assert t.value(lay.pack({0: V})) == pytest.approx(1e3 * 4)


def test_boundary_intersection_needs_weights():
    m = build_grid_mesh(100, 60, 20)
    sec = BoundarySection(0, 0, 0.0, [BoundaryPoint((1.0, 0.0), 0)])
    with pytest.raises(GeometryError):
        en.term_regular_boundary(en.VariableLayout([m]), [sec])


def test_boundary_l_shape_rows_and_oracle():
    fx = generate_fixture("l-shape", seed=0)
    st = Stitcher(fx.scene, PipelineConfig())
    init = st.initial_stitch()
    target = st.build_boundary_target(init)
    assert [len(s) for s in target.sides] == [3, 1, 3, 1]
    t = en.term_regular_boundary(st.layout0, target.sections())
    assert t.n_rows == sum(len(s.points) for s in target.sections())
    V = random_vertices(st.meshes, np.random.default_rng(2))
    want = Oracle(fx.scene, st.meshes).evaluate(Oracle(fx.scene, st.meshes).rows_boundary(target.sections()),
                                                Oracle(fx.scene, st.meshes).stack(V))
    assert t.value(st.layout0.pack(V)) == pytest.approx(want, rel=1e-10)


# -- assembly and solve -------------------------------------------------------------------

def test_every_term_matches_oracle(lined):
    st, target = lined
    o = Oracle(st.scene, st.meshes, st.params, st.graph.edges, st.config.spacing)
    terms = dict(zip(("alignment", "shape", "similarity"), st.stitch_terms()))
    terms["line"] = st.line_term()
    terms["boundary"] = en.term_regular_boundary(st.layout0, target.sections(), 1e3)
    rows = {k: (o.rows_boundary(target.sections()) if k == "boundary" else getattr(o, "rows_" + k)()).compile()
            for k in terms}
    rng = np.random.default_rng(0)
    for _ in range(20):
        V = random_vertices(st.meshes, rng)
        x, z = st.layout0.pack(V), o.stack(V)
        total, ref_total = 0.0, 0.0
        for k, t in terms.items():
            q = en.assemble([t], st.layout0).value(x)
            ref = t.weight * o.evaluate(rows[k], z)
            assert relative_error(q, ref) <= 1e-9, k
            total += q
            ref_total += ref
        assert relative_error(en.assemble(list(terms.values()), st.layout0).value(x), ref_total) <= 1e-9


def test_gradient_matches_finite_differences(lined):
    st, target = lined
    terms = st.stitch_terms() + [st.line_term(), en.term_regular_boundary(st.layout0, target.sections())]
    system = en.assemble(terms, st.layout0)
    rng = np.random.default_rng(1)
    x = st.layout0.pack(random_vertices(st.meshes, rng))
    g = system.gradient(x)
    h = 1e-5
    cols = rng.choice(len(x), 40, replace=False)
    fd = np.array([(system.value(x + h * e) - system.value(x - h * e)) / (2 * h)
                   for e in np.eye(len(x))[cols]])
    assert np.abs(fd - g[cols]).max() <= 1e-5 * np.abs(g).max()


def test_shape_with_one_pin_is_rank_deficient():
    # the shape term is blind to rotation and scale about the pinned vertex
    m = build_grid_mesh(120, 80, 40)
    lay = en.VariableLayout([m], {(0, 0): (0.0, 0.0)})
    with pytest.raises(RankDeficiencyError) as exc:
        en.minimize(en.assemble([en.term_shape_consistency(lay)], lay))
    assert exc.value.null_directions


def test_shape_with_two_pins_returns_rest_mesh():
    m = build_grid_mesh(120, 80, 40)
    last = m.n_vertices - 1
    lay = en.VariableLayout([m], {(0, 0): (0.0, 0.0), (0, last): tuple(m.rest_vertices[last])})
    system = en.assemble([en.term_shape_consistency(lay)], lay)
    free, _, _, Hff, _ = system.reduced()
    assert np.linalg.eigvalsh(Hff.toarray()).min() > 0
    res = en.minimize(system)
    assert np.abs(lay.unpack(res.x)[0] - m.rest_vertices).max() <= 1e-9
    assert abs(res.energy) <= 1e-9


def test_warm_start_needs_fewer_iterations(lined):
    st, target = lined
    terms = st.stitch_terms() + [st.line_term(), en.term_regular_boundary(st.layout0, target.sections())]
    system = en.assemble(terms, st.layout0)
    exact = en.minimize(system)
    cold = en.minimize(system, None, "iterative")
    near = exact.x + np.random.default_rng(0).normal(0, 0.5, exact.x.shape)
    warm = en.minimize(system, near, "iterative")
    assert warm.iterations < cold.iterations
    assert np.abs(warm.x - exact.x).max() <= 1e-3


def test_iterative_non_convergence_carries_residual(lined):
    st, target = lined
    system = en.assemble(st.stitch_terms() + [en.term_regular_boundary(st.layout0, target.sections())],
                         st.layout0)
    with pytest.raises(ConvergenceError) as exc:
        en.minimize(system, None, "iterative", max_iter=2)
    assert exc.value.residual > 0


def test_unknown_solve_mode(lined):
    st, target = lined
    system = en.assemble([en.term_regular_boundary(st.layout0, target.sections())] + st.stitch_terms(), st.layout0)
    with pytest.raises(InvalidInputError):
        en.minimize(system, mode="magic")


def test_layout_pack_unpack():
    meshes = [build_grid_mesh(80, 40, 40, 3), build_grid_mesh(40, 40, 40, 5)]
    lay = en.VariableLayout(meshes)
    V = {3: np.arange(12.0).reshape(6, 2), 5: -np.arange(8.0).reshape(4, 2)}
    out = lay.unpack(lay.pack(V))
    assert all(np.array_equal(out[k], V[k]) for k in V)
    assert lay.describe_column(lay.col(5, 2, 1)) == (5, 2, "y")
    with pytest.raises(InvalidInputError):
        en.VariableLayout([meshes[0], meshes[0]])
    with pytest.raises(InvalidInputError):
        en.VariableLayout(meshes, {(5, 99): (0, 0)})


def test_weights_validated():
    with pytest.raises(InvalidInputError):
        en.EnergyWeights(shape=-1)
    with pytest.raises(InvalidInputError):
        en.EnergyWeights(alignment=0)
    w = en.EnergyWeights()
    assert (w.alignment, w.shape, w.similarity, w.boundary, w.line) == (1.0, 6.5, 0.5, 1e3, 15.0)
