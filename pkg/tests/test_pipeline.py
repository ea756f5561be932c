import json

import numpy as np
import pytest

from metrics import face_angle_deviation, line_straightness, relative_warp_error
from panorect import energy as en
from panorect.errors import InvalidInputError, OutOfDomainError
from panorect.fixtures import generate_fixture
from panorect.pipeline import (PipelineConfig, Stitcher, downsample_factors, face_saliency, initial_stitch, run,
                               selfie_stitch)
from panorect.render import upscale_meshes
from panorect.scene import ImageRecord, Scene


@pytest.fixture(scope="module")
def l_shape():
    fx = generate_fixture("l-shape", seed=0)
    return fx, run(fx.scene)


def test_single_image_passes_through():
    scene = Scene([ImageRecord(0, "a.png", 400, 300)])
    state = initial_stitch(scene)
    assert state.energy == 0.0
    assert np.array_equal(state.meshes[0].warped_vertices, state.meshes[0].rest_vertices)


@pytest.mark.parametrize("name", ["pair", "pair-similarity"])
def test_exact_similarity_recovered(name):
    fx = generate_fixture(name, seed=0)
    state = initial_stitch(fx.scene)
    assert relative_warp_error(fx, state) <= 1e-6
    assert state.breakdown["alignment"] <= 1e-12


def test_initial_stitch_pins_first_vertex():
    fx = generate_fixture("2x2", seed=0)
    st = Stitcher(fx.scene)
    state = st.initial_stitch()
    assert np.array_equal(state.meshes[0].warped_vertices[0], st.initial_vertices()[0][0])


def test_rectangular_union_gives_four_sections():
    fx = generate_fixture("pair", seed=0)
    res = run(fx.scene)
    assert res.target.n_sections == 4
    assert res.report.iterations == []


def test_l_shape_sections_match_hand_trace(l_shape):
    _, res = l_shape
    sides = res.report.boundary["sides"]
    assert [s["dir"] for s in sides["top"]] == [0, 1, 0]
    assert [s["dir"] for s in sides["bottom"]] == [0, 1, 0]
    assert len(sides["left"]) == 1 and len(sides["right"]) == 1


def test_l_shape_boundary_deviation(l_shape):
    _, res = l_shape
    assert res.report.max_boundary_deviation <= 0.5


@pytest.mark.parametrize("name", ["l-shape", "staircase", "five"])
def test_rect_mode_four_sections(name):
    res = run(generate_fixture(name, seed=0).scene, mode="rect")
    assert res.target.n_sections == 4 and res.target.is_rectangle


def test_rect_mode_mild_layout_reaches_rectangle():
    res = run(generate_fixture("2x2", seed=0).scene, mode="rect")
    assert res.report.max_boundary_deviation <= 0.5


def test_flat_target_costs_nothing():
    fx = generate_fixture("pair", seed=0)
    st = Stitcher(fx.scene)
    init = st.initial_stitch()
    state = st.piecewise_stitch(init, st.build_boundary_target(init))
    assert state.energy - init.energy <= 1e-6 * max(1.0, init.energy)


def test_line_weight_ablation():
    fx = generate_fixture("lined", seed=0)
    results = {}
    for gl in (15.0, 0.0):
        cfg = PipelineConfig(weights=en.EnergyWeights(line=gl))
        res = run(fx.scene, cfg)
        x = res.stitcher.layout0.pack(res.final.vertices())
        raw = en.term_line_preservation(res.stitcher.layout0, res.stitcher.scene, cfg.spacing).raw_value(x)
        results[gl] = (raw, line_straightness(res.stitcher.scene, res.final, cfg.spacing))
    assert results[15.0][0] < results[0.0][0]
    assert results[15.0][1] <= 0.7 * results[0.0][1]


def test_refinement_accepts_on_featureless_corner():
    fx = generate_fixture("featureless-corner", seed=0)
    res = run(fx.scene)
    first = res.report.iterations[0]
    assert first.accepted
    assert first.sections_after == first.sections_before - 2
    assert first.energy_after - first.energy_before <= 0.05 * first.energy_before
    counts = [it.sections_after for it in res.report.iterations if it.accepted]
    assert counts == sorted(counts, reverse=True)


def test_refinement_rejects_on_deep_notch():
    fx = generate_fixture("deep-notch", seed=0)
    cfg = PipelineConfig()
    st = Stitcher(fx.scene, cfg)
    init = st.initial_stitch()
    state = st.piecewise_stitch(init, st.build_boundary_target(init))
    final, target, report = st.refine_boundary(state, state.target)
    assert len(report.iterations) == 1 and not report.iterations[0].accepted
    assert final is state
    assert target.n_sections == report.iterations[0].sections_before
    assert report.energies == [state.energy]


def test_no_refinement_flag():
    fx = generate_fixture("featureless-corner", seed=0)
    res = run(fx.scene, PipelineConfig(refine=False))
    assert res.report.iterations == []


def test_selfie_weight_lowers_face_distortion():
    fx = generate_fixture("portrait", seed=0)
    strong = selfie_stitch(fx.scene, value=20.0)
    weak = selfie_stitch(fx.scene, value=1.0)
    assert face_angle_deviation(strong.stitcher.scene, strong.final) < \
        face_angle_deviation(weak.stitcher.scene, weak.final)


def test_selfie_without_faces_matches_piecewise():
    fx = generate_fixture("l-shape", seed=0)
    a = selfie_stitch(fx.scene)
    b = run(fx.scene)
    for k, v in a.final.vertices().items():
        assert np.array_equal(v, b.final.vertices()[k])


def test_face_weight_enters_assembly():
    fx = generate_fixture("portrait", seed=0)
    st = Stitcher(fx.scene)
    sal = face_saliency(fx.scene, st.meshes)
    assert set(sal) == {0}
    assert sal[0].max() == 20.0 and (sal[0] == 20.0).sum() > 0


def test_face_box_outside_image():
    fx = generate_fixture("portrait", seed=0)
    fx.scene.images[0].face_boxes = [[250, 100, 120, 140]]
    with pytest.raises(OutOfDomainError):
        run(fx.scene)


def test_deterministic_reports():
    fx = generate_fixture("2x2", seed=4)
    a, b = run(fx.scene), run(fx.scene)
    assert json.dumps(a.report.to_json(timings=False)) == json.dumps(b.report.to_json(timings=False))
    for k, v in a.final.vertices().items():
        assert np.array_equal(v, b.final.vertices()[k])


def test_downsampled_solve_upscales_without_resolving():
    fx = generate_fixture("pair", seed=0)
    small = run(fx.scene, PipelineConfig(downsample_mp=0.06))
    f = small.final.scale_factors[0]
    assert f == pytest.approx(np.sqrt(0.06e6 / 120000))
    big = upscale_meshes(fx.scene, small.final)
    assert [m.n_vertices for m in big] == [m.n_vertices for m in small.final.meshes]
    assert [(m.width, m.height) for m in big] == [(im.width, im.height) for im in fx.scene.images]
    # the planted shift of 280 px is recovered at full scale
    shift = big[1].warped_vertices[0] - big[0].warped_vertices[0]
    assert shift == pytest.approx([280, 0], abs=0.5)


def test_downsample_factors():
    scene = Scene([ImageRecord(0, "a", 4000, 3000), ImageRecord(1, "b", 400, 300)])
    f = downsample_factors(scene, 0.5)
    assert f[0] == pytest.approx(np.sqrt(0.5e6 / 12e6)) and f[1] == 1.0


def test_unknown_mode():
    with pytest.raises(InvalidInputError):
        run(generate_fixture("pair").scene, mode="square")


def test_iterative_matches_direct():
    fx = generate_fixture("l-shape", seed=0)
    a = run(fx.scene, PipelineConfig(refine=False))
    b = run(fx.scene, PipelineConfig(refine=False, solve_mode="iterative"))
    for k, v in a.final.vertices().items():
        assert np.abs(v - b.final.vertices()[k]).max() <= 1e-3
