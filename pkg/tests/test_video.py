from fractions import Fraction

import numpy as np
import pytest

from panorect.errors import InvalidInputError
from panorect.fixtures import generate_fixture, video_frames
from panorect.video import BlockSchedule, blend_vertices, stitch_video


def test_default_schedule():
    s = BlockSchedule(70)
    assert (s.block, s.overlap, s.stride) == (35, 15, 20)
    assert s.starts == [0, 20]


@pytest.mark.parametrize("f,expected", [
    (0, (0, 0, 0.0)), (19, (0, 0, 0.0)), (20, (0, 1, 1 / 16)), (27, (0, 1, 0.5)),
    (34, (0, 1, 15 / 16)), (35, (1, 1, 0.0)), (69, (1, 1, 0.0)),
])
def test_weights_closed_form(f, expected):
    k, k1, w = BlockSchedule(70).weights(f)
    assert (k, k1) == expected[:2]
    assert w == expected[2]


def test_weights_are_exact_fractions():
    s = BlockSchedule(70)
    for f in range(20, 35):
        assert Fraction(s.weights(f)[2]) == Fraction(f - 20 + 1, 16).limit_denominator(16)


def test_short_video_single_block():
    s = BlockSchedule(10)
    assert s.starts == [0]
    assert all(s.weights(f) == (0, 0, 0.0) for f in range(10))


def test_partial_last_block_reuses_previous():
    s = BlockSchedule(60)
    assert s.starts == [0, 20]
    assert s.weights(59) == (1, 1, 0.0)


@pytest.mark.parametrize("block,overlap", [(10, 10), (0, 0), (10, -1)])
def test_bad_schedule(block, overlap):
    with pytest.raises(InvalidInputError):
        BlockSchedule(70, block, overlap)


def test_frame_out_of_range():
    with pytest.raises(InvalidInputError):
        BlockSchedule(70).weights(70)


def test_blend_vertices_midpoint():
    a = {0: np.zeros((4, 2)), 1: np.ones((4, 2))}
    b = {0: np.full((4, 2), 2.0), 1: np.full((4, 2), 3.0)}
    mid = blend_vertices(a, b, 0.5)
    assert np.array_equal(mid[0], np.ones((4, 2))) and np.array_equal(mid[1], np.full((4, 2), 2.0))


def test_identical_blocks_give_identical_frames():
    scene = generate_fixture("pair", seed=0).scene
    res = stitch_video([scene] * 40, block=20, overlap=5)
    first = res.vertices[0]
    for verts in res.vertices:
        for k, v in verts.items():
            assert np.array_equal(v, first[k])


@pytest.fixture(scope="module")
def rig():
    return stitch_video(video_frames("pair", 70, seed=0, noise=0.5))


def test_overlap_midpoint_is_average(rig):
    a, b = rig.blocks[0].final.vertices(), rig.blocks[1].final.vertices()
    for k in a:
        assert np.allclose(rig.vertices[27][k], 0.5 * (a[k] + b[k]), rtol=0, atol=1e-12)


def test_trajectories_piecewise_linear(rig):
    for k in rig.vertices[0]:
        traj = np.array([rig.vertices[f][k] for f in range(19, 36)])
        steps = np.diff(traj, axis=0)
        assert np.allclose(steps, steps[0], rtol=0, atol=1e-9)


def test_rig_mismatch():
    frames = video_frames("pair", 40, seed=0)
    frames[20] = generate_fixture("2x2", seed=0).scene
    with pytest.raises(InvalidInputError):
        stitch_video(frames, block=20, overlap=0)
