import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bev2dsup.depth import (
    DepthMap,
    box_depth_from_map,
    decode_depth_map,
    encode_depth_map,
    load_depth_map,
    render_synthetic_depth,
    save_depth_map,
)
from bev2dsup.errors import FormatError, NoDepth
from bev2dsup.geometry import Box2D, Box3D, project_box

from conftest import pinhole


@pytest.fixture
def small_cam():
    return pinhole(width=200, height=200, f=200.0, c=100.0)


def test_empty_scene_all_background(small_cam):
    m = render_synthetic_depth([], small_cam)
    assert np.all(np.isinf(m.values))


def test_single_box_constant_fill(small_cam):
    box = Box3D((0, 0, 10), (2, 2, 2))
    m = render_synthetic_depth([box], small_cam)
    b = project_box(small_cam, box)
    x0, y0, x1, y1 = b.extent
    cols = np.arange(200) + 0.5
    inside = np.outer((cols >= y0) & (cols <= y1), (cols >= x0) & (cols <= x1))
    assert np.all(m.values[inside] == 10)
    assert np.all(np.isinf(m.values[~inside]))


def test_overlap_keeps_nearest(small_cam):
    far = Box3D((0, 0, 10), (2, 2, 2))
    near = Box3D((0.3, 0, 5), (0.3, 0.3, 0.3))
    m = render_synthetic_depth([far, near], small_cam)
    b = project_box(small_cam, near)
    assert m.values[int(b.y), int(b.x)] == 5
    assert box_depth_from_map(m, project_box(small_cam, far)) == 10  # near box covers less than half


def test_median_examples():
    vals = np.full((4, 4), 10.0, dtype=np.float32)
    m = DepthMap(4, 4, vals)
    assert box_depth_from_map(m, Box2D(2, 2, 4, 4, 1)) == 10
    half = np.full((4, 4), 5.0, dtype=np.float32)
    half[:, 2:] = 15.0
    assert box_depth_from_map(DepthMap(4, 4, half), Box2D(2, 2, 4, 4, 1)) == 10
    with pytest.raises(NoDepth):
        box_depth_from_map(DepthMap.empty(4, 4), Box2D(2, 2, 4, 4, 1))
    with pytest.raises(NoDepth):
        box_depth_from_map(m, Box2D(50, 50, 4, 4, 1))


def test_median_ignores_background():
    vals = np.full((2, 2), np.inf, dtype=np.float32)
    vals[0, 0] = 7.0
    assert box_depth_from_map(DepthMap(2, 2, vals), Box2D(1, 1, 2, 2, 1)) == 7


def test_tiny_box_reads_center_pixel():
    vals = np.arange(1, 17, dtype=np.float32).reshape(4, 4)
    assert box_depth_from_map(DepthMap(4, 4, vals), Box2D(2.2, 1.3, 0.1, 0.1, 1)) == vals[1, 2]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.5, 100, width=32), min_size=16, max_size=16), st.randoms(use_true_random=False))
def test_median_order_invariant(values, rnd):
    a = np.array(values, dtype=np.float32).reshape(4, 4)
    shuffled = list(values)
    rnd.shuffle(shuffled)
    b = np.array(shuffled, dtype=np.float32).reshape(4, 4)
    box = Box2D(2, 2, 4, 4, 1)
    assert box_depth_from_map(DepthMap(4, 4, a), box) == box_depth_from_map(DepthMap(4, 4, b), box)


def test_isolated_box_consistency(small_cam, rng):
    for _ in range(50):
        z = float(np.float32(rng.uniform(5, 40)))
        box = Box3D((rng.uniform(-1, 1), rng.uniform(-1, 1), z), rng.uniform(0.5, 3, 3), rng.uniform(-3, 3))
        b = project_box(small_cam, box)
        if b is None:
            continue
        m = render_synthetic_depth([box], small_cam)
        assert abs(box_depth_from_map(m, b) - b.depth) <= 1e-6 * b.depth


def test_round_trip(small_cam, tmp_path):
    m = render_synthetic_depth([Box3D((0, 0, 10), (2, 2, 2)), Box3D((1, 0, 7.3), (1, 1, 1))], small_cam)
    save_depth_map(m, tmp_path / "a.dpm")
    assert load_depth_map(tmp_path / "a.dpm") == m
    data = encode_depth_map(m)
    assert data[:4] == b"DPM1" and struct.unpack_from("<III", data, 4) == (200, 200, 0)
    assert len(data) == 16 + 4 * 200 * 200


def test_corrupted_files():
    data = encode_depth_map(DepthMap(3, 2, np.full((2, 3), 4.0, dtype=np.float32)))
    with pytest.raises(FormatError) as err:
        decode_depth_map(data[:-1])
    assert err.value.offset is not None
    with pytest.raises(FormatError):
        decode_depth_map(data[:10])
    with pytest.raises(FormatError) as err:
        decode_depth_map(b"XXXX" + data[4:])
    assert err.value.offset == 0
    bad = bytearray(data)
    bad[16:20] = struct.pack("<f", -1.0)
    with pytest.raises(FormatError) as err:
        decode_depth_map(bytes(bad))
    assert err.value.offset == 16
    bad = bytearray(data)
    bad[12:16] = struct.pack("<I", 1)
    with pytest.raises(FormatError):
        decode_depth_map(bytes(bad))


def test_camera_size_check(small_cam):
    with pytest.raises(ValueError):
        DepthMap.empty(10, 10).check_camera(small_cam)


def test_depth_map_validation():
    with pytest.raises(ValueError):
        DepthMap(2, 2, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        DepthMap(2, 2, np.ones((3, 2)))
