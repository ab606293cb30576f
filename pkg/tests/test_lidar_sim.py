import math

import numpy as np
import pytest

from coopsense import _backend
from coopsense.geometry import Pose, local_to_global
from coopsense.lidar_sim import (GROUND_ID, LidarSpec, SceneBox, SceneSnapshot, azimuths,
                                 cast_frame, local_directions)

SMALL = dict(channels=16, vertical_fov=(-20.0, 2.0), azimuth_step=2.0, max_range=60.0)


def _oracle_hit(origin, d, boxes, ground_z, max_range):
    """Nearest hit of one ray by exhaustive slab tests in each box's own frame."""
    best_t, best_id = math.inf, None
    for b in boxes:
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        rel = origin - np.array([b.cx, b.cy, b.cz])
        o = np.array([c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]])
        v = np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]])
        half = np.array([b.length, b.width, b.height]) / 2
        t0, t1 = -math.inf, math.inf
        for k in range(3):
            if abs(v[k]) < 1e-15:
                if abs(o[k]) > half[k]:
                    t0, t1 = math.inf, -math.inf
                continue
            a, bb = (-half[k] - o[k]) / v[k], (half[k] - o[k]) / v[k]
            t0, t1 = max(t0, min(a, bb)), min(t1, max(a, bb))
        if t0 <= t1 and t1 >= 0:
            t = max(t0, 0.0)
            if t <= max_range and t < best_t:
                best_t, best_id = t, b.id
    if d[2] < 0:
        tg = (ground_z - origin[2]) / d[2]
        if tg <= max_range and tg < best_t:
            best_t, best_id = tg, GROUND_ID
    return best_t, best_id


def _scene(seed=0, n=12):
    rng = np.random.default_rng(seed)
    boxes = []
    for i in range(n):
        r, a = rng.uniform(6, 50), rng.uniform(-math.pi, math.pi)
        h = rng.uniform(1.3, 2.0)
        boxes.append(SceneBox(r * math.cos(a), r * math.sin(a), h / 2, rng.uniform(3.5, 5),
                              rng.uniform(1.6, 2.0), h, rng.uniform(-math.pi, math.pi), i))
    return SceneSnapshot(tuple(boxes))


@pytest.mark.parametrize("backend", list(_backend.available_backends()))
def test_cast_matches_brute_force(backend, monkeypatch):
    monkeypatch.setattr("coopsense.lidar_sim.kernels", _backend.available_backends()[backend])
    spec = LidarSpec(mount=Pose(1.0, -2.0, 0.0, 0.4), mount_height=2.4, **SMALL)
    scene = _scene(1)
    frame, ids = cast_frame(spec, scene, return_ids=True)
    origin = np.array([1.0, -2.0, 2.4])
    rot = local_to_global(spec.mount, 2.4).rotation[:3, :3]
    expected = []
    for d in local_directions(spec):
        t, hid = _oracle_hit(origin, rot @ d, scene.boxes, 0.0, spec.max_range)
        if hid is not None:
            expected.append((d * t, hid))
    assert len(frame.cloud) == len(expected)
    assert np.allclose(frame.cloud.xyz, [e[0] for e in expected], atol=1e-9)
    assert ids.tolist() == [e[1] for e in expected]


def test_backends_bit_identical(monkeypatch):
    backends = _backend.available_backends()
    if len(backends) < 2:
        pytest.skip("compiled backend not built")
    spec = LidarSpec(mount=Pose(0, 0, 0, 0.1), mount_height=3.0)
    scene = _scene(2, 40)
    out = []
    for k in backends.values():
        monkeypatch.setattr("coopsense.lidar_sim.kernels", k)
        out.append(cast_frame(spec, scene, return_ids=True))
    (f0, i0), (f1, i1) = out
    assert np.array_equal(f0.cloud.points, f1.cloud.points)
    assert np.array_equal(i0, i1)


def test_empty_scene_hits_only_ground():
    spec = LidarSpec(**SMALL)
    frame, ids = cast_frame(spec, SceneSnapshot(), return_ids=True)
    assert (ids == GROUND_ID).all()
    # every downward channel reaches the ground within range
    down = local_directions(spec)[:, 2] < 0
    reach = spec.mount_height / -local_directions(spec)[down, 2] <= spec.max_range
    assert len(frame.cloud) == int(reach.sum())
    assert np.allclose(frame.cloud.xyz[:, 2], -spec.mount_height)


def test_box_occludes_ground_and_is_excludable():
    spec = LidarSpec(**SMALL)
    box = SceneBox(8.0, 0.0, 0.75, 4.5, 1.8, 1.5, 0.0, 7)
    _, ids = cast_frame(spec, SceneSnapshot((box,)), return_ids=True)
    assert (ids == 7).any()
    _, ids = cast_frame(spec, SceneSnapshot((box,)), exclude_ids=(7,), return_ids=True)
    assert not (ids == 7).any()


def test_nearest_box_wins():
    spec = LidarSpec(channels=1, vertical_fov=(0.0, 1.0), azimuth_step=90.0, max_range=100,
                     mount_height=1.0)
    near = SceneBox(10, 0, 1, 2, 2, 2, 0.0, 1)
    far = SceneBox(20, 0, 1, 2, 2, 2, 0.0, 2)
    frame, ids = cast_frame(spec, SceneSnapshot((far, near)), return_ids=True)
    assert ids.tolist() == [1]
    assert np.allclose(frame.cloud.xyz[0], [9.0, 0.0, 0.0])


def test_range_noise_is_seeded():
    spec = LidarSpec(range_noise_std=0.05, **SMALL)
    scene = _scene(3)
    a = cast_frame(spec, scene, seed=11).cloud.points
    b = cast_frame(spec, scene, seed=11).cloud.points
    c = cast_frame(spec, scene, seed=12).cloud.points
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_ray_grid_shape():
    spec = LidarSpec()
    assert local_directions(spec).shape == (64 * 900, 3)
    assert len(azimuths(spec)) == 900
    assert np.allclose(np.linalg.norm(local_directions(spec), axis=1), 1.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        LidarSpec(channels=0)
    with pytest.raises(ValueError):
        LidarSpec(vertical_fov=(5.0, -5.0))
    with pytest.raises(ValueError):
        SceneBox(0, 0, 0, 0, 1, 1, 0, 1)
