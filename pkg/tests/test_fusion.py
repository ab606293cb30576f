import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopsense.detection import Box3D, Detection
from coopsense.fusion import (FusedVehicleObservation, dedupe, format_observations, fuse,
                              geofence, lane_map, locate, parse_observations, to_global)
from coopsense.geometry import Pose, local_to_global
from coopsense.network import RoadNetwork

NET = RoadNetwork()


def _det(x, y, score=10.0, src=("s",)):
    return Detection(Box3D(x, y, 0.8, 4.5, 1.8, 1.5), score, src, "global")


def test_to_global_identity_and_yaw_pi():
    dets = [Detection(Box3D(3, 4, -1.5, 4, 2, 1.5), 5.0, ("a",), "a")]
    out = to_global(dets, Pose(), 1.5)
    assert (out[0].box.cx, out[0].box.cy, out[0].box.cz) == (3, 4, 0.0)
    assert out[0].frame_id == "global"
    out = to_global(dets, Pose(10, 0, 0, math.pi), 1.5)
    assert np.allclose([out[0].box.cx, out[0].box.cy], [7, -4], atol=1e-12)
    assert to_global([], Pose(), 1.0) == []


@settings(max_examples=100, deadline=None)
@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-math.pi, math.pi),
       st.floats(-30, 30), st.floats(-30, 30), st.floats(0.5, 4))
def test_to_global_matches_corner_oracle(px, py, yaw, cx, cy, h):
    box = Box3D(cx, cy, 0.3, 4.0, 1.8, 1.4)
    pose = Pose(px, py, 0.0, yaw)
    out = to_global([Detection(box, 1.0, ("a",), "a")], pose, h)[0].box
    corners = local_to_global(pose, h).apply(box.corners())
    assert np.allclose(out.corners(), corners, atol=1e-9)
    assert (out.ex, out.ey, out.ez) == (box.ex, box.ey, box.ez)


def test_dedupe_examples():
    near, far = _det(10, 0), _det(10.5, 0)
    assert dedupe([far, near], 5.0) == [near]
    a, b = _det(10, 0), _det(30, 0)
    assert dedupe([a, b], 5.0) == [a, b]
    # three mutually close: greedy keeps only the one nearest the centre
    trio = [_det(12, 0), _det(10, 0), _det(11, 1)]
    assert dedupe(trio, 5.0) == [trio[1]]


def _greedy_oracle(dets, thr):
    # enumerate: the kept set is the unique one built by scanning in distance order
    order = sorted(dets, key=lambda d: math.hypot(d.box.cx, d.box.cy))
    kept = []
    for d in order:
        if all(math.dist((d.box.cx, d.box.cy), (k.box.cx, k.box.cy)) >= thr for k in kept):
            kept.append(d)
    return kept


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-40, 40), st.floats(-40, 40)), max_size=25),
       st.floats(0.5, 10))
def test_dedupe_properties(points, thr):
    dets = [_det(x, y) for x, y in points]
    kept = dedupe(dets, thr)
    assert kept == _greedy_oracle(dets, thr)
    for a, b in itertools.combinations(kept, 2):
        assert math.dist((a.box.cx, a.box.cy), (b.box.cx, b.box.cy)) >= thr
    # every dropped detection is covered by a kept one at least as close to the centre
    for d in dets:
        if d not in kept:
            assert any(math.dist((d.box.cx, d.box.cy), (k.box.cx, k.box.cy)) < thr
                       and math.hypot(k.box.cx, k.box.cy) <= math.hypot(d.box.cx, d.box.cy)
                       for k in kept)


def test_geofence():
    on_road, off_road = _det(-50, -3.5), _det(-50, 20)
    assert geofence([on_road, off_road], NET.geofence_polygon) == [on_road]


def test_locate_and_lane_map():
    lane = NET.lane("WB0")
    x, y = lane.point_at(42.0)
    hit = locate(x, y + 0.3, NET)
    assert hit[0].id == "WB0" and math.isclose(hit[1], 42.0, abs_tol=1e-9)
    nb = NET.lane("NB0")
    x, y = nb.point_at(-3.0)
    assert locate(x, y, NET)[0].id in {"NB0", "EB0", "EB1"}
    assert locate(0.0, 80.0, NET) is None
    obs = lane_map([_det(*lane.point_at(10.0))], NET)
    assert obs[0].lane_id == "WB0" and math.isclose(obs[0].dist_to_bar, 10.0, abs_tol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(["EB0", "EB1", "WB0", "WB1", "NB0"]), st.floats(0, 240),
       st.floats(-1.7, 1.7))
def test_locate_within_half_lane(lane_id, d, lat):
    lane = NET.lane(lane_id)
    x, y = lane.point_at(d)
    ux, uy = lane.direction
    hit = locate(x - uy * lat, y + ux * lat, NET)
    assert hit is not None
    assert hit[0].id == lane_id
    assert math.isclose(hit[1], d, abs_tol=1e-6)


def test_fuse_pipeline_order():
    vehicle = NET.lane("EB1").point_at(20.0)
    clutter = (vehicle[0] + 1.0, vehicle[1] - 8.0)  # off road, nearer the centre
    dets = [_det(*vehicle, src=("infra0",)), _det(*clutter), _det(vehicle[0] + 2, vehicle[1],
                                                                   src=("cav1",))]
    res = fuse(dets, NET, 5.0)
    assert len(res.fenced) == 2
    assert [d.source for d in res.deduped] == [("cav1",)]
    assert res.observations[0].lane_id == "EB1"


def test_observation_text_round_trip():
    obs = [FusedVehicleObservation(1.5, -2.0, "EB0", 33.25), FusedVehicleObservation(0, 0, "NB0", -4)]
    back = parse_observations(format_observations(7, obs))
    assert [f for f, _ in back] == [7, 7]
    assert [(o.lane_id, o.dist_to_bar, o.x, o.y) for _, o in back] == \
        [("EB0", 33.25, 1.5, -2.0), ("NB0", -4.0, 0.0, 0.0)]
    with pytest.raises(ValueError):
        parse_observations("1 EB0 2")
