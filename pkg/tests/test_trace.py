import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dosm.catalog import NetworkConfig
from dosm.testkit import oracle_nearest
from dosm.trace import (TraceError, TraceRecord, Vehicle, build_vehicles, demand_at_slot,
                        demand_series, format_trace, generate_trace, nearest_edge,
                        parse_trace, position_at, slot_midpoint, slot_positions,
                        sinusoid_activity, split_sessions, window_trace)


def test_xy_line_maps_fields():
    recs = parse_trace("vehicle_id,t,x,y\n7,120,4000,9500\n")
    assert recs == [TraceRecord(7, 120.0, 4000.0, 9500.0)]


def test_equal_timestamps_rejected():
    with pytest.raises(TraceError, match="vehicle 3"):
        parse_trace("3,10,0,0\n3,10,5,5\n")


def test_malformed_line_reports_line_number():
    with pytest.raises(TraceError, match="line 3"):
        parse_trace("vehicle_id,t,x,y\n1,0,0,0\n1,five,0,0\n")


def test_cab_format_projects_and_drops_occupancy():
    text = "37.71 -122.51 1 1000\n37.70 -122.52 0 990\n"
    recs = parse_trace(text, "latlon_cab", vehicle_id=5, epoch0=990)
    assert [r.t for r in recs] == [0.0, 10.0]
    assert recs[0].x == pytest.approx(0.0, abs=1e-9)
    assert recs[1].y == pytest.approx(1111.95, rel=1e-3)


def test_generator_is_deterministic():
    assert generate_trace(4, 5, 100) == generate_trace(4, 5, 100)
    assert generate_trace(4, 5, 100) != generate_trace(5, 5, 100)


def test_generator_spans_horizon():
    recs = generate_trace(1, 10, 750)
    by = {}
    for r in recs:
        by.setdefault(r.vehicle_id, []).append(r.t)
    assert len(by) == 10
    assert all(min(t) == 0 and max(t) == 750 for t in by.values())


def test_generator_speed_and_region():
    recs = generate_trace(2, 30, 400, step_s=5)
    by = {}
    for r in recs:
        by.setdefault(r.vehicle_id, []).append(r)
    for rs in by.values():
        for a, b in zip(rs, rs[1:]):
            assert math.hypot(b.x - a.x, b.y - a.y) <= 20 * (b.t - a.t) + 1e-9
    assert all(0 <= r.x <= 15_000 and 0 <= r.y <= 15_000 for r in recs)


def test_500_vehicle_trace_has_500_ids():
    recs = generate_trace(0, 500, 50)
    assert len({r.vehicle_id for r in recs}) == 500


def test_position_interpolation():
    v = Vehicle(0, 0, [0, 10], [(0, 0), (100, 0)])
    assert position_at(v, 5) == (50.0, 0.0)
    assert position_at(v, 10) == (100.0, 0.0)
    with pytest.raises(TraceError):
        position_at(v, 11)


def test_nearest_edge_cases(catalog):
    edges = catalog[1]
    assert nearest_edge(edges[4].position, edges) == 4
    # midway between edge 2 (12500, 2500) and edge 5 (12500, 7500)
    assert nearest_edge((12500.0, 5000.0), edges) == 2


def test_nearest_edge_matches_scan(catalog):
    edges = catalog[1]
    rng = np.random.default_rng(0)
    for x, y in rng.uniform(0, 15_000, (1000, 2)):
        assert nearest_edge((x, y), edges) == oracle_nearest(x, y, edges)


def test_demand_examples(catalog):
    services, edges, cfg = catalog
    assert demand_at_slot([], edges, 0, cfg).total == 0
    near0 = [Vehicle(i, 2, [0, 750], [(2500 + i, 2500), (2500 + i, 2500)]) for i in range(3)]
    d = demand_at_slot(near0, edges, 5, cfg)
    assert d.counts[0, 2] == 3 and d.total == 3


def test_demand_conservation(catalog):
    services, edges, cfg = catalog
    vehicles = build_vehicles(generate_trace(3, 40, 300), 8, seed=1)
    series = demand_series(vehicles, edges, cfg)
    for t in range(0, 150, 7):
        mid = slot_midpoint(t, cfg)
        active = sum(v.times[0] <= mid <= v.times[-1] for v in vehicles)
        assert series[t].sum() == active
        np.testing.assert_array_equal(series[t], demand_at_slot(vehicles, edges, t, cfg).counts)


records = st.lists(
    st.tuples(st.integers(0, 20), st.floats(0, 1e4, allow_nan=False),
              st.floats(0, 15_000, allow_nan=False), st.floats(0, 15_000, allow_nan=False)),
    max_size=30)


@settings(max_examples=50, deadline=None)
@given(records)
def test_format_parse_identity(rows):
    seen = {}
    recs = []
    for vid, t, x, y in rows:
        if (vid, t) in seen:
            continue
        seen[(vid, t)] = True
        recs.append(TraceRecord(vid, t, x, y))
    recs.sort(key=lambda r: (r.vehicle_id, r.t))
    assert parse_trace(format_trace(recs)) == recs


def test_sessions_track_activity():
    recs = generate_trace(0, 400, 600)
    act = sinusoid_activity(0.1, 0.9, 300)
    sessions = split_sessions(recs, act, seed=0)
    vehicles = build_vehicles(sessions, 8, seed=0)
    cfg = NetworkConfig(horizon_seconds=600)
    pos = slot_positions(vehicles, cfg)
    active = (~np.isnan(pos[:, :, 0])).sum(axis=1)
    expected = 400 * act((np.arange(120) + 0.5) * 5)
    assert np.corrcoef(active, expected)[0, 1] > 0.9


def test_window_trace_shifts_time():
    recs = [TraceRecord(0, 0, 0, 0), TraceRecord(0, 10, 100, 0)]
    out = window_trace(recs, 5, 20)
    assert out[0] == TraceRecord(0, 0.0, 50.0, 0.0)
    assert out[-1].t == 5.0
