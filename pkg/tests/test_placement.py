from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dosm.catalog import CatalogError, Placement, PlanConflictError
from dosm.placement import (MigratePlan, PlanTrace, ScalePlan, apply_plan, initial_placement,
                            solve_migrate, solve_scale_in, solve_scale_out)
from dosm.testkit import (check_migrate, check_scale, oracle_migrate, oracle_scale,
                          random_instance)

S = 4   # Traffic Control: loose 1 s threshold


def _placement(n_edges, n_services, cells):
    p = Placement.empty(n_edges, n_services)
    for e, s in cells:
        p.counts[e, s] += 1
    return p


def _near(edge, n, seed=0):
    rng = np.random.default_rng(seed)
    return np.asarray(edge.position) + rng.uniform(-200, 200, (n, 2))


def _demand(points, edges, n_services, s):
    d = np.zeros((len(edges), n_services), dtype=int)
    for x, y in points:
        e = min(range(len(edges)), key=lambda k: (edges[k].position[0] - x) ** 2
                + (edges[k].position[1] - y) ** 2)
        d[e, s] += 1
    return d


def test_apply_plan_examples():
    p = _placement(9, 8, [(0, S)])
    m = apply_plan(p, MigratePlan(S, 0, 3, 0.0, 0.0, 0.0, 0, tuple(p.counts[:, S])))
    assert m.counts[0, S] == 0 and m.counts[3, S] == 1 and m.instance_count[S] == 1
    o = apply_plan(p, ScalePlan(S, 0, "out", 0.0, tuple(p.counts[:, S])))
    assert o.counts[0, S] == 2
    i = apply_plan(o, ScalePlan(S, 0, "in", 0.0, tuple(o.counts[:, S])))
    assert np.array_equal(i.counts, p.counts)
    assert p.counts[0, S] == 1      # input untouched


def test_double_apply_conflicts():
    p = _placement(9, 8, [(0, S)])
    plan = MigratePlan(S, 0, 3, 0.0, 0.0, 0.0, 0, tuple(p.counts[:, S]))
    with pytest.raises(PlanConflictError):
        apply_plan(apply_plan(p, plan), plan)


def test_migrate_follows_demand(catalog):
    services, edges, cfg = catalog
    pts = _near(edges[3], 20)
    p = _placement(9, 8, [(0, S)])
    plan = solve_migrate(S, p, _demand(pts, edges, 8, S), pts, cfg, services, edges)
    assert plan.link == (0, 3)
    assert plan.migration_delay_s <= cfg.slot_seconds
    assert plan.objective_value == pytest.approx(plan.service_delay_s + plan.migration_delay_s)


def test_migrate_points_view(catalog):
    from dosm.delay import ServiceView
    services, edges, cfg = catalog
    pts = _near(edges[3], 20)
    p = _placement(9, 8, [(0, S)])
    d = _demand(pts, edges, 8, S)
    view = ServiceView(pts, services[S], edges, cfg)
    assert solve_migrate(S, p, d, pts, cfg, services, edges, view=view) == \
        solve_migrate(S, p, d, pts, cfg, services, edges)


def test_migrate_storage_saturated(catalog):
    services, edges, cfg = catalog
    full = [edges[0]] + [replace(e, storage_used_bytes=e.storage_capacity_bytes)
                         for e in edges[1:]]
    pts = _near(edges[3], 10)
    p = _placement(9, 8, [(0, S)])
    assert solve_migrate(S, p, _demand(pts, edges, 8, S), pts, cfg, services, full) is None


def test_migrate_unknown_service(catalog):
    services, edges, cfg = catalog
    with pytest.raises(LookupError):
        solve_migrate(99, _placement(9, 8, []), np.zeros((9, 8)), np.zeros((0, 2)), cfg,
                      services, edges)


def test_scale_out_single_host(catalog):
    services, edges, cfg = catalog
    pts = _near(edges[4], 45)
    p = _placement(9, 8, [(4, S)])
    plan = solve_scale_out(S, p, _demand(pts, edges, 8, S), pts, cfg, services, edges)
    assert plan.edge == 4 and plan.direction == "out"


def test_scale_out_full_host(catalog):
    services, edges, cfg = catalog
    tight = list(edges)
    tight[4] = replace(edges[4], storage_used_bytes=edges[4].storage_capacity_bytes
                       - services[S].instance_layer_bytes * 1.5)
    pts = _near(edges[4], 45)
    p = _placement(9, 8, [(4, S)])
    assert solve_scale_out(S, p, _demand(pts, edges, 8, S), pts, cfg, services, tight) is None


def test_scale_in_drops_idle_instance(catalog):
    services, edges, cfg = catalog
    pts = _near(edges[0], 10)
    p = _placement(9, 8, [(0, S), (8, S)])
    plan = solve_scale_in(S, p, _demand(pts, edges, 8, S), pts, cfg, services, edges)
    assert plan.edge == 8 and plan.direction == "in"


def test_scale_in_needs_two(catalog):
    services, edges, cfg = catalog
    with pytest.raises(ValueError):
        solve_scale_in(S, _placement(9, 8, [(0, S)]), np.zeros((9, 8)), np.zeros((0, 2)), cfg,
                       services, edges)


def test_trace_records_each_solve(catalog):
    import io
    services, edges, cfg = catalog
    pts = _near(edges[3], 5)
    buf = io.StringIO()
    trace = PlanTrace(buf)
    solve_migrate(S, _placement(9, 8, [(0, S)]), _demand(pts, edges, 8, S), pts, cfg,
                  services, edges, trace=trace)
    assert len(trace.records) == 1 and trace.records[0]["candidates"] == 8
    assert buf.getvalue().count("\n") == 1


def test_initial_placement_single_service(catalog):
    services, edges, cfg = catalog
    p = initial_placement(services[:1], edges, cfg, seed=0)
    assert p.hosting_edges(0) == [4]


def test_initial_placement_infeasible(catalog):
    services, edges, cfg = catalog
    tiny = [replace(e, storage_capacity_bytes=1e6) for e in edges]
    with pytest.raises(CatalogError, match="shortfall"):
        initial_placement(services, tiny, cfg)


def test_initial_placement_spreads_instances(catalog):
    services, edges, cfg = catalog
    p = initial_placement(services[:1], edges, cfg, instances=[2])
    assert len(p.hosting_edges(0)) == 2


def test_initial_placement_default_catalog(catalog):
    services, edges, cfg = catalog
    p = initial_placement(services, edges, cfg)
    assert p.instance_count.tolist() == [1] * len(services)
    assert np.all(p.storage_used(services, edges) <= [e.storage_capacity_bytes for e in edges])


def _agree(seed):
    inst = random_instance(seed)
    for s in range(len(inst.services)):
        pts = inst.points[s]
        a = (inst.placement, inst.demand, pts, inst.cfg, inst.services, inst.edges)
        plan, ref = solve_migrate(s, *a), oracle_migrate(inst, s)
        assert (plan is None) == (ref is None)
        if plan is not None:
            assert (plan.objective_value, plan.source_edge, plan.target_edge) == \
                (ref.objective, ref.source, ref.target)
            assert check_migrate(inst, plan) == []
        plan, ref = solve_scale_out(s, *a), oracle_scale(inst, s, "out")
        assert (plan is None) == (ref is None)
        if plan is not None:
            assert (plan.objective_value, plan.edge) == (ref.objective, ref.target)
            assert check_scale(inst, plan) == []
        if inst.placement.instance_count[s] >= 2:
            plan, ref = solve_scale_in(s, *a), oracle_scale(inst, s, "in")
            assert (plan is None) == (ref is None)
            if plan is not None:
                assert (plan.objective_value, plan.edge) == (ref.objective, ref.target)
                assert check_scale(inst, plan) == []


@pytest.mark.parametrize("seed", range(1000, 1020))
def test_solvers_match_oracles(seed):
    _agree(seed)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_solvers_match_oracles_property(seed):
    _agree(seed)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_applied_plans_keep_invariants(seed):
    inst = random_instance(seed)
    for s in range(len(inst.services)):
        a = (inst.placement, inst.demand, inst.points[s], inst.cfg, inst.services, inst.edges)
        before = inst.placement.instance_count[s]
        plan = solve_migrate(s, *a)
        if plan is not None:
            after = apply_plan(inst.placement, plan)
            assert after.instance_count[s] == before
            assert np.abs(after.counts[:, s] - inst.placement.counts[:, s]).sum() == 2
        plan = solve_scale_out(s, *a)
        if plan is not None:
            assert apply_plan(inst.placement, plan).instance_count[s] == before + 1
