import json
from dataclasses import replace

import numpy as np
import pytest

from dosm.placement import MigratePlan
from dosm.sim import (POLICIES, Models, build_scenario, derive_seed,
                      impacted_vehicles, parse_scenario, read_summary, run_scenario,
                      slot_csv, summarize, train_critic_model, train_forecasters, write_run)
from dosm.catalog import CatalogError

from conftest import TINY


@pytest.fixture(scope="module")
def tiny_models(tiny_scenario):
    return Models(train_critic_model(tiny_scenario, seed=0),
                  train_forecasters(tiny_scenario, seed=0))


@pytest.fixture(scope="module")
def tiny_runs(tiny_scenario, tiny_models):
    return {p: run_scenario(p, tiny_scenario, models=tiny_models) for p in POLICIES}


def test_derive_seed_is_stable_and_labelled():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b") != derive_seed(2, "b")
    assert 0 <= derive_seed(7, "x") < 2**63


def test_scenario_shapes(tiny_scenario):
    sc = tiny_scenario
    assert sc.demand.shape == (sc.preroll_slots + sc.n_slots, 9, 8)
    points, req = sc.active(0)
    assert len(points) == len(req) == sc.live_demand(0).sum()
    assert sc.history(10).shape[0] == sc.preroll_slots + 10


def test_scenario_is_deterministic():
    spec = parse_scenario(str(TINY))
    a, b = build_scenario(spec, seed=3), build_scenario(spec, seed=3)
    assert np.array_equal(a.demand, b.demand)
    assert not np.array_equal(a.demand, build_scenario(spec, seed=4).demand)


def test_scenario_errors(tmp_path):
    with pytest.raises(CatalogError):
        parse_scenario("[models]\ngru_hidden = 4\n")
    with pytest.raises(CatalogError, match="unknown"):
        parse_scenario("[scenario]\nspeed = 3\n")
    with pytest.raises(CatalogError):
        parse_scenario("[scenario]\nvehicles = 0\n")
    with pytest.raises(CatalogError):
        parse_scenario(str(tmp_path / "missing.ini"))


def test_nm_never_solves(tiny_runs):
    s = summarize(tiny_runs["NM"])
    assert s["optimization_runs"] == 0
    assert s["computation_load_pct"] == 0.0 and s["migration_load_pct"] == 0.0


def test_am_solves_every_service_every_slot(tiny_runs):
    run = tiny_runs["AM"]
    assert all(m.optimization_runs == 8 for m in run.slots)
    s = summarize(run)
    assert s["load_denominator"] == 1200 and s["computation_load_pct"] == 100.0


def test_drl_waits_for_warmup(tiny_runs):
    assert all(m.optimization_runs == 0 for m in tiny_runs["DRL"].slots[:29])


def test_dosm_solves_only_at_frame_ends(tiny_runs):
    run = tiny_runs["DOSM"]
    for m in run.slots:
        if m.optimization_runs:
            assert (m.slot + 1) % 15 == 0 and m.slot + 1 >= 30
    assert len(run.decisions) == 8 * len(range(30, 150, 15))


def test_instance_conservation(tiny_runs):
    for run in tiny_runs.values():
        start = 8
        for m in run.slots:
            start += m.scale_outs - m.scale_ins
            assert m.instances == start
        assert run.final_placement.instance_count.min() >= 1


def test_runs_are_deterministic(tiny_scenario, tiny_models):
    for p in POLICIES:
        a = run_scenario(p, tiny_scenario, models=tiny_models)
        assert slot_csv(a) == slot_csv(run_scenario(p, tiny_scenario, models=tiny_models))


def test_runs_do_not_mutate_models(tiny_scenario, tiny_models):
    before = {k: v.copy() for k, v in tiny_models.critic.net_.params.items()}
    run_scenario("DRL", tiny_scenario, models=tiny_models)
    assert all(np.array_equal(before[k], v) for k, v in tiny_models.critic.net_.params.items())


def test_unknown_policy(tiny_scenario):
    with pytest.raises(ValueError):
        run_scenario("XX", tiny_scenario)


def test_impacted_vehicles():
    demand = np.zeros((9, 8), dtype=int)
    demand[2, 5] = 7
    demand[3, 5] = 4
    plan = MigratePlan(5, 2, 3, 0.0, 0.0, 0.0, 7, tuple([0] * 9))
    assert impacted_vehicles(plan, demand) == 7


def test_summary_arithmetic(tiny_runs):
    run = tiny_runs["AM"]
    # 2 solves in each of 150 slots over 8 services: 300 / 1200
    slots = [replace(m, optimization_runs=2, services_migrated=1 if m.slot % 3 == 0 else 0)
             for m in run.slots]
    s = summarize(replace(run, slots=slots))
    assert s["optimization_runs"] == 300 and s["computation_load_pct"] == 25.0
    assert s["migrations"] == 50 and s["migration_load_pct"] == pytest.approx(100 * 50 / 1200)
    assert s["impacted_vehicles"] == sum(m.impacted_vehicles for m in run.slots)


def test_write_and_read(tmp_path, tiny_runs):
    paths = write_run(tiny_runs["DOSM"], tmp_path)
    assert read_summary(paths["summary"])["policy"] == "DOSM"
    lines = paths["slots"].read_text().splitlines()
    assert len(lines) == 151 and "wallclock" not in lines[0]
    assert "wallclock_runtime_s" in paths["runtime"].read_text().splitlines()[0]
    for line in paths["decisions"].read_text().splitlines():
        assert json.loads(line)["kind"] in ("MIGRATE", "SCALE_IN", "SCALE_OUT", "NO_CHANGE")
    data = json.loads(paths["summary"].read_text())
    data["schema_version"] = 99
    paths["summary"].write_text(json.dumps(data))
    with pytest.raises(ValueError, match="schema_version"):
        read_summary(paths["summary"])
