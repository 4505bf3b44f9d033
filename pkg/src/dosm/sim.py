"""Time-slotted online loop comparing DOSM with the NM, AM and DRL baselines.

Every slot: locate active vehicles, count demand, serve every vehicle under
the current placement, record each service's mean delay as critic feedback
and train the critic a little.  Then the policy may solve and apply plans;
applied plans take effect from the next slot.

    NM    never solves
    AM    solves a migration for every service every slot
    DRL   after warm-up, solves a migration for every service whose quality
          estimate is poor
    DOSM  after warm-up, at the end of every frame, predicts demand, decides
          per service and solves whatever the decision asks for

A migration is applied only when it strictly lowers the service's mean
delay for the vehicles just observed; scale plans are applied whenever the
solver finds one.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .catalog import CatalogError, EdgeNode, NetworkConfig, Placement, ServiceSpec, load_catalog
from .critic import (Experience, ReplayBuffer, ValueNetwork, critic_input, encode_state,
                     target_value, train_critic)
from .decision import Decision, LifecycleDecision, frame_decisions
from .delay import ServiceView, mean_of
from .placement import (MigratePlan, PlanTrace, apply_plan, initial_placement, solve_migrate,
                        solve_scale_in, solve_scale_out)
from .predictor import GruForecaster, predict_frame
from .trace import (build_vehicles, demand_series, edge_positions, generate_trace,
                    nearest_edges, sinusoid_activity, slot_positions, split_sessions)

log = logging.getLogger(__name__)

POLICIES = ("NM", "AM", "DRL", "DOSM")
SCHEMA_VERSION = 1


def derive_seed(seed: int, label: str) -> int:
    """Independent sub-seed for one consumer of randomness."""
    digest = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ---------------------------------------------------------------------------
# scenario description

@dataclass(frozen=True)
class ScenarioSpec:
    name: str = "sinusoid"
    vehicles: int = 2000
    activity_low: float = 0.05
    activity_high: float = 1.0
    activity_period_s: float = 375.0
    preroll_slots: int = 600
    step_s: float = 5.0
    network: str | None = None
    catalog: str | None = None
    # model settings
    gru_hidden: tuple[int, ...] = (32, 16)
    gru_dense: tuple[int, ...] = (16, 16)
    gru_window: int = 150
    gru_epochs: int = 150
    gru_stride: int = 4
    critic_hidden: tuple[int, ...] = (512, 256, 64)
    critic_episodes: int = 150
    critic_iterations: int = 20
    online_iterations: int = 3


_TUPLE_KEYS = {"gru_hidden", "gru_dense", "critic_hidden"}
_INT_KEYS = {"vehicles", "preroll_slots", "gru_window", "gru_epochs", "gru_stride",
             "critic_episodes", "critic_iterations", "online_iterations"}


def parse_scenario(source) -> ScenarioSpec:
    """Read a scenario INI (path or text) with ``[scenario]`` and optional ``[models]``."""
    parser = configparser.ConfigParser()
    try:
        if isinstance(source, str) and "\n" in source:
            parser.read_string(source)
        else:
            with open(source, encoding="utf-8") as fh:
                parser.read_file(fh)
    except OSError as exc:
        raise CatalogError(f"cannot read scenario {source}: {exc}") from exc
    except configparser.Error as exc:
        raise CatalogError(f"cannot parse scenario: {exc}") from exc
    if not parser.has_section("scenario"):
        raise CatalogError("missing [scenario] section")
    known = set(ScenarioSpec.__dataclass_fields__)
    kwargs = {}
    for section in ("scenario", "models"):
        if not parser.has_section(section):
            continue
        for key, raw in parser[section].items():
            if key not in known:
                raise CatalogError(f"unknown scenario key {key!r}")
            try:
                if key in _TUPLE_KEYS:
                    kwargs[key] = tuple(int(v) for v in raw.split(","))
                elif key in _INT_KEYS:
                    kwargs[key] = int(raw)
                elif key in ("name", "network", "catalog"):
                    kwargs[key] = raw
                else:
                    kwargs[key] = float(raw)
            except ValueError:
                raise CatalogError(f"malformed value for {key!r}: {raw!r}") from None
    spec = ScenarioSpec(**kwargs)
    if spec.vehicles < 1:
        raise CatalogError("vehicles must be >= 1")
    if not 0 <= spec.activity_low <= spec.activity_high <= 1:
        raise CatalogError("need 0 <= activity_low <= activity_high <= 1")
    if spec.preroll_slots < 0:
        raise CatalogError("preroll_slots must be >= 0")
    if source is not None and not (isinstance(source, str) and "\n" in source):
        base = Path(source).parent
        for key in ("network", "catalog"):
            value = getattr(spec, key)
            if value is not None and not Path(value).is_absolute():
                spec = _replace(spec, **{key: str(base / value)})
    return spec


def _replace(spec, **kw):
    d = asdict(spec)
    d.update(kw)
    return ScenarioSpec(**d)


def default_scenario_text() -> str:
    return resources.files("dosm").joinpath("data/scenario.ini").read_text(encoding="utf-8")


@dataclass
class Scenario:
    """Everything a run needs, precomputed per slot.

    Slots ``0 .. preroll_slots-1`` are history only (demand the forecaster may
    look at); the run itself covers the ``cfg.n_slots`` slots after them.
    """
    name: str
    seed: int
    cfg: NetworkConfig
    services: list[ServiceSpec]
    edges: list[EdgeNode]
    requested: np.ndarray = field(repr=False)      # service per vehicle
    positions: np.ndarray = field(repr=False)      # slot x vehicle x 2, NaN when inactive
    demand: np.ndarray = field(repr=False)         # slot x edge x service
    preroll_slots: int = 0
    spec: ScenarioSpec | None = None

    @property
    def n_slots(self) -> int:
        return self.cfg.n_slots

    def active(self, t: int):
        """Positions and requested services of the vehicles active in live slot ``t``."""
        pos = self.positions[self.preroll_slots + t]
        mask = ~np.isnan(pos[:, 0])
        return pos[mask], self.requested[mask]

    def live_demand(self, t: int) -> np.ndarray:
        return self.demand[self.preroll_slots + t]

    def history(self, t: int) -> np.ndarray:
        """Demand of every slot before live slot ``t`` (pre-roll included)."""
        return self.demand[:self.preroll_slots + t]


def build_scenario(spec: ScenarioSpec | None = None, seed: int = 1,
                   records=None) -> Scenario:
    """Synthetic scenario from ``spec`` or, when ``records`` is given, a loaded trace.

    Synthetic fleets follow random-waypoint mobility; a sinusoidal share of
    the fleet is on the road at any time, and every on-duty stretch becomes
    its own vehicle.  A loaded trace uses ``spec.preroll_slots`` of its
    leading part as history when it is long enough.
    """
    spec = spec or parse_scenario(default_scenario_text())
    services, edges, cfg = load_catalog(spec.network, spec.catalog,
                                        seed=derive_seed(seed, "layers"))
    preroll = spec.preroll_slots
    if records is None:
        total_s = (preroll + cfg.n_slots) * cfg.slot_seconds
        raw = generate_trace(derive_seed(seed, "mobility"), spec.vehicles, total_s,
                             region_side_m=cfg.region_side_m, step_s=spec.step_s)
        activity = sinusoid_activity(spec.activity_low, spec.activity_high,
                                     spec.activity_period_s)
        records = split_sessions(raw, activity, derive_seed(seed, "shifts"))
    else:
        end = max(r.t for r in records) if records else 0.0
        preroll = min(preroll, max(0, int(end // cfg.slot_seconds) - cfg.n_slots))
    vehicles = build_vehicles(records, len(services), derive_seed(seed, "requests"))
    n_total = preroll + cfg.n_slots
    positions = slot_positions(vehicles, cfg, n_total)
    demand = demand_series(vehicles, edges, cfg, len(services), positions)
    requested = np.array([v.requested_service for v in vehicles], dtype=np.int64)
    return Scenario(spec.name, seed, cfg, services, edges, requested, positions, demand,
                    preroll, spec)


# ---------------------------------------------------------------------------
# trained components

@dataclass
class Models:
    critic: ValueNetwork | None = None
    forecasters: dict[int, GruForecaster] = field(default_factory=dict)


def service_histories(demand: np.ndarray) -> dict[int, np.ndarray]:
    """Per-service ``(slots, edges)`` series from a ``(slots, edges, services)`` array."""
    return {s: demand[:, :, s].astype(float) for s in range(demand.shape[2])}


def train_forecasters(scenario: Scenario, epochs: int | None = None, seed: int = 0,
                      services: Sequence[int] | None = None) -> dict[int, GruForecaster]:
    """One forecaster per service, fitted on the scenario's pre-roll demand."""
    spec = scenario.spec or ScenarioSpec()
    hist = service_histories(scenario.demand[:scenario.preroll_slots])
    out = {}
    for s in (services if services is not None else range(len(scenario.services))):
        est = GruForecaster(spec.gru_hidden, spec.gru_dense, spec.gru_window,
                            horizon=scenario.cfg.frame_slots,
                            epochs=spec.gru_epochs if epochs is None else epochs,
                            random_state=derive_seed(seed, f"gru/{s}") % 2**31)
        out[s] = est.fit_series(hist[s], stride=spec.gru_stride)
        log.info("forecaster for service %d: loss %.4f -> %.4f", s,
                 est.loss_curve_[0], est.loss_curve_[-1])
    return out


def collect_experiences(scenario: Scenario, seed: int = 0, max_instances: int = 4):
    """Critic training pairs from the scenario under random placements.

    Each slot draws a fresh placement with 1 to ``max_instances`` instances
    per service, so the critic sees both overloaded and relaxed services.
    """
    rng = np.random.default_rng(derive_seed(seed, "critic-data"))
    services, edges, cfg = scenario.services, scenario.edges, scenario.cfg
    X, y = [], []
    for t in range(scenario.n_slots):
        counts = np.zeros((len(edges), len(services)), dtype=np.int64)
        for s in range(len(services)):
            for _ in range(int(rng.integers(1, max_instances + 1))):
                counts[int(rng.integers(len(edges))), s] += 1
        placement = Placement(counts)
        points, req = scenario.active(t)
        feedback = _feedback(points, req, placement, services, edges, cfg)[0]
        state = encode_state(scenario.live_demand(t), placement, feedback, services)
        for s, svc in enumerate(services):
            X.append(critic_input(state, s, len(services)))
            y.append(target_value(feedback[s], svc.delay_threshold_s))
    return np.array(X), np.array(y)


def train_critic_model(scenario: Scenario, episodes: int | None = None, seed: int = 0,
                       iterations: int | None = None) -> ValueNetwork:
    spec = scenario.spec or ScenarioSpec()
    X, y = collect_experiences(scenario, seed)
    est = ValueNetwork(spec.critic_hidden,
                       episodes=spec.critic_episodes if episodes is None else episodes,
                       iterations=spec.critic_iterations if iterations is None else iterations,
                       random_state=derive_seed(seed, "critic") % 2**31)
    return est.fit(X, y)


def _copy_critic(critic: ValueNetwork | None, n_inputs: int, seed: int) -> ValueNetwork:
    """Private working copy for one run, so runs never leak state into each other."""
    if critic is None:
        est = ValueNetwork(random_state=derive_seed(seed, "critic") % 2**31)
        est._init(n_inputs)
        return est
    est = ValueNetwork(**critic.get_params())
    est._init(critic.n_features_in_)
    for k, v in critic.net_.params.items():
        est.net_.params[k][...] = v
    est.rng_ = np.random.default_rng(derive_seed(seed, "critic-online"))
    return est


# ---------------------------------------------------------------------------
# the loop

@dataclass
class SlotMetrics:
    slot: int
    active_vehicles: int
    mean_service_delay_s: float
    total_migration_delay_s: float
    services_migrated: int
    services_migrated_pct: float
    impacted_vehicles: int
    optimization_runs: int
    infeasible_runs: int
    scale_outs: int
    scale_ins: int
    instances: int
    wallclock_runtime_s: float = 0.0


SLOT_FIELDS = [f for f in SlotMetrics.__dataclass_fields__ if f != "wallclock_runtime_s"]


@dataclass
class ScenarioRun:
    policy: str
    seed: int
    scenario: str
    cfg: NetworkConfig
    services: list[ServiceSpec]
    slots: list[SlotMetrics]
    decisions: list[LifecycleDecision]
    final_placement: Placement
    service_delay: np.ndarray = field(repr=False)    # slot x service mean delay
    quality: np.ndarray = field(repr=False)          # slot x service critic estimate (NaN unused)


def _feedback(points, req, placement, services, edges, cfg):
    """Per-service mean delay, overall mean delay and the views used to compute them."""
    per = np.zeros(len(services))
    views = {}
    all_delays = []
    for s, svc in enumerate(services):
        mask = req == s
        view = ServiceView(points[mask], svc, edges, cfg)
        views[s] = view
        if mask.any():
            d, _ = view.evaluate(placement.instances(s))
            per[s] = mean_of(d)
            all_delays.append(d)
    overall = mean_of(np.concatenate(all_delays)) if all_delays else 0.0
    return per, overall, views


def impacted_vehicles(plan: MigratePlan, demand) -> int:
    """Vehicles attached to the migrating instance's source edge."""
    counts = demand.counts if hasattr(demand, "counts") else np.asarray(demand)
    return int(counts[plan.source_edge, plan.service])


def run_scenario(policy: str, scenario: Scenario, seed: int | None = None,
                 models: Models | None = None, trace: PlanTrace | None = None) -> ScenarioRun:
    policy = policy.upper()
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; choose from {', '.join(POLICIES)}")
    seed = scenario.seed if seed is None else seed
    models = models or Models()
    services, edges, cfg = scenario.services, scenario.edges, scenario.cfg
    S = len(services)
    placement = initial_placement(services, edges, cfg, seed=derive_seed(seed, "initial"))
    learns = policy in ("DRL", "DOSM")
    n_inputs = 2 * len(edges) * S + S + S
    critic = _copy_critic(models.critic, n_inputs, seed) if learns else None
    buffer = ReplayBuffer(5000)
    online_iters = (scenario.spec or ScenarioSpec()).online_iterations

    slots, decisions = [], []
    delay_log = np.zeros((scenario.n_slots, S))
    q_log = np.full((scenario.n_slots, S), np.nan)
    for t in range(scenario.n_slots):
        tic = time.perf_counter()
        points, req = scenario.active(t)
        demand = scenario.live_demand(t)
        per, overall, views = _feedback(points, req, placement, services, edges, cfg)
        delay_log[t] = per
        runs = infeasible = migrated = impacted = outs = ins = 0
        mig_delay = 0.0

        q = None
        if learns:
            state = encode_state(demand, placement, per, services)
            inputs = np.stack([critic_input(state, s, S) for s in range(S)])
            for s, svc in enumerate(services):
                buffer.push(Experience(inputs[s], "observe", float(per[s]),
                                       target_value(per[s], svc.delay_threshold_s)))
            train_critic(critic.net_, buffer, episodes=1, iterations=online_iters,
                         optimizer=critic.optimizer_, rng=critic.rng_, record_loss=False)
            q = critic.predict(inputs)
            q_log[t] = q

        plans = []          # (kind, service, plan or None)
        warm = t + 1 >= cfg.warmup_slots
        args = lambda s: (s, placement, demand, None, cfg, services, edges, views[s], trace)
        if policy == "AM":
            for s in range(S):
                plans.append(("MIGRATE", s, solve_migrate(*args(s))))
        elif policy == "DRL" and warm:
            for s in range(S):
                if q[s] < cfg.q_threshold:
                    plans.append(("MIGRATE", s, solve_migrate(*args(s))))
        elif policy == "DOSM" and warm and (t + 1) % cfg.frame_slots == 0 \
                and t + 1 < scenario.n_slots:
            hist = scenario.history(t + 1)
            preds = [predict_frame(models.forecasters.get(s), hist[:, :, s], cfg,
                                   cfg.frame_slots) for s in range(S)]
            frame = frame_decisions(preds, q, placement, cfg, services)
            decisions.extend(frame)
            for d in frame:
                if d.kind is Decision.MIGRATE:
                    plans.append(("MIGRATE", d.service, solve_migrate(*args(d.service))))
                elif d.kind is Decision.SCALE_OUT:
                    plans.append(("SCALE_OUT", d.service, solve_scale_out(*args(d.service))))
                elif d.kind is Decision.SCALE_IN:
                    plans.append(("SCALE_IN", d.service, solve_scale_in(*args(d.service))))

        for kind, s, plan in plans:
            runs += 1
            if plan is None:
                infeasible += 1
                log.debug("slot %d: %s for service %d infeasible, placement kept", t, kind, s)
                continue
            if kind == "MIGRATE":
                if not plan.service_delay_s < per[s]:
                    continue
                placement = apply_plan(placement, plan)
                migrated += 1
                impacted += impacted_vehicles(plan, demand)
                mig_delay += plan.migration_delay_s
            else:
                placement = apply_plan(placement, plan)
                outs += kind == "SCALE_OUT"
                ins += kind == "SCALE_IN"

        slots.append(SlotMetrics(
            t, len(points), overall, mig_delay, migrated, 100.0 * migrated / S, impacted,
            runs, infeasible, outs, ins, int(placement.instance_count.sum()),
            time.perf_counter() - tic))
    return ScenarioRun(policy, seed, scenario.name, cfg, services, slots, decisions,
                       placement, delay_log, q_log)


# ---------------------------------------------------------------------------
# reporting

def summarize(run: ScenarioRun) -> dict:
    n_slots = len(run.slots)
    denom = n_slots * len(run.services)
    runs = sum(m.optimization_runs for m in run.slots)
    migrations = sum(m.services_migrated for m in run.slots)
    infeasible = sum(m.infeasible_runs for m in run.slots)
    return {
        "schema_version": SCHEMA_VERSION,
        "policy": run.policy,
        "seed": run.seed,
        "scenario": run.scenario,
        "n_slots": n_slots,
        "n_services": len(run.services),
        "load_denominator": denom,
        "optimization_runs": runs,
        "infeasible_runs": infeasible,
        "migrations": migrations,
        "scale_outs": sum(m.scale_outs for m in run.slots),
        "scale_ins": sum(m.scale_ins for m in run.slots),
        "computation_load_pct": 100.0 * runs / denom,
        "migration_load_pct": 100.0 * migrations / denom,
        "mean_service_delay_s": math.fsum(m.mean_service_delay_s for m in run.slots) / n_slots,
        "total_migration_delay_s": math.fsum(m.total_migration_delay_s for m in run.slots),
        "impacted_vehicles": sum(m.impacted_vehicles for m in run.slots),
        "final_instances": int(run.final_placement.instance_count.sum()),
    }


def slot_csv(run: ScenarioRun) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SLOT_FIELDS)
    for m in run.slots:
        row = asdict(m)
        w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in SLOT_FIELDS])
    return out.getvalue()


def runtime_csv(run: ScenarioRun) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["slot", "wallclock_runtime_s", "optimization_runs"])
    for m in run.slots:
        w.writerow([m.slot, f"{m.wallclock_runtime_s:.6f}", m.optimization_runs])
    return out.getvalue()


def write_run(run: ScenarioRun, out_dir) -> dict[str, Path]:
    """Write slot CSV, runtime CSV, decision log and summary JSON; return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{run.policy}_seed{run.seed}"
    paths = {"slots": out_dir / f"{stem}_slots.csv",
             "runtime": out_dir / f"{stem}_runtime.csv",
             "decisions": out_dir / f"{stem}_decisions.jsonl",
             "summary": out_dir / f"{stem}_summary.json"}
    paths["slots"].write_text(slot_csv(run), encoding="utf-8")
    paths["runtime"].write_text(runtime_csv(run), encoding="utf-8")
    paths["decisions"].write_text("".join(d.to_json() + "\n" for d in run.decisions),
                                  encoding="utf-8")
    paths["summary"].write_text(json.dumps(summarize(run), indent=2, sort_keys=True) + "\n",
                                encoding="utf-8")
    return paths


def read_summary(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: summary schema_version {data.get('schema_version')!r}, "
                         f"expected {SCHEMA_VERSION}")
    return data
