"""Exact lifecycle solvers: migrate one instance, add one, or delete one.

Each problem has at most ``|E|^2`` candidates, so the solvers enumerate them
all and return the global optimum.  Candidates are scored through
:class:`~dosm.delay.ServiceView`, so the objective a solver reports is the
mean delay the simulator will observe for the same vehicles.

Constraints, for the placement ``z`` that results from a candidate:

* delay: every edge hosting the service serves its vehicles with mean delay
  at most the service threshold
* storage: the receiving edge fits the transferred bytes (instance layer, plus
  user contexts when migrating)
* migration time: the transfer fits in one slot
* exactly one instance moves, is added or is removed
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .catalog import CatalogError, EdgeNode, NetworkConfig, Placement, PlanConflictError, ServiceSpec
from .delay import ServiceView, mean_of, migration_delay


@dataclass(frozen=True)
class MigratePlan:
    service: int
    source_edge: int
    target_edge: int
    objective_value: float
    migration_delay_s: float
    service_delay_s: float
    users: int                      # contexts moved with the instance
    basis: tuple[int, ...]          # placement column the plan was solved against

    @property
    def link(self) -> tuple[int, int]:
        return (self.source_edge, self.target_edge)


@dataclass(frozen=True)
class ScalePlan:
    service: int
    edge: int
    direction: str                  # "out" or "in"
    objective_value: float
    basis: tuple[int, ...]


class PlanTrace:
    """Audit log: one JSON line per solve."""

    def __init__(self, stream=None):
        self.stream = stream
        self.records: list[dict] = []

    def record(self, kind: str, service: int, candidates: int, plan) -> None:
        rec = {"decision": kind, "service": service, "candidates": candidates,
               "plan": None if plan is None else {k: v for k, v in asdict(plan).items()
                                                  if k != "basis"},
               "objective": None if plan is None else plan.objective_value}
        self.records.append(rec)
        if self.stream is not None:
            self.stream.write(json.dumps(rec, sort_keys=True) + "\n")


def _inputs(service: int, placement, demand, points, cfg, services, edges, view):
    if not 0 <= service < len(services):
        raise LookupError(f"unknown service {service}")
    svc = services[service]
    counts = demand.counts if hasattr(demand, "counts") else np.asarray(demand)
    if view is None:
        view = ServiceView(points, svc, edges, cfg)
    used = placement.storage_used(services, edges)
    cap = np.array([e.storage_capacity_bytes for e in edges])
    return svc, counts, view, used, cap


def _score(view: ServiceView, instances: list[int], threshold: float):
    """Mean delay under ``instances``, or ``None`` when a hosting edge breaks the threshold."""
    delays, served_by = view.evaluate(instances)
    for e in set(instances):
        if mean_of(delays[served_by == e]) > threshold:
            return None
    return mean_of(delays)


def solve_migrate(service: int, placement: Placement, demand, points, cfg: NetworkConfig,
                  services: Sequence[ServiceSpec], edges: Sequence[EdgeNode],
                  view: ServiceView | None = None, trace: PlanTrace | None = None):
    """Best single-instance move for ``service``, or ``None`` if no move is feasible.

    Objective: mean service delay after the move plus the migration delay.
    Ties go to the lower source edge, then the lower target edge.
    """
    svc, counts, view, used, cap = _inputs(service, placement, demand, points, cfg,
                                           services, edges, view)
    current = placement.instances(service)
    if not current:
        raise ValueError(f"service {service} has no instance to migrate")
    best = None
    n_cand = 0
    for src in placement.hosting_edges(service):
        users = int(counts[src, service])
        tm = migration_delay(svc, users, cfg)
        if tm > cfg.slot_seconds:
            continue
        moved = svc.instance_layer_bytes + cfg.user_context_bytes * users
        rest = list(current)
        rest.remove(src)
        for dst in range(len(edges)):
            if dst == src:
                continue
            n_cand += 1
            if used[dst] + moved > cap[dst]:
                continue
            ts = _score(view, sorted(rest + [dst]), svc.delay_threshold_s)
            if ts is None:
                continue
            obj = ts + tm
            if best is None or obj < best[0]:
                best = (obj, src, dst, tm, ts, users)
    plan = None
    if best is not None:
        obj, src, dst, tm, ts, users = best
        plan = MigratePlan(service, src, dst, obj, tm, ts, users,
                           tuple(int(c) for c in placement.counts[:, service]))
    if trace is not None:
        trace.record("MIGRATE", service, n_cand, plan)
    return plan


def solve_scale_out(service: int, placement: Placement, demand, points, cfg: NetworkConfig,
                    services: Sequence[ServiceSpec], edges: Sequence[EdgeNode],
                    view: ServiceView | None = None, trace: PlanTrace | None = None):
    """Add one instance on an edge already hosting ``service``; ``None`` if infeasible."""
    svc, _, view, used, cap = _inputs(service, placement, demand, points, cfg,
                                      services, edges, view)
    current = placement.instances(service)
    if not current:
        raise ValueError(f"service {service} has no instance to scale")
    best = None
    hosts = placement.hosting_edges(service)
    for e in hosts:
        if used[e] + svc.instance_layer_bytes > cap[e]:
            continue
        ts = _score(view, sorted(current + [e]), svc.delay_threshold_s)
        if ts is None:
            continue
        if best is None or ts < best[0]:
            best = (ts, e)
    plan = None if best is None else ScalePlan(
        service, best[1], "out", best[0], tuple(int(c) for c in placement.counts[:, service]))
    if trace is not None:
        trace.record("SCALE_OUT", service, len(hosts), plan)
    return plan


def solve_scale_in(service: int, placement: Placement, demand, points, cfg: NetworkConfig,
                   services: Sequence[ServiceSpec], edges: Sequence[EdgeNode],
                   view: ServiceView | None = None, trace: PlanTrace | None = None):
    """Delete one instance of ``service``; needs at least two instances."""
    svc, _, view, _, _ = _inputs(service, placement, demand, points, cfg,
                                 services, edges, view)
    current = placement.instances(service)
    if len(current) < 2:
        raise ValueError(f"scale-in needs >= 2 instances of service {service}, "
                         f"found {len(current)}")
    best = None
    hosts = placement.hosting_edges(service)
    for e in hosts:
        inst = list(current)
        inst.remove(e)
        ts = _score(view, inst, svc.delay_threshold_s)
        if ts is None:
            continue
        if best is None or ts < best[0]:
            best = (ts, e)
    plan = None if best is None else ScalePlan(
        service, best[1], "in", best[0], tuple(int(c) for c in placement.counts[:, service]))
    if trace is not None:
        trace.record("SCALE_IN", service, len(hosts), plan)
    return plan


def apply_plan(placement: Placement, plan) -> Placement:
    """Return the placement after ``plan``; raises if the plan is stale."""
    s = plan.service
    if tuple(int(c) for c in placement.counts[:, s]) != plan.basis:
        raise PlanConflictError(f"placement of service {s} changed since the plan was solved")
    out = placement.copy()
    if isinstance(plan, MigratePlan):
        out.counts[plan.source_edge, s] -= 1
        out.counts[plan.target_edge, s] += 1
    elif plan.direction == "out":
        out.counts[plan.edge, s] += 1
    elif plan.direction == "in":
        out.counts[plan.edge, s] -= 1
    else:
        raise ValueError(f"unknown scale direction {plan.direction!r}")
    return out


def initial_placement(services: Sequence[ServiceSpec], edges: Sequence[EdgeNode],
                      cfg: NetworkConfig, seed: int = 0, instances=None,
                      n_samples: int = 200) -> Placement:
    """Greedy start-up placement.

    Services go in descending instance-layer size.  Each instance lands on the
    feasible edge minimising, in order, the largest storage fraction over all
    edges after placing it and the mean delay to uniformly spread demand
    points (sampled with ``seed``); remaining ties go to the lower edge id.
    """
    instances = [1] * len(services) if instances is None else list(instances)
    need = sum(n * s.instance_layer_bytes for n, s in zip(instances, services))
    cap = np.array([e.storage_capacity_bytes for e in edges])
    used = np.array([e.storage_used_bytes for e in edges], dtype=float)
    if need > (cap - used).sum():
        raise CatalogError(f"instances need {need:.0f} bytes, edges have "
                           f"{(cap - used).sum():.0f} free; shortfall "
                           f"{need - (cap - used).sum():.0f} bytes")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, cfg.region_side_m, (n_samples, 2))
    placement = Placement.empty(len(edges), len(services))
    order = sorted(range(len(services)), key=lambda i: (-services[i].instance_layer_bytes, i))
    for i in order:
        svc = services[i]
        view = ServiceView(pts, svc, edges, cfg)
        for _ in range(instances[i]):
            best = None
            for e in range(len(edges)):
                if used[e] + svc.instance_layer_bytes > cap[e]:
                    continue
                after = used.copy()
                after[e] += svc.instance_layer_bytes
                key = (float(np.max(after / cap)),
                       view.mean_delay(sorted(placement.instances(i) + [e])), e)
                if best is None or key < best:
                    best = key
            if best is None:
                raise CatalogError(f"no edge can host an instance of {svc.name!r} "
                                   f"({svc.instance_layer_bytes:.0f} bytes)")
            placement.counts[best[2], i] += 1
            used[best[2]] += svc.instance_layer_bytes
    return placement

