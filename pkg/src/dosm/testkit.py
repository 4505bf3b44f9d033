"""Brute-force oracles and random instances for cross-checking the library.

Nothing here imports the delay or solver modules.  Every quantity is
recomputed with plain scalar loops from the catalog records, so agreement
with the vectorised production code is an independent check.  Float
operations are written in the same order as the production formulas so the
two agree bit for bit, which lets the solver tests use zero tolerance.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .catalog import SERVICE_TABLE, EdgeNode, NetworkConfig, Placement, ServiceSpec

MB = 1e6


@dataclass
class RandomInstance:
    seed: int
    cfg: NetworkConfig
    services: list[ServiceSpec]
    edges: list[EdgeNode]
    placement: Placement
    demand: np.ndarray                          # edge x service
    points: dict[int, np.ndarray] = field(repr=False)   # service -> (N, 2)


def random_instance(seed: int, n_edges: int = 9, n_services: int = 8,
                    max_vehicles: int = 50) -> RandomInstance:
    """A small network whose current placement respects every storage limit.

    Thresholds, capacities, edge speeds, storage and backhaul are randomised
    so that each constraint binds in some instances.
    """
    if not (1 <= n_edges <= 9 and 1 <= n_services <= 8 and max_vehicles <= 50):
        raise ValueError("instance caps: 9 edges, 8 services, 50 vehicles")
    rng = np.random.default_rng(seed)
    side = float(rng.uniform(2_000, 15_000))
    cfg = NetworkConfig(region_side_m=side, num_edges=n_edges,
                        backhaul_bps=float(rng.choice([2e8, 5e8, 1e9])),
                        slot_seconds=float(rng.choice([2.0, 5.0])), horizon_seconds=750.0 * 2,
                        distance_floor_m=1.0)
    services = []
    for i in range(n_services):
        name, thr, bits, kcycles, (lo, hi) = SERVICE_TABLE[i]
        services.append(ServiceSpec(
            i, name, thr * float(rng.uniform(0.15, 1.5)), float(bits), kcycles * 1000.0,
            float(rng.uniform(lo, hi)) * MB, int(rng.integers(1, 7)), (lo * MB, hi * MB)))
    edges = []
    for e in range(n_edges):
        cap = float(rng.uniform(0.4e9, 1.6e9))
        edges.append(EdgeNode(e, (float(rng.uniform(0, side)), float(rng.uniform(0, side))),
                              float(rng.uniform(2e9, 12e9)), cap,
                              float(rng.uniform(0, 0.2)) * cap))
    counts = np.zeros((n_edges, n_services), dtype=np.int64)
    free = np.array([e.storage_capacity_bytes - e.storage_used_bytes for e in edges])
    for s, svc in enumerate(services):
        for k in range(int(rng.integers(1, 4))):
            ok = np.flatnonzero(free >= svc.instance_layer_bytes)
            if not len(ok):
                break
            e = int(rng.choice(ok))
            counts[e, s] += 1
            free[e] -= svc.instance_layer_bytes
        if counts[:, s].sum() == 0:
            # head-room: enlarge the roomiest edge so every service has an instance
            e = int(np.argmax(free))
            grow = svc.instance_layer_bytes - free[e]
            edges[e] = replace(edges[e], storage_capacity_bytes=edges[e].storage_capacity_bytes + grow)
            free[e] = 0.0
            counts[e, s] += 1
    n_veh = int(rng.integers(0, max_vehicles + 1))
    req = rng.integers(0, n_services, n_veh)
    pos = rng.uniform(0, side, (n_veh, 2))
    demand = np.zeros((n_edges, n_services), dtype=np.int64)
    for (x, y), s in zip(pos, req):
        demand[oracle_nearest(x, y, edges), s] += 1
    points = {s: pos[req == s] for s in range(n_services)}
    return RandomInstance(seed, cfg, services, edges, Placement(counts), demand, points)


# ---------------------------------------------------------------------------
# scalar physics

def oracle_nearest(x: float, y: float, edges) -> int:
    best, best_d = None, None
    for e in edges:
        d = (x - e.position[0]) ** 2 + (y - e.position[1]) ** 2
        if best_d is None or d < best_d:
            best, best_d = e.id, d
    return best


def oracle_access(x, y, edge: EdgeNode, svc: ServiceSpec, cfg: NetworkConfig) -> float:
    dx = x - edge.position[0]
    dy = y - edge.position[1]
    d = max(math.sqrt(dx * dx + dy * dy), cfg.distance_floor_m)
    rate = cfg.bandwidth_hz * float(np.log2(1.0 + cfg.tx_power_w / (d * d) / cfg.noise_power_w))
    return d / cfg.propagation_speed_mps + svc.input_bits / rate


def oracle_comp(svc: ServiceSpec, edge: EdgeNode) -> float:
    return svc.input_bits * svc.compute_intensity / edge.cpu_hz


def oracle_migration_delay(svc: ServiceSpec, users: int, cfg: NetworkConfig) -> float:
    return (svc.instance_layer_bytes + cfg.user_context_bytes * users) * 8.0 / cfg.backhaul_bps


def naive_nearest_first(access: list[list[float]], comp: list[float], capacity: int):
    """Per-vehicle delays when vehicles are admitted in order of their best delay.

    Each admitted vehicle takes the instance that is cheapest for it given
    the loads so far; the ``r``-th vehicle on an instance pays ``1 + r // capacity``
    computation times.
    """
    n = len(access)
    keys = []
    for i in range(n):
        keys.append((min(access[i][j] + comp[j] for j in range(len(comp))), i))
    keys.sort()
    load = [0] * len(comp)
    delays = [0.0] * n
    served = [0] * n
    for _, i in keys:
        choice = None
        for j in range(len(comp)):
            cost = access[i][j] + comp[j] * (1 + load[j] // capacity)
            if choice is None or cost < choice[0]:
                choice = (cost, j)
        load[choice[1]] += 1
        delays[i], served[i] = choice
    return delays, served


def oracle_assignment(access: list[list[float]], comp: list[float], capacity: int) -> float:
    """Lowest achievable mean delay over every vehicle-to-instance assignment.

    Small cases only (6 vehicles, 3 instances).  An instance holding ``n``
    vehicles costs ``sum(1 + r // capacity for r < n)`` computation times in
    total whatever the admission order.
    """
    n, k = len(access), len(comp)
    if n > 6 or k > 3:
        raise ValueError("exhaustive assignment is capped at 6 vehicles and 3 instances")
    if n == 0:
        return 0.0
    best = math.inf
    for choice in itertools.product(range(k), repeat=n):
        total = sum(access[i][choice[i]] for i in range(n))
        for j in range(k):
            m = choice.count(j)
            total += comp[j] * sum(1 + r // capacity for r in range(m))
        best = min(best, total / n)
    return best


def _service_eval(inst: RandomInstance, s: int, column):
    """``(mean delay, {hosting edge: mean delay of its vehicles})`` for a placement column."""
    svc = inst.services[s]
    hosts = []
    for e, c in enumerate(column):
        hosts.extend([e] * int(c))
    pts = inst.points[s]
    access = [[oracle_access(float(x), float(y), inst.edges[e], svc, inst.cfg) for e in hosts]
              for x, y in pts]
    comp = [oracle_comp(svc, inst.edges[e]) for e in hosts]
    delays, served = naive_nearest_first(access, comp, svc.capacity)
    per_edge = {}
    for e in sorted(set(hosts)):
        mine = [d for d, j in zip(delays, served) if hosts[j] == e]
        per_edge[e] = math.fsum(mine) / len(mine) if mine else 0.0
    mean = math.fsum(delays) / len(delays) if delays else 0.0
    return mean, per_edge


def _used(inst: RandomInstance):
    used = []
    for e, edge in enumerate(inst.edges):
        u = edge.storage_used_bytes
        for s, svc in enumerate(inst.services):
            u += int(inst.placement.counts[e, s]) * svc.instance_layer_bytes
        used.append(u)
    return used


# ---------------------------------------------------------------------------
# oracles

@dataclass(frozen=True)
class OracleResult:
    objective: float
    source: int | None
    target: int


def oracle_migrate(inst: RandomInstance, s: int) -> OracleResult | None:
    svc = inst.services[s]
    x = [int(c) for c in inst.placement.counts[:, s]]
    used = _used(inst)
    best = None
    for ei in range(len(x)):
        for e in range(len(x)):
            if x[ei] == 0 or e == ei:
                continue
            z = list(x)
            z[ei] -= 1
            z[e] += 1
            users = int(inst.demand[ei, s])
            tm = oracle_migration_delay(svc, users, inst.cfg)
            if tm > inst.cfg.slot_seconds:
                continue
            if used[e] + (svc.instance_layer_bytes + inst.cfg.user_context_bytes * users) \
                    > inst.edges[e].storage_capacity_bytes:
                continue
            if sum(abs(a - b) for a, b in zip(z, x)) > 2 or sum(z) != sum(x):
                continue
            mean, per_edge = _service_eval(inst, s, z)
            if any(m > svc.delay_threshold_s for m in per_edge.values()):
                continue
            cand = (mean + tm, ei, e)
            if best is None or cand < best:
                best = cand
    return None if best is None else OracleResult(*best)


def oracle_scale(inst: RandomInstance, s: int, direction: str) -> OracleResult | None:
    svc = inst.services[s]
    x = [int(c) for c in inst.placement.counts[:, s]]
    if direction == "in" and sum(x) < 2:
        raise ValueError("scale-in needs two instances")
    used = _used(inst)
    best = None
    for e in range(len(x)):
        if x[e] == 0:
            continue
        z = list(x)
        if direction == "out":
            if used[e] + svc.instance_layer_bytes > inst.edges[e].storage_capacity_bytes:
                continue
            z[e] += 1
        else:
            z[e] -= 1
        mean, per_edge = _service_eval(inst, s, z)
        if any(m > svc.delay_threshold_s for m in per_edge.values()):
            continue
        cand = (mean, e)
        if best is None or cand < best:
            best = cand
    return None if best is None else OracleResult(best[0], None, best[1])


# ---------------------------------------------------------------------------
# post-hoc constraint checks

def check_migrate(inst: RandomInstance, plan) -> list[str]:
    """Names of the constraints the migration plan violates (empty when valid)."""
    s = plan.service
    svc = inst.services[s]
    x = [int(c) for c in inst.placement.counts[:, s]]
    z = list(x)
    bad = []
    if x[plan.source_edge] < 1:
        bad.append("source hosts no instance")
    if plan.source_edge == plan.target_edge:
        bad.append("self link")
    z[plan.source_edge] -= 1
    z[plan.target_edge] += 1
    users = int(inst.demand[plan.source_edge, s])
    tm = oracle_migration_delay(svc, users, inst.cfg)
    if tm > inst.cfg.slot_seconds:
        bad.append("migration time")
    if abs(tm - plan.migration_delay_s) > 1e-12:
        bad.append("reported migration delay")
    if _used(inst)[plan.target_edge] + svc.instance_layer_bytes + \
            inst.cfg.user_context_bytes * users > inst.edges[plan.target_edge].storage_capacity_bytes:
        bad.append("storage")
    if sum(abs(a - b) for a, b in zip(z, x)) > 2:
        bad.append("moved more than one instance")
    if sum(z) != sum(x) or min(z) < 0:
        bad.append("instance count")
    mean, per_edge = _service_eval(inst, s, z)
    if any(m > svc.delay_threshold_s for m in per_edge.values()):
        bad.append("delay threshold")
    if mean + tm != plan.objective_value:
        bad.append("objective")
    return bad


def check_scale(inst: RandomInstance, plan) -> list[str]:
    s = plan.service
    svc = inst.services[s]
    x = [int(c) for c in inst.placement.counts[:, s]]
    z = list(x)
    bad = []
    if x[plan.edge] < 1:
        bad.append("edge does not host the service")
    if plan.direction == "out":
        z[plan.edge] += 1
        if _used(inst)[plan.edge] + svc.instance_layer_bytes > \
                inst.edges[plan.edge].storage_capacity_bytes:
            bad.append("storage")
        if sum(z) != sum(x) + 1:
            bad.append("instance count")
    else:
        if sum(x) < 2:
            bad.append("scale-in below one instance")
        z[plan.edge] -= 1
        if sum(z) != sum(x) - 1 or min(z) < 0:
            bad.append("instance count")
    if any(b > a for a, b in zip(x, z) if a == 0):
        bad.append("new hosting edge")
    mean, per_edge = _service_eval(inst, s, z)
    if any(m > svc.delay_threshold_s for m in per_edge.values()):
        bad.append("delay threshold")
    if mean != plan.objective_value:
        bad.append("objective")
    return bad


# ---------------------------------------------------------------------------
# gradients

def finite_diff_grad(f, params, epsilon: float = 1e-6):
    """Central-difference gradient of scalar ``f()`` w.r.t. every entry of ``params``.

    ``params`` is an array or a dict of arrays, perturbed in place and restored.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    if isinstance(params, dict):
        return {k: finite_diff_grad(f, v, epsilon) for k, v in params.items()}
    grad = np.zeros_like(params, dtype=float)
    flat = params.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + epsilon
        up = f()
        flat[i] = old - epsilon
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * epsilon)
    return grad
