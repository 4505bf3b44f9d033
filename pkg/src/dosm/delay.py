"""Service and migration delay models.

A vehicle reaching an instance on edge ``e`` pays

    propagation  = d / c
    transmission = D_i / (W log2(1 + P / (d^2 N_o)))
    computation  = D_i C_s / f_e

with ``d`` floored at ``cfg.distance_floor_m``.  An instance serves
``capacity`` vehicles in parallel.  Vehicles are admitted nearest-first; each
takes whichever instance of its service gives it the lowest delay given the
loads so far.  Once every instance is full, further vehicles wait for extra
processing rounds: the ``r``-th admission on an instance (0-based) pays
``1 + r // capacity`` computation times.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .catalog import EdgeNode, NetworkConfig, Placement, ServiceSpec


class InfeasibleError(RuntimeError):
    """Demand exists for a service that has no placed instance."""


@dataclass(frozen=True)
class DelayBreakdown:
    prop_s: float
    trans_s: float
    comp_s: float
    total_s: float


def access_rate(dist_m, cfg: NetworkConfig):
    """Uplink rate in bits/s at distance ``dist_m`` (scalar or array)."""
    d = np.maximum(dist_m, cfg.distance_floor_m)
    snr = cfg.tx_power_w / (d * d) / cfg.noise_power_w
    return cfg.bandwidth_hz * np.log2(1.0 + snr)


def computation_delay(svc: ServiceSpec, edge: EdgeNode) -> float:
    return svc.input_bits * svc.compute_intensity / edge.cpu_hz


def service_delay(vehicle_pos, edge: EdgeNode, svc: ServiceSpec,
                  cfg: NetworkConfig) -> DelayBreakdown:
    dx = vehicle_pos[0] - edge.position[0]
    dy = vehicle_pos[1] - edge.position[1]
    d = max(math.sqrt(dx * dx + dy * dy), cfg.distance_floor_m)
    prop = d / cfg.propagation_speed_mps
    trans = svc.input_bits / float(access_rate(d, cfg))
    comp = computation_delay(svc, edge)
    return DelayBreakdown(prop, trans, comp, prop + trans + comp)


def migration_delay(svc: ServiceSpec, users: int, cfg: NetworkConfig) -> float:
    """Backhaul time to move the instance layer plus ``users`` user contexts."""
    if users < 0:
        raise ValueError("users must be >= 0")
    size_bytes = svc.instance_layer_bytes + cfg.user_context_bytes * users
    return size_bytes * 8.0 / cfg.backhaul_bps


def access_delays(points: np.ndarray, edge_xy: np.ndarray, svc: ServiceSpec,
                  cfg: NetworkConfig) -> np.ndarray:
    """Propagation plus transmission delay, ``(vehicles, edges)``."""
    dx = points[:, None, 0] - edge_xy[None, :, 0]
    dy = points[:, None, 1] - edge_xy[None, :, 1]
    d = np.maximum(np.sqrt(dx * dx + dy * dy), cfg.distance_floor_m)
    return d / cfg.propagation_speed_mps + svc.input_bits / access_rate(d, cfg)


def assign(access: np.ndarray, comp: np.ndarray, capacity: int):
    """Admit vehicles to instances; returns ``(delay per vehicle, instance index)``.

    ``access`` is ``(vehicles, instances)`` and ``comp`` the per-instance
    computation delay.  Ties go to the lower vehicle index (admission order)
    and to the lower instance index (choice).
    """
    n, k = access.shape
    delays = np.empty(n)
    inst = np.zeros(n, dtype=np.int64)
    if n == 0:
        return delays, inst
    if k == 0:
        raise InfeasibleError("no instance to serve the demand")
    best = (access + comp[None, :]).min(axis=1)
    order = np.argsort(best, kind="stable")
    if k == 1 or (np.all(access == access[:, :1]) and np.all(comp == comp[0])):
        # identical instances fill one after another, round by round
        rank = np.arange(n)
        rounds = 1 + rank // (k * capacity)
        inst[order] = (rank % (k * capacity)) // capacity
        delays[order] = access[order, 0] + comp[0] * rounds
        return delays, inst
    acc = access.tolist()
    comp_l = comp.tolist()
    load = [0] * k
    for i in order.tolist():
        row = acc[i]
        best_k, best_cost = 0, row[0] + comp_l[0] * (1 + load[0] // capacity)
        for j in range(1, k):
            cost = row[j] + comp_l[j] * (1 + load[j] // capacity)
            if cost < best_cost:
                best_k, best_cost = j, cost
        load[best_k] += 1
        delays[i] = best_cost
        inst[i] = best_k
    return delays, inst


def mean_of(delays) -> float:
    """Exactly rounded mean, independent of summation order; 0 for no vehicles."""
    return math.fsum(delays) / len(delays) if len(delays) else 0.0


class ServiceView:
    """Precomputed delays of one service's vehicles to every edge.

    Solvers evaluate many candidate placements for the same vehicles, so the
    access delays are computed once and candidate instance lists only select
    columns.
    """

    def __init__(self, points: np.ndarray, svc: ServiceSpec, edges: Sequence[EdgeNode],
                 cfg: NetworkConfig):
        self.svc = svc
        self.points = np.asarray(points, dtype=float).reshape(-1, 2)
        exy = np.array([e.position for e in edges], dtype=float)
        self.access = access_delays(self.points, exy, svc, cfg)
        self.comp = np.array([computation_delay(svc, e) for e in edges])

    @property
    def n_vehicles(self) -> int:
        return len(self.points)

    def evaluate(self, instance_edges: Sequence[int]):
        """Per-vehicle delays and the hosting edge serving each vehicle."""
        idx = np.asarray(instance_edges, dtype=np.int64)
        delays, inst = assign(self.access[:, idx], self.comp[idx], self.svc.capacity)
        return delays, idx[inst] if len(idx) else inst

    def mean_delay(self, instance_edges: Sequence[int]) -> float:
        return mean_of(self.evaluate(instance_edges)[0])

    def edge_means(self, instance_edges: Sequence[int]) -> dict[int, float]:
        """Mean delay of the vehicles served from each hosting edge."""
        delays, served_by = self.evaluate(instance_edges)
        return {int(e): mean_of(delays[served_by == e]) for e in sorted(set(instance_edges))}


def mean_service_delay(points: np.ndarray, requested: np.ndarray, placement: Placement,
                       cfg: NetworkConfig, services: Sequence[ServiceSpec],
                       edges: Sequence[EdgeNode]) -> float:
    """Mean delay over all vehicles, each served under the admission rule above."""
    per_service = service_delays(points, requested, placement, cfg, services, edges)
    all_delays = np.concatenate([d for d in per_service.values()]) if per_service else []
    return mean_of(all_delays)


def service_delays(points, requested, placement, cfg, services, edges) -> dict[int, np.ndarray]:
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    requested = np.asarray(requested, dtype=np.int64)
    out = {}
    for svc in services:
        mask = requested == svc.id
        if not mask.any():
            continue
        inst = placement.instances(svc.id)
        if not inst:
            raise InfeasibleError(f"service {svc.name!r} has demand but no instance")
        out[svc.id] = ServiceView(points[mask], svc, edges, cfg).evaluate(inst)[0]
    return out
