"""Vehicle trajectories: parsing, synthesis, slot discretisation and demand counting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .catalog import EdgeNode, NetworkConfig

EARTH_RADIUS_M = 6_371_000.0
# south-west corner of the 15 x 15 km extraction window over San Francisco
SF_ORIGIN = (37.70, -122.52)


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceRecord:
    vehicle_id: int
    t: float
    x: float
    y: float


@dataclass
class Vehicle:
    id: int
    requested_service: int
    times: np.ndarray = field(repr=False)
    xy: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        if len(self.times) == 0 or len(self.times) != len(self.xy):
            raise TraceError(f"vehicle {self.id}: empty or misaligned trajectory")
        if np.any(np.diff(self.times) <= 0):
            raise TraceError(f"vehicle {self.id}: timestamps not strictly increasing")

    @property
    def span(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def active_at(self, t: float) -> bool:
        return self.times[0] <= t <= self.times[-1]


@dataclass
class DemandMatrix:
    slot: int
    counts: np.ndarray   # edge x service

    @property
    def total(self) -> int:
        return int(self.counts.sum())


# ---------------------------------------------------------------------------
# parsing

def _lines(source) -> Iterable[str]:
    if isinstance(source, (str, bytes)):
        text = source.decode() if isinstance(source, bytes) else source
        return text.splitlines()
    return source


def parse_trace(source, format: str = "xy_csv", *, vehicle_id: int | None = None,
                origin: tuple[float, float] = SF_ORIGIN, epoch0: float | None = None,
                region_side_m: float = 15_000.0) -> list[TraceRecord]:
    """Parse a trace into records sorted by (vehicle, time).

    ``xy_csv``: ``vehicle_id,t,x,y`` lines (header optional), times strictly
    increasing per vehicle in file order.  Positions are clipped to the region.

    ``latlon_cab``: ``lat lon occupancy epoch`` lines for a single vehicle
    (``vehicle_id`` required).  Cab logs are often newest-first, so a strictly
    monotone sequence in either direction is accepted.  Positions are projected
    equirectangularly around ``origin``; records outside the square region are
    dropped.  ``t`` counts from ``epoch0`` (default: the earliest epoch in the file).
    """
    if format == "xy_csv":
        return _parse_xy(source, region_side_m)
    if format == "latlon_cab":
        if vehicle_id is None:
            raise TraceError("latlon_cab traces need a vehicle_id (the file stem)")
        return _parse_cab(source, vehicle_id, origin, epoch0, region_side_m)
    raise TraceError(f"unknown trace format {format!r}")


def _parse_xy(source, side):
    records = []
    last_t: dict[int, float] = {}
    for lineno, line in enumerate(_lines(source), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if lineno == 1 and parts[0] == "vehicle_id":
            continue
        if len(parts) != 4:
            raise TraceError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            vid = int(parts[0])
            t, x, y = (float(p) for p in parts[1:])
        except ValueError:
            raise TraceError(f"line {lineno}: malformed record {line!r}") from None
        if not (math.isfinite(t) and math.isfinite(x) and math.isfinite(y)) or t < 0:
            raise TraceError(f"line {lineno}: invalid values {line!r}")
        if vid in last_t and t <= last_t[vid]:
            raise TraceError(f"vehicle {vid}: timestamp {t} not after {last_t[vid]} "
                             f"(line {lineno})")
        last_t[vid] = t
        records.append(TraceRecord(vid, t, min(max(x, 0.0), side), min(max(y, 0.0), side)))
    records.sort(key=lambda r: (r.vehicle_id, r.t))
    return records


def project(lat: float, lon: float, origin=SF_ORIGIN) -> tuple[float, float]:
    lat0, lon0 = origin
    x = EARTH_RADIUS_M * math.radians(lon - lon0) * math.cos(math.radians(lat0))
    y = EARTH_RADIUS_M * math.radians(lat - lat0)
    return x, y


def _parse_cab(source, vid, origin, epoch0, side):
    raw = []
    for lineno, line in enumerate(_lines(source), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise TraceError(f"line {lineno}: expected 'lat lon occupancy epoch'")
        try:
            lat, lon = float(parts[0]), float(parts[1])
            int(parts[2])
            epoch = float(parts[3])
        except ValueError:
            raise TraceError(f"line {lineno}: malformed record {line!r}") from None
        raw.append((epoch, lat, lon, lineno))
    if len(raw) > 1:
        steps = np.diff([r[0] for r in raw])
        if not (np.all(steps > 0) or np.all(steps < 0)):
            raise TraceError(f"vehicle {vid}: timestamps not strictly monotone")
    raw.sort()
    if epoch0 is None:
        epoch0 = raw[0][0] if raw else 0.0
    records = []
    for epoch, lat, lon, lineno in raw:
        if epoch < epoch0:
            raise TraceError(f"vehicle {vid}: epoch {epoch} before epoch0 (line {lineno})")
        x, y = project(lat, lon, origin)
        if 0.0 <= x <= side and 0.0 <= y <= side:
            records.append(TraceRecord(vid, epoch - epoch0, x, y))
    return records


def load_cab_directory(directory, origin=SF_ORIGIN, region_side_m=15_000.0,
                       pattern="*.txt") -> list[TraceRecord]:
    """Load one cab file per vehicle; the file stem (or its trailing digits) is the id."""
    paths = sorted(Path(directory).glob(pattern))
    texts = {p: p.read_text() for p in paths}
    epochs = [float(line.split()[3]) for text in texts.values()
              for line in text.splitlines() if line.strip()]
    epoch0 = min(epochs) if epochs else 0.0
    records = []
    for p, text in texts.items():
        digits = "".join(ch for ch in p.stem if ch.isdigit())
        vid = int(digits) if digits else paths.index(p)
        records.extend(parse_trace(text, "latlon_cab", vehicle_id=vid, origin=origin,
                                   epoch0=epoch0, region_side_m=region_side_m))
    records.sort(key=lambda r: (r.vehicle_id, r.t))
    return records


def format_trace(records: Sequence[TraceRecord]) -> str:
    lines = ["vehicle_id,t,x,y"]
    lines += [f"{r.vehicle_id},{r.t!r},{r.x!r},{r.y!r}" for r in records]
    return "\n".join(lines) + "\n"


def write_trace(records: Sequence[TraceRecord], path) -> None:
    Path(path).write_text(format_trace(records), encoding="utf-8")


def read_trace(path, format: str = "xy_csv", **kwargs) -> list[TraceRecord]:
    with open(path, encoding="utf-8") as fh:
        return parse_trace(fh.read(), format, **kwargs)


# ---------------------------------------------------------------------------
# synthesis

def generate_trace(seed: int, n_vehicles: int, horizon_s: float,
                   model: str = "random_waypoint", *, region_side_m: float = 15_000.0,
                   step_s: float = 5.0, speed_range=(5.0, 20.0)) -> list[TraceRecord]:
    """Random-waypoint trajectories sampled every ``step_s`` over ``[0, horizon_s]``."""
    if model != "random_waypoint":
        raise TraceError(f"unknown mobility model {model!r}")
    if n_vehicles < 1:
        raise TraceError("n_vehicles must be >= 1")
    if horizon_s <= 0 or step_s <= 0:
        raise TraceError("horizon_s and step_s must be positive")
    rng = np.random.default_rng(seed)
    lo, hi = speed_range
    pos = rng.uniform(0, region_side_m, (n_vehicles, 2))
    goal = rng.uniform(0, region_side_m, (n_vehicles, 2))
    speed = rng.uniform(lo, hi, n_vehicles)

    n_steps = int(math.floor(horizon_s / step_s + 1e-9))
    times = [k * step_s for k in range(n_steps + 1)]
    if times[-1] < horizon_s - 1e-9:
        times.append(float(horizon_s))
    snapshots = [pos.copy()]
    for prev, t in zip(times, times[1:]):
        dt = t - prev
        delta = goal - pos
        dist = np.hypot(delta[:, 0], delta[:, 1])
        reach = speed * dt
        arrived = dist <= reach
        frac = np.where(arrived, 1.0, reach / np.maximum(dist, 1e-12))
        pos = pos + delta * frac[:, None]
        k = int(arrived.sum())
        if k:
            goal[arrived] = rng.uniform(0, region_side_m, (k, 2))
            speed[arrived] = rng.uniform(lo, hi, k)
        snapshots.append(pos.copy())
    stack = np.stack(snapshots, axis=1)      # vehicle x time x 2
    return [TraceRecord(v, float(t), float(stack[v, k, 0]), float(stack[v, k, 1]))
            for v in range(n_vehicles) for k, t in enumerate(times)]


def sinusoid_activity(low: float, high: float, period_s: float,
                      phase: float = 0.0) -> Callable[[np.ndarray], np.ndarray]:
    """Fraction of the fleet on the road, oscillating between ``low`` and ``high``."""
    def activity(t):
        t = np.asarray(t, dtype=float)
        return low + (high - low) * 0.5 * (1.0 + np.sin(2 * np.pi * t / period_s + phase))
    return activity


def split_sessions(records: Sequence[TraceRecord], activity, seed: int) -> list[TraceRecord]:
    """Keep each vehicle only while it is on duty.

    Vehicle ``v`` draws ``u_v ~ U(0, 1)`` and is on duty whenever
    ``u_v < activity(t)``, so the expected number of active vehicles tracks
    ``activity``.  Every maximal on-duty run of two or more records becomes a
    separate vehicle id (one id per shift).
    """
    by_vehicle = _group(records)
    rng = np.random.default_rng(seed)
    u = rng.uniform(0, 1, len(by_vehicle))
    out = []
    next_id = 0
    for (vid, recs), threshold in zip(sorted(by_vehicle.items()), u):
        on = np.asarray(activity(np.array([r.t for r in recs]))) > threshold
        run: list[TraceRecord] = []
        for rec, flag in zip(recs, list(on) + [False]):
            if flag:
                run.append(rec)
                continue
            if len(run) >= 2:
                out.extend(TraceRecord(next_id, r.t, r.x, r.y) for r in run)
                next_id += 1
            run = []
        if len(run) >= 2:
            out.extend(TraceRecord(next_id, r.t, r.x, r.y) for r in run)
            next_id += 1
    return out


def window_trace(records: Sequence[TraceRecord], t_start: float,
                 t_end: float) -> list[TraceRecord]:
    """Cut trajectories to ``[t_start, t_end]`` (interpolating the cut points) and shift to 0."""
    out = []
    for vid, recs in sorted(_group(records).items()):
        t = np.array([r.t for r in recs])
        if t[-1] < t_start or t[0] > t_end:
            continue
        a, b = max(t[0], t_start), min(t[-1], t_end)
        if b <= a:
            continue
        x = np.array([r.x for r in recs])
        y = np.array([r.y for r in recs])
        inner = t[(t > a) & (t < b)]
        for tt in np.concatenate([[a], inner, [b]]):
            out.append(TraceRecord(vid, float(tt - t_start), float(np.interp(tt, t, x)),
                                   float(np.interp(tt, t, y))))
    return out


def _group(records) -> dict[int, list[TraceRecord]]:
    groups: dict[int, list[TraceRecord]] = {}
    for r in records:
        groups.setdefault(r.vehicle_id, []).append(r)
    for recs in groups.values():
        recs.sort(key=lambda r: r.t)
    return groups


def assign_services(vehicle_ids: Sequence[int], n_services: int, seed: int,
                    probs: Sequence[float] | None = None) -> dict[int, int]:
    """Fixed requested service per vehicle, drawn from a categorical distribution."""
    rng = np.random.default_rng(seed)
    draws = rng.choice(n_services, size=len(vehicle_ids), p=probs)
    return {vid: int(s) for vid, s in zip(sorted(vehicle_ids), draws)}


def build_vehicles(records: Sequence[TraceRecord], n_services: int, seed: int,
                   probs: Sequence[float] | None = None) -> list[Vehicle]:
    groups = _group(records)
    services = assign_services(list(groups), n_services, seed, probs)
    vehicles = []
    for vid in sorted(groups):
        recs = groups[vid]
        vehicles.append(Vehicle(vid, services[vid], [r.t for r in recs],
                                [(r.x, r.y) for r in recs]))
    return vehicles


# ---------------------------------------------------------------------------
# geometry and demand

def position_at(vehicle: Vehicle, t: float) -> tuple[float, float]:
    t0, t1 = vehicle.span
    if not t0 <= t <= t1:
        raise TraceError(f"vehicle {vehicle.id}: t={t} outside trajectory span [{t0}, {t1}]")
    return (float(np.interp(t, vehicle.times, vehicle.xy[:, 0])),
            float(np.interp(t, vehicle.times, vehicle.xy[:, 1])))


def edge_positions(edges: Sequence[EdgeNode]) -> np.ndarray:
    return np.array([e.position for e in edges], dtype=float)


def nearest_edge(position, edges: Sequence[EdgeNode]) -> int:
    if not edges:
        raise TraceError("no edges")
    return int(edges[int(nearest_edges(np.asarray(position, float)[None, :],
                                       edge_positions(edges))[0])].id)


def nearest_edges(points: np.ndarray, edge_xy: np.ndarray) -> np.ndarray:
    """Index of the closest edge for every point; ``argmin`` keeps the lowest index on ties."""
    dx = points[:, None, 0] - edge_xy[None, :, 0]
    dy = points[:, None, 1] - edge_xy[None, :, 1]
    return np.argmin(dx * dx + dy * dy, axis=1)


def slot_midpoint(slot: int, cfg: NetworkConfig) -> float:
    return (slot + 0.5) * cfg.slot_seconds


def demand_at_slot(vehicles: Sequence[Vehicle], edges: Sequence[EdgeNode], slot: int,
                   cfg: NetworkConfig, n_services: int = 8) -> DemandMatrix:
    t = slot_midpoint(slot, cfg)
    counts = np.zeros((len(edges), n_services), dtype=np.int64)
    for v in vehicles:
        if v.active_at(t):
            e = nearest_edge(position_at(v, t), edges)
            counts[e, v.requested_service] += 1
    return DemandMatrix(slot, counts)


def slot_positions(vehicles: Sequence[Vehicle], cfg: NetworkConfig,
                   n_slots: int | None = None) -> np.ndarray:
    """Positions at every slot midpoint, ``(slots, vehicles, 2)``; NaN while inactive."""
    n_slots = cfg.n_slots if n_slots is None else n_slots
    mids = (np.arange(n_slots) + 0.5) * cfg.slot_seconds
    out = np.full((n_slots, len(vehicles), 2), np.nan)
    for j, v in enumerate(vehicles):
        active = (mids >= v.times[0]) & (mids <= v.times[-1])
        if active.any():
            m = mids[active]
            out[active, j, 0] = np.interp(m, v.times, v.xy[:, 0])
            out[active, j, 1] = np.interp(m, v.times, v.xy[:, 1])
    return out


def demand_series(vehicles: Sequence[Vehicle], edges: Sequence[EdgeNode],
                  cfg: NetworkConfig, n_services: int = 8,
                  positions: np.ndarray | None = None) -> np.ndarray:
    """Demand for every slot at once, ``(slots, edges, services)``."""
    if positions is None:
        positions = slot_positions(vehicles, cfg)
    services = np.array([v.requested_service for v in vehicles], dtype=np.int64)
    exy = edge_positions(edges)
    out = np.zeros((positions.shape[0], len(edges), n_services), dtype=np.int64)
    for t in range(positions.shape[0]):
        active = ~np.isnan(positions[t, :, 0])
        if active.any():
            e = nearest_edges(positions[t, active], exy)
            np.add.at(out[t], (e, services[active]), 1)
    return out
