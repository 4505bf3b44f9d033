"""Static domain entities: services, edge nodes, network constants, placement.

Configuration lives in two flat INI files (one for network constants, one
for the service catalog).  Both are read and written with :mod:`configparser`
and every float is written with ``repr`` so a save/load cycle is exact.
"""
from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

MB = 1_000_000
GB = 1_000_000_000


class CatalogError(ValueError):
    """A configuration source is missing a key or holds an invalid value."""


def dbm_to_watts(p_dbm: float) -> float:
    return 10.0 ** ((p_dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class ServiceSpec:
    id: int
    name: str
    delay_threshold_s: float
    input_bits: float
    compute_intensity: float          # cycles/bit
    instance_layer_bytes: float
    capacity: int                     # vehicles per instance
    layer_range_bytes: tuple[float, float]

    def __post_init__(self):
        _positive(self.delay_threshold_s, "delay_threshold_s")
        _positive(self.input_bits, "input_bits")
        _positive(self.compute_intensity, "compute_intensity")
        if self.capacity < 1:
            raise CatalogError(f"capacity must be >= 1 (service {self.name!r})")
        lo, hi = self.layer_range_bytes
        if not lo <= self.instance_layer_bytes <= hi:
            raise CatalogError(
                f"instance_layer_bytes={self.instance_layer_bytes} outside "
                f"[{lo}, {hi}] for service {self.name!r}")


@dataclass(frozen=True)
class EdgeNode:
    id: int
    position: tuple[float, float]
    cpu_hz: float
    storage_capacity_bytes: float
    storage_used_bytes: float = 0.0   # background occupancy, instances excluded

    def __post_init__(self):
        _positive(self.cpu_hz, "cpu_hz")
        if not 0 <= self.storage_used_bytes <= self.storage_capacity_bytes:
            raise CatalogError(f"storage_used_bytes out of range on edge {self.id}")


@dataclass(frozen=True)
class NetworkConfig:
    bandwidth_hz: float = 1e6
    tx_power_w: float = dbm_to_watts(40.0)
    noise_power_w: float = dbm_to_watts(-100.0)
    backhaul_bps: float = 1e9
    user_context_bytes: float = 1 * MB
    propagation_speed_mps: float = 3e8
    slot_seconds: float = 5.0
    horizon_seconds: float = 750.0
    num_edges: int = 9
    region_side_m: float = 15_000.0
    q_threshold: float = 0.5
    util_high_pct: float = 90.0
    util_low_pct: float = 30.0
    frame_slots: int = 15
    # assumed defaults, no published value
    edge_cpu_hz: float = 10e9
    edge_storage_bytes: float = 2 * GB
    background_storage_bytes: float = 0.0
    distance_floor_m: float = 1.0
    warmup_slots: int = 30

    def __post_init__(self):
        for name in ("bandwidth_hz", "tx_power_w", "noise_power_w", "backhaul_bps",
                     "propagation_speed_mps", "slot_seconds", "horizon_seconds",
                     "region_side_m", "edge_cpu_hz", "edge_storage_bytes",
                     "distance_floor_m"):
            _positive(getattr(self, name), name)
        if self.user_context_bytes < 0:
            raise CatalogError("user_context_bytes must be >= 0")
        if self.num_edges < 1:
            raise CatalogError("num_edges must be >= 1")
        if self.frame_slots < 1:
            raise CatalogError("frame_slots must be >= 1")
        ratio = self.horizon_seconds / self.slot_seconds
        if abs(ratio - round(ratio)) > 1e-9:
            raise CatalogError("horizon_seconds must be an integer multiple of slot_seconds")
        if not 0 < self.q_threshold < 1:
            raise CatalogError("q_threshold must lie in (0, 1)")
        if not self.util_low_pct < self.util_high_pct:
            raise CatalogError("util_low_pct must be below util_high_pct")

    @property
    def n_slots(self) -> int:
        return int(round(self.horizon_seconds / self.slot_seconds))


def _positive(value, name):
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        raise CatalogError(f"{name} must be a positive finite number, got {value!r}")


# name, threshold s, input bits, kilo-cycles/bit, layer range in MB
SERVICE_TABLE = (
    ("Emergency Stop", 0.1, 3200, 36, (50, 150)),
    ("Collision Risk", 0.1, 4800, 40, (50, 150)),
    ("Accident Report", 0.5, 4800, 28, (50, 150)),
    ("Parking", 0.1, 1200, 80, (150, 300)),
    ("Traffic Control", 1.0, 1200, 45, (150, 300)),
    ("Platoon", 0.5, 4800, 88, (150, 300)),
    ("Face Detection", 0.5, 3200, 50, (150, 300)),
    ("Intersection Safety", 0.05, 1800, 42, (50, 150)),
)
INSTANCE_CAPACITY = 30


def grid_positions(n: int, side: float) -> list[tuple[float, float]]:
    """Cell centres of the smallest square grid holding ``n`` nodes, row-major."""
    k = math.ceil(math.sqrt(n))
    cell = side / k
    return [((i % k + 0.5) * cell, (i // k + 0.5) * cell) for i in range(n)]


def build_edges(cfg: NetworkConfig) -> list[EdgeNode]:
    return [EdgeNode(i, pos, cfg.edge_cpu_hz, cfg.edge_storage_bytes,
                     cfg.background_storage_bytes)
            for i, pos in enumerate(grid_positions(cfg.num_edges, cfg.region_side_m))]


# ---------------------------------------------------------------------------
# file io

_NET_FIELDS = {f.name: f.type for f in fields(NetworkConfig)}
_INT_FIELDS = {"num_edges", "frame_slots", "warmup_slots"}


def _read_ini(source) -> configparser.ConfigParser:
    """``source`` is a path, or INI text (recognised by containing a newline)."""
    parser = configparser.ConfigParser()
    try:
        if isinstance(source, str) and "\n" in source:
            parser.read_string(source)
        else:
            with open(source, encoding="utf-8") as fh:
                parser.read_file(fh)
    except OSError as exc:
        raise CatalogError(f"cannot read configuration {source}: {exc}") from exc
    except configparser.Error as exc:
        raise CatalogError(f"cannot parse configuration: {exc}") from exc
    return parser


def _number(section, key, cast=float):
    raw = section.get(key)
    try:
        value = cast(raw)
    except (TypeError, ValueError):
        raise CatalogError(f"malformed number for {key!r}: {raw!r}") from None
    return value


def parse_network(source) -> NetworkConfig:
    parser = _read_ini(source)
    if not parser.has_section("network"):
        raise CatalogError("missing [network] section")
    sec = parser["network"]
    kwargs = {}
    for key in sec:
        if key == "tx_power_dbm":
            kwargs["tx_power_w"] = dbm_to_watts(_number(sec, key))
        elif key == "noise_power_dbm":
            kwargs["noise_power_w"] = dbm_to_watts(_number(sec, key))
        elif key in _NET_FIELDS:
            kwargs[key] = _number(sec, key, int if key in _INT_FIELDS else float)
        else:
            raise CatalogError(f"unknown network key {key!r}")
    missing = [k for k in _REQUIRED_NET if k not in kwargs]
    if missing:
        raise CatalogError(f"[network] missing key {missing[0]!r}")
    return NetworkConfig(**kwargs)


_REQUIRED_NET = ("bandwidth_hz", "tx_power_w", "noise_power_w", "backhaul_bps",
                 "user_context_bytes", "propagation_speed_mps", "slot_seconds",
                 "horizon_seconds", "num_edges", "region_side_m", "q_threshold",
                 "util_high_pct", "util_low_pct", "frame_slots")


def dump_network(cfg: NetworkConfig) -> str:
    parser = configparser.ConfigParser()
    parser["network"] = {f.name: repr(getattr(cfg, f.name)) for f in fields(cfg)}
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


_SERVICE_KEYS = ("id", "name", "delay_threshold_s", "input_bits", "compute_intensity",
                 "capacity", "layer_min_bytes", "layer_max_bytes")


def parse_services(source, seed: int = 0) -> list[ServiceSpec]:
    """Read the catalog; ``instance_layer_bytes`` is sampled from the layer range when absent."""
    parser = _read_ini(source)
    rng = np.random.default_rng(seed)
    services = []
    for name in parser.sections():
        if not name.startswith("service"):
            continue
        sec = parser[name]
        for key in _SERVICE_KEYS:
            if key not in sec:
                raise CatalogError(f"[{name}] missing key {key!r}")
        lo = _number(sec, "layer_min_bytes")
        hi = _number(sec, "layer_max_bytes")
        if "instance_layer_bytes" in sec:
            layer = _number(sec, "instance_layer_bytes")
        else:
            layer = float(rng.uniform(lo, hi))
        services.append(ServiceSpec(
            id=_number(sec, "id", int), name=sec["name"],
            delay_threshold_s=_number(sec, "delay_threshold_s"),
            input_bits=_number(sec, "input_bits"),
            compute_intensity=_number(sec, "compute_intensity"),
            instance_layer_bytes=layer, capacity=_number(sec, "capacity", int),
            layer_range_bytes=(lo, hi)))
    if not services:
        raise CatalogError("catalog defines no [service.*] sections")
    services.sort(key=lambda s: s.id)
    if [s.id for s in services] != list(range(len(services))):
        raise CatalogError("service ids must be 0..n-1")
    return services


def dump_services(services: list[ServiceSpec]) -> str:
    parser = configparser.ConfigParser()
    for svc in services:
        parser[f"service.{svc.id}"] = {
            "id": str(svc.id), "name": svc.name,
            "delay_threshold_s": repr(svc.delay_threshold_s),
            "input_bits": repr(svc.input_bits),
            "compute_intensity": repr(svc.compute_intensity),
            "capacity": str(svc.capacity),
            "layer_min_bytes": repr(svc.layer_range_bytes[0]),
            "layer_max_bytes": repr(svc.layer_range_bytes[1]),
            "instance_layer_bytes": repr(svc.instance_layer_bytes),
        }
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def default_network_text() -> str:
    return resources.files("dosm").joinpath("data/network.ini").read_text(encoding="utf-8")


def default_catalog_text() -> str:
    return resources.files("dosm").joinpath("data/catalog.ini").read_text(encoding="utf-8")


def load_catalog(network_source=None, catalog_source=None, seed: int = 0):
    """Return ``(services, edges, cfg)``; ``None`` selects the bundled defaults."""
    cfg = parse_network(default_network_text() if network_source is None else network_source)
    services = parse_services(
        default_catalog_text() if catalog_source is None else catalog_source, seed=seed)
    return services, build_edges(cfg), cfg


# ---------------------------------------------------------------------------
# placement

class PlanConflictError(RuntimeError):
    """A plan was solved against a placement that has since changed."""


@dataclass
class Placement:
    """Instance counts per (edge, service); the only mutable entity in the model."""
    counts: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or (self.counts < 0).any():
            raise ValueError("placement counts must be a non-negative edge x service matrix")

    @classmethod
    def empty(cls, n_edges: int, n_services: int) -> "Placement":
        return cls(np.zeros((n_edges, n_services), dtype=np.int64))

    @property
    def instance_count(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def instances(self, service: int) -> list[int]:
        """Edge id of every instance of ``service``, repeated per instance, ascending."""
        col = self.counts[:, service]
        return [e for e in range(len(col)) for _ in range(int(col[e]))]

    def hosting_edges(self, service: int) -> list[int]:
        return [int(e) for e in np.flatnonzero(self.counts[:, service])]

    def storage_used(self, services: list[ServiceSpec], edges: list[EdgeNode]) -> np.ndarray:
        layer = np.array([s.instance_layer_bytes for s in services])
        background = np.array([e.storage_used_bytes for e in edges])
        return background + self.counts @ layer

    def copy(self) -> "Placement":
        return Placement(self.counts.copy())


def check_placement(placement: Placement, services, edges) -> None:
    used = placement.storage_used(services, edges)
    cap = np.array([e.storage_capacity_bytes for e in edges])
    over = np.flatnonzero(used > cap)
    if over.size:
        raise CatalogError(f"storage exceeded on edges {over.tolist()}")


def with_layer_sizes(services: list[ServiceSpec], sizes) -> list[ServiceSpec]:
    return [replace(s, instance_layer_bytes=float(b)) for s, b in zip(services, sizes)]
