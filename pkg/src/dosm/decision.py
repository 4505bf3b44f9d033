"""Lifecycle decisions from service quality and predicted utilisation.

    quality < q_threshold,  util >  util_high       SCALE_OUT
    quality < q_threshold,  util <= util_high       MIGRATE
    quality >= q_threshold, util <  util_low, I > 1 SCALE_IN
    anything else                                   NO_CHANGE
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Sequence

from .catalog import NetworkConfig, Placement, ServiceSpec
from .predictor import FramePrediction, utilization


class Decision(str, enum.Enum):
    MIGRATE = "MIGRATE"
    SCALE_IN = "SCALE_IN"
    SCALE_OUT = "SCALE_OUT"
    NO_CHANGE = "NO_CHANGE"


def decide(q: float, util: float, instance_count: int, cfg: NetworkConfig) -> Decision:
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quality {q} outside [0, 1]")
    if util < 0 or instance_count < 1:
        raise ValueError("utilisation must be >= 0 and instance_count >= 1")
    if q < cfg.q_threshold:
        return Decision.SCALE_OUT if util > cfg.util_high_pct else Decision.MIGRATE
    if util < cfg.util_low_pct and instance_count > 1:
        return Decision.SCALE_IN
    return Decision.NO_CHANGE


@dataclass(frozen=True)
class LifecycleDecision:
    service: int
    kind: Decision
    q_value: float
    utilization_pct: float
    instance_count: int
    predicted_demand: float
    rationale: str

    def to_json(self) -> str:
        rec = {"service": self.service, "kind": self.kind.value, "q_value": self.q_value,
               "utilization_pct": self.utilization_pct, "instance_count": self.instance_count,
               "predicted_demand": self.predicted_demand, "rationale": self.rationale}
        return json.dumps(rec, sort_keys=True)


def _rationale(kind: Decision, q, util, cfg) -> str:
    quality = "poor" if q < cfg.q_threshold else "good"
    return f"{quality} quality (q={q:.3f}), utilisation {util:.1f}% -> {kind.value}"


def frame_decisions(predictions: Sequence[FramePrediction], q_values: Sequence[float],
                    placement: Placement, cfg: NetworkConfig,
                    services: Sequence[ServiceSpec]) -> list[LifecycleDecision]:
    """One decision per service, in service-id order.

    Utilisation uses the frame mean of the predicted demand summed over edges.
    """
    if len(predictions) != len(services) or len(q_values) != len(services):
        raise ValueError("need one prediction and one quality value per service")
    counts = placement.instance_count
    out = []
    for svc, pred, q in zip(services, predictions, q_values):
        demand = pred.frame_mean_total()
        n = int(counts[svc.id])
        util = utilization(demand, n, svc.capacity)
        kind = decide(float(q), util, n, cfg)
        out.append(LifecycleDecision(svc.id, kind, float(q), util, n, demand,
                                     _rationale(kind, q, util, cfg)))
    return out
