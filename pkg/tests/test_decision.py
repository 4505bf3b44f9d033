import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dosm.catalog import NetworkConfig, Placement
from dosm.decision import Decision, decide, frame_decisions
from dosm.predictor import FramePrediction

CFG = NetworkConfig()


@pytest.mark.parametrize("q, util, n, kind", [
    (0.4, 95, 1, Decision.SCALE_OUT),
    (0.7, 20, 2, Decision.SCALE_IN),
    (0.7, 50, 1, Decision.NO_CHANGE),
    (0.4, 90, 1, Decision.MIGRATE),       # util = 90 is not high
    (0.7, 30, 2, Decision.NO_CHANGE),     # util = 30 is not low
    (0.5, 20, 2, Decision.SCALE_IN),      # q = 0.5 counts as good
])
def test_examples_and_boundaries(q, util, n, kind):
    assert decide(q, util, n, CFG) is kind


@pytest.mark.parametrize("q, util, n", [(-0.1, 10, 1), (1.1, 10, 1), (0.5, -1, 1), (0.5, 10, 0)])
def test_domain_errors(q, util, n):
    with pytest.raises(ValueError):
        decide(q, util, n, CFG)


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1), st.floats(0, 500), st.integers(1, 10))
def test_partition(q, util, n):
    kind = decide(q, util, n, CFG)
    if q < 0.5:
        assert kind is (Decision.SCALE_OUT if util > 90 else Decision.MIGRATE)
    elif util < 30 and n > 1:
        assert kind is Decision.SCALE_IN
    else:
        assert kind is Decision.NO_CHANGE


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 500))
def test_never_scale_in_single_instance(q, util):
    assert decide(q, util, 1, CFG) is not Decision.SCALE_IN


def _pred(total, edges=9, horizon=15):
    vals = np.zeros((horizon, edges))
    vals[:, 0] = total
    return FramePrediction(0, vals, np.zeros(edges), np.ones(edges))


def test_frame_decisions(catalog):
    services, edges, cfg = catalog
    placement = Placement(np.zeros((9, 8), dtype=int))
    placement.counts[0, :] = 1
    placement.counts[1, 0] = 1
    preds = [_pred(15.0)] * 8
    preds[0] = _pred(6.0)                # 10% of two instances
    preds[3] = _pred(20.0)
    q = [0.9] * 8
    q[3] = 0.2
    out = frame_decisions(preds, q, placement, cfg, services)
    assert [d.service for d in out] == list(range(8))
    assert out[0].kind is Decision.SCALE_IN and out[0].utilization_pct == pytest.approx(10)
    assert out[3].kind is Decision.MIGRATE
    assert all(d.kind is Decision.NO_CHANGE for i, d in enumerate(out) if i not in (0, 3))
    rec = json.loads(out[3].to_json())
    assert rec["kind"] == "MIGRATE" and "poor" in rec["rationale"]


def test_frame_decisions_length_mismatch(catalog):
    services, _, cfg = catalog
    with pytest.raises(ValueError):
        frame_decisions([_pred(1.0)], [0.5] * 8, Placement.empty(9, 8), cfg, services)
