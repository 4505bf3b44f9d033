"""Demand-predictive online service lifecycle management for vehicular edge networks."""
from .catalog import (EdgeNode, NetworkConfig, Placement, ServiceSpec, dbm_to_watts,
                      load_catalog)
from .decision import Decision, decide, frame_decisions
from .delay import access_rate, mean_service_delay, migration_delay, service_delay
from .placement import (apply_plan, initial_placement, solve_migrate, solve_scale_in,
                        solve_scale_out)
from .sim import build_scenario, run_scenario, summarize

__version__ = "0.1.0"
