"""Discrete-event simulator of a single-hop CoAP IoT domain behind a caching proxy."""

__version__ = "0.1.0"

from .config import ConfigError, ScenarioConfig, parse_config
from .engine import Engine, EngineError, RngStream
from .metrics import Metrics, MetricsSnapshot
from .runner import build_simulation, render_csv, run_scenario, sweep

__all__ = [
    "ConfigError",
    "Engine",
    "EngineError",
    "Metrics",
    "MetricsSnapshot",
    "RngStream",
    "ScenarioConfig",
    "build_simulation",
    "parse_config",
    "render_csv",
    "run_scenario",
    "sweep",
]
