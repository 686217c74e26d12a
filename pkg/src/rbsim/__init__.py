"""Range-partitioned sharded ledger simulator: IBFT committees, commit-reveal
committee rotation, locked cross-shard transfers and epoch reconfiguration."""
from .config import ScenarioConfig, load_config
from .engine import Engine, RunResult, run_engine
from .metrics import MetricsReport, build_report, report_emit
from .models import evaluate_model
from .scenario import PRESETS, run_preset, run_scenario

__all__ = [
    "Engine", "MetricsReport", "PRESETS", "RunResult", "ScenarioConfig", "build_report",
    "evaluate_model", "load_config", "report_emit", "run_engine", "run_preset", "run_scenario",
]
