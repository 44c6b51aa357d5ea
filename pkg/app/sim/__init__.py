from app.sim.controller import BankState, SchedulerConfig, TimingParams, classify, schedule_next
from app.sim.main import (
    ComparisonRow,
    ControllerSpec,
    SimConfig,
    Simulator,
    SimReport,
    compare,
    read_report,
    run,
    write_comparison_csv,
    write_report,
)

__all__ = [
    "BankState",
    "ComparisonRow",
    "ControllerSpec",
    "SchedulerConfig",
    "SimConfig",
    "SimReport",
    "Simulator",
    "TimingParams",
    "classify",
    "compare",
    "read_report",
    "run",
    "schedule_next",
    "write_comparison_csv",
    "write_report",
]
