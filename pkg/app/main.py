import argparse
import math
import sys
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import TypedDict

from pydantic import BaseModel, Field, ValidationError
from scipy import stats
from tqdm import tqdm

from app.addrmap import DramGeometry
from app.files import FileUtils
from app.logger import base_logger, set_verbose
from app.migration import CIRCUIT_CONSTANTS, MIGRATION_VARIANTS, CostModel, IntegrityError, table_storage
from app.model_types import DEFAULT_BASELINE_NAME, ControllerKind, CostScenario, DecisionAction, TraceKind
from app.monitor import WindowConfig, monitor_storage_report, profile_addresses, write_rates_csv, write_signatures_csv
from app.predictor import PredictorConfig
from app.sim import (
    ControllerSpec,
    SchedulerConfig,
    SimConfig,
    Simulator,
    SimReport,
    TimingParams,
    compare,
    write_comparison_csv,
    write_report,
)
from app.trace import MemoryRequest, TraceSpec, addresses, generate, load_trace, synthetic_suite, write_trace

logger = base_logger.getChild(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INTEGRITY = 3

MIN_CORRELATE_WORKLOADS = 3
CORRELATION_CSV_HEADER = ("workload", "bit_change_improvement", "performance_improvement")
REFERENCE_GEOMETRY = DramGeometry(rows_per_bank=2**23)  # 512 GB
_COMPOSITE_KINDS = (TraceKind.PHASE_SWITCH, TraceKind.MIX)  # gen-trace builds these from a config trace_spec

DEFAULT_COMPARE_CONTROLLERS = (
    "fixed:baseline",
    "fixed:permutation",
    "fixed:minimalist",
    "dream-offline",
    "dream-online",
)


class RunConfig(BaseModel):
    geometry: DramGeometry = Field(default_factory=DramGeometry)
    timing: TimingParams = Field(default_factory=TimingParams)
    scheduler: SchedulerConfig = Field(default_factory=SchedulerConfig)
    window: WindowConfig = Field(default_factory=WindowConfig)
    predictor: PredictorConfig = Field(default_factory=PredictorConfig)
    cost: CostModel = Field(default_factory=CostModel)
    scheme: str = "baseline"  # PAMS of DReAM controllers: built-in kind or scheme file
    controller: str = ControllerKind.DREAM_ONLINE.value
    controllers: list[str] = Field(default_factory=lambda: list(DEFAULT_COMPARE_CONTROLLERS))
    baseline: str = DEFAULT_BASELINE_NAME
    traces: list[str] = Field(default_factory=list)
    trace_spec: TraceSpec | None = None
    suite_length: int = Field(default=20_000, ge=8)
    out: str = "out"
    seed: int = Field(default=0, ge=0)
    workers: int = Field(default=4, ge=1)

    def sim_config(self) -> SimConfig:
        return SimConfig(
            timing=self.timing,
            scheduler=self.scheduler,
            window=self.window,
            predictor=self.predictor,
            cost=self.cost,
        )


class CorrelationResult(TypedDict):
    workloads: int
    pearson_r: float | None
    p_value: float | None


# Config


def load_run_config(args: argparse.Namespace) -> RunConfig:
    data: dict = {}
    if args.config:
        data = FileUtils.read_config_file(args.config)
    config = RunConfig.model_validate(data)

    updates: dict[str, object] = {}
    for flag in ("scheme", "controller", "out", "seed"):
        value = getattr(args, flag, None)
        if value is not None:
            updates[flag] = value
    if args.trace:
        updates["traces"] = args.trace
    if args.window is not None:
        updates["window"] = {**config.window.model_dump(), "window_len": args.window}
    predictor = {}
    if args.threshold is not None:
        predictor["improvement_threshold"] = args.threshold
    if args.consistency is not None:
        predictor["consistency_windows"] = args.consistency
    if predictor:
        updates["predictor"] = {**config.predictor.model_dump(), **predictor}
    if args.cost_model is not None:
        updates["cost"] = {**config.cost.model_dump(), "scenario": args.cost_model}
    if not updates:
        return config
    return RunConfig.model_validate({**config.model_dump(), **updates})


def load_workloads(config: RunConfig) -> dict[str, list[MemoryRequest]]:
    """Trace files named by their stem, or the configured generated trace."""
    if config.traces:
        return {Path(path).name.split(".")[0]: load_trace(path, geom=config.geometry) for path in config.traces}
    if config.trace_spec is not None:
        return {config.trace_spec.kind.value: generate(config.trace_spec, config.geometry)}
    msg = "No trace given: pass --trace or set trace_spec in the config"
    raise ValueError(msg)


def _simulate_one(config: RunConfig, controller: str, trace: list[MemoryRequest], workload: str) -> SimReport:
    spec = ControllerSpec.parse(controller, config.geometry, default_scheme=config.scheme)
    simulator = Simulator(geom=config.geometry, controller=spec, config=config.sim_config())
    return simulator.run(trace, workload=workload)


# Commands


def cmd_profile(config: RunConfig) -> None:
    out = Path(config.out)
    for name, trace in load_workloads(config).items():
        signatures = profile_addresses(
            addresses(trace),
            address_bits=config.geometry.address_bits,
            config=config.window,
        )
        target = out / name if len(config.traces) > 1 else out
        write_signatures_csv(target / "signatures.csv", signatures)
        write_rates_csv(target / "rates.csv", signatures)
        logger.info("Profiled %s: %d windows written to %s", name, len(signatures), target)


def cmd_simulate(config: RunConfig) -> None:
    spec = ControllerSpec.parse(config.controller, config.geometry, default_scheme=config.scheme)
    out = Path(config.out)
    for name, trace in load_workloads(config).items():
        simulator = Simulator(geom=config.geometry, controller=spec, config=config.sim_config())
        report = simulator.run(trace, workload=name, progress=True)
        target = out / name if len(config.traces) > 1 else out
        write_report(report, target, relocation_log=simulator.relocation_log, geom=config.geometry)
        logger.info(
            "%s on %s: %d hits, %d empties, %d conflicts, %d CPU cycles",
            report.controller,
            name,
            report.page_hits,
            report.page_empties,
            report.page_conflicts,
            report.total_cpu_cycles,
        )


def cmd_compare(config: RunConfig) -> None:
    workloads = load_workloads(config)
    controllers = list(dict.fromkeys([config.baseline, *config.controllers]))
    jobs = [(name, controller) for name in workloads for controller in controllers]

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        futures = [
            pool.submit(_simulate_one, config, controller, workloads[name], name) for name, controller in jobs
        ]
        reports = [future.result() for future in tqdm(futures, desc="compare", unit="run")]

    by_workload: dict[str, dict[str, SimReport]] = {}
    for (name, controller), report in zip(jobs, reports, strict=True):
        by_workload.setdefault(name, {})[controller] = report
    out = Path(config.out)
    for name, runs in by_workload.items():
        rows = compare(runs, config.baseline)
        write_comparison_csv(out / f"compare-{name}.csv", rows)
        for row in rows:
            logger.info("%s %-24s %.4f", name, row.run, row.normalized_exec_time)


def correlation_points(config: RunConfig) -> dict[str, tuple[float, float]]:
    """Per workload: (bit-change improvement, performance improvement) of DReAM-offline over the baseline."""
    if config.traces:
        workloads = load_workloads(config)
    else:
        suite = synthetic_suite(config.geometry, length=config.suite_length, seed=config.seed)
        workloads = {name: generate(spec, config.geometry) for name, spec in suite.items()}
    if len(workloads) < MIN_CORRELATE_WORKLOADS:
        msg = f"correlate needs at least {MIN_CORRELATE_WORKLOADS} workloads, got {len(workloads)}"
        raise ValueError(msg)

    offline = f"{ControllerKind.DREAM_OFFLINE.value}:{config.scheme}"
    # the offline controller's own gate would hide sub-threshold improvements
    exploring = config.model_copy(
        update={"predictor": config.predictor.model_copy(update={"improvement_threshold": 1e-9})},
    )

    def measure(name: str) -> tuple[float, float]:
        trace = workloads[name]
        baseline = _simulate_one(config, config.baseline, trace, name)
        remapped = _simulate_one(exploring, offline, trace, name)
        decision = remapped.decisions[0]
        gain = decision.improvement if decision.action is DecisionAction.ADOPT else 0.0
        return gain, 1.0 - remapped.total_cpu_cycles / baseline.total_cpu_cycles

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        futures = {name: pool.submit(measure, name) for name in workloads}
        return {name: future.result() for name, future in tqdm(futures.items(), desc="correlate", unit="workload")}


def pearson(points: Sequence[tuple[float, float]]) -> tuple[float, float]:
    xs, ys = zip(*points, strict=True)
    result = stats.pearsonr(xs, ys)
    return float(result.statistic), float(result.pvalue)


def cmd_correlate(config: RunConfig) -> None:
    points = correlation_points(config)
    out = Path(config.out)
    FileUtils.write_csv(
        out / "correlation.csv",
        CORRELATION_CSV_HEADER,
        ((name, f"{x:.6f}", f"{y:.6f}") for name, (x, y) in points.items()),
    )
    r, p = pearson(list(points.values()))
    result = CorrelationResult(
        workloads=len(points),
        pearson_r=None if math.isnan(r) else r,
        p_value=None if math.isnan(p) else p,
    )
    FileUtils.write_data_to_file(out / "correlation.json", result)
    logger.info("Pearson r = %.4f (p = %.3g) over %d workloads", r, p, len(points))


def cmd_gen_trace(config: RunConfig, args: argparse.Namespace) -> None:
    spec = config.trace_spec
    if args.kind is not None or spec is None:
        fields = {
            "kind": args.kind or TraceKind.SEQUENTIAL,
            "length": args.length,
            "start": args.start,
            "stride": args.stride,
            "hot_bit": args.hot_bit,
            "seed": config.seed,
            "gap": args.gap,
            "write_ratio": args.write_ratio,
        }
        spec = TraceSpec.model_validate({key: value for key, value in fields.items() if value is not None})
    requests = generate(spec, config.geometry)
    name = args.name or f"{spec.kind.value}.trace{'.gz' if args.compress else ''}"
    path = write_trace(Path(config.out) / name, requests, compress=args.compress)
    logger.info("Wrote %d requests to %s", len(requests), path)


def cmd_overhead(config: RunConfig) -> None:
    counter_bits = config.window.counter_bits
    report = {
        label: {
            "geometry": geom.model_dump(),
            "capacity_bytes": geom.capacity,
            "tables": table_storage(geom),
            "monitor": monitor_storage_report(geom, counter_bits),
        }
        for label, geom in (("configured", config.geometry), ("reference_512GB", REFERENCE_GEOMETRY))
    }
    report["migration_variants"] = MIGRATION_VARIANTS
    report["circuit_constants"] = CIRCUIT_CONSTANTS
    path = FileUtils.write_data_to_file(Path(config.out) / "overhead.json", report)
    tables = report["configured"]["tables"]
    logger.info("MT/ST: %d bytes, fraction %.3g (%s)", tables["bytes"], tables["fraction"], path)


# Entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run config")
    common.add_argument("--trace", action="append", help="trace file (repeatable)")
    common.add_argument("--scheme", help="PAMS for DReAM controllers: built-in kind or scheme file")
    common.add_argument("--controller", help="fixed:<scheme> | dream-online | dream-offline")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--window", type=int, help="requests per monitoring window")
    common.add_argument("--threshold", type=float, help="improvement threshold, e.g. 0.07")
    common.add_argument("--consistency", type=int, help="consecutive windows before adopting")
    common.add_argument("--cost-model", choices=[scenario.value for scenario in CostScenario])
    common.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="python -m app.main", description="DReAM memory controller simulator")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("profile", parents=[common], help="bit-change signatures of a trace")
    commands.add_parser("simulate", parents=[common], help="simulate one controller")
    commands.add_parser("compare", parents=[common], help="normalized execution times of several controllers")
    commands.add_parser("correlate", parents=[common], help="bit-change vs performance improvement study")
    commands.add_parser("overhead", parents=[common], help="storage overhead of tables and monitor")

    gen = commands.add_parser("gen-trace", parents=[common], help="write a synthetic trace")
    gen.add_argument("--kind", choices=[kind.value for kind in TraceKind if kind not in _COMPOSITE_KINDS])
    gen.add_argument("--length", type=int)
    gen.add_argument("--start", type=lambda text: int(text, 0))
    gen.add_argument("--stride", type=lambda text: int(text, 0))
    gen.add_argument("--hot-bit", type=int)
    gen.add_argument("--gap", type=int)
    gen.add_argument("--write-ratio", type=float)
    gen.add_argument("--name", help="output file name inside --out")
    gen.add_argument("--compress", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    set_verbose(verbose=args.verbose)
    try:
        config = load_run_config(args)
        match args.command:
            case "profile":
                cmd_profile(config)
            case "simulate":
                cmd_simulate(config)
            case "compare":
                cmd_compare(config)
            case "correlate":
                cmd_correlate(config)
            case "gen-trace":
                cmd_gen_trace(config, args)
            case "overhead":
                cmd_overhead(config)
    except IntegrityError:
        logger.exception("Migration invariant breached")
        return EXIT_INTEGRITY
    except (ValueError, TypeError, ValidationError, OSError) as e:
        logger.error("%s", e)  # noqa: TRY400
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
