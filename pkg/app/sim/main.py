"""Trace-driven controller simulation with fixed, online and offline mappings."""

import heapq
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from app.addrmap import DramGeometry, MappingScheme, locations_of, resolve_scheme
from app.files import FileUtils
from app.logger import base_logger
from app.migration import (
    CostModel,
    MigrationState,
    RelocationEvent,
    RelocationLog,
    mapping_change_cost,
    relocation_cost,
)
from app.model_types import (
    DEFAULT_BASELINE_NAME,
    AccessClass,
    ControllerKind,
    CostScenario,
    DecisionAction,
    RequestOp,
)
from app.monitor import BitChangeMonitor, BitChangeSignature, WindowConfig, profile_addresses, write_signatures_csv
from app.predictor import Decision, MappingPredictor, PredictorConfig, estimate_checked, improvement, write_decisions_csv
from app.sim.controller import (
    BankState,
    PendingRequest,
    SchedulerConfig,
    TimingParams,
    WriteDrain,
    classify,
    schedule_next,
)
from app.trace import MemoryRequest, addresses
from app.utils import ceil_div, gmean

logger = base_logger.getChild(__name__)

COMPARISON_CSV_HEADER = ("run", "total_cpu_cycles", "normalized_exec_time")
GMEAN_ROW = "GMEAN"
_PROGRESS_STEP = 4096


class ControllerSpec(BaseModel):
    """Controller kind and its scheme: the fixed mapping, or the PAMS a DReAM controller starts from."""

    model_config = ConfigDict(frozen=True)

    kind: ControllerKind
    scheme: MappingScheme

    @property
    def label(self) -> str:
        return f"{self.kind.value}:{self.scheme.scheme_id}"

    @classmethod
    def parse(cls, text: str, geom: DramGeometry, *, default_scheme: str = "baseline") -> "ControllerSpec":
        """`fixed:<scheme>`, `dream-online[:<scheme>]` or `dream-offline[:<scheme>]`."""
        kind_text, _, scheme_text = text.partition(":")
        try:
            kind = ControllerKind(kind_text)
        except ValueError:
            msg = f"Unknown controller {kind_text!r}, expected one of {', '.join(ControllerKind)}"
            raise ValueError(msg) from None
        if kind is ControllerKind.FIXED and not scheme_text:
            msg = "A fixed controller needs a scheme, e.g. fixed:baseline"
            raise ValueError(msg)
        return cls(kind=kind, scheme=resolve_scheme(scheme_text or default_scheme, geom))


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    timing: TimingParams = Field(default_factory=TimingParams)
    scheduler: SchedulerConfig = Field(default_factory=SchedulerConfig)
    window: WindowConfig = Field(default_factory=WindowConfig)
    predictor: PredictorConfig = Field(default_factory=PredictorConfig)
    cost: CostModel = Field(default_factory=CostModel)


class RelocationCounts(BaseModel):
    inter: int = 0
    intra: int = 0
    swaps: int = 0
    rollbacks: int = 0
    self_mapped: int = 0
    mem_cycles: int = 0


class SimReport(BaseModel):
    workload: str = ""
    controller: str
    requests: int
    reads: int
    writes: int
    page_hits: int
    page_empties: int
    page_conflicts: int
    memory_cycles: int
    relocation_cpu_cycles: float
    mapping_change_cpu_cycles: float
    total_cpu_cycles: int
    relocations: RelocationCounts
    relocation_breakdown: dict[str, float]
    mapping_changes: int
    mapping_change_seconds: float
    reboot_penalty_s: float
    final_scheme_id: str
    migrated_rows: int
    signatures: list[BitChangeSignature]
    decisions: list[Decision]
    normalized_exec_time: float | None = None

    @property
    def row_buffer_hit_rate(self) -> float:
        return self.page_hits / self.requests if self.requests else 0.0


@dataclass(slots=True)
class _Thread:
    indices: list[int]
    nominal: list[int]  # CPU-cycle issue times as recorded in the trace
    pos: int = 0
    ready: int = 0
    inflight: int = 0
    blocked: bool = False  # reorder window or write queue is full

    @property
    def done(self) -> bool:
        return self.pos >= len(self.indices)


@dataclass
class _Tally:
    hits: int = 0
    empties: int = 0
    conflicts: int = 0
    reads: int = 0
    writes: int = 0
    stall_cpu_cycles: float = 0.0
    mapping_cpu_cycles: float = 0.0
    mapping_seconds: float = 0.0
    reboot_seconds: float = 0.0
    mapping_changes: int = 0
    signatures: list[BitChangeSignature] = field(default_factory=list)
    decisions: list[Decision] = field(default_factory=list)

    def count(self, access: AccessClass) -> None:
        match access:
            case AccessClass.HIT:
                self.hits += 1
            case AccessClass.EMPTY:
                self.empties += 1
            case AccessClass.CONFLICT:
                self.conflicts += 1


class Simulator:
    def __init__(self, *, geom: DramGeometry, controller: ControllerSpec, config: SimConfig | None = None) -> None:
        self.logger = base_logger.getChild(self.__class__.__name__)
        self.geom = geom
        self.controller = controller
        self.config = config or SimConfig()
        self.relocation_log = RelocationLog()
        if controller.kind is ControllerKind.DREAM_ONLINE and not self.config.predictor.freeze_column_bits:
            msg = "Online remapping moves whole rows, so column bits must stay frozen"
            raise ValueError(msg)

    # Public methods

    def run(self, trace: Sequence[MemoryRequest], *, workload: str = "", progress: bool = False) -> SimReport:
        if not trace:
            msg = "Cannot simulate an empty trace"
            raise ValueError(msg)
        self.relocation_log = RelocationLog()
        tally = _Tally()
        addrs = addresses(trace)
        scheme = self.controller.scheme
        state = monitor = predictor = None

        match self.controller.kind:
            case ControllerKind.FIXED:
                tally.signatures = self._profile(addrs)
            case ControllerKind.DREAM_OFFLINE:
                scheme = self._offline_scheme(addrs, tally)
            case ControllerKind.DREAM_ONLINE:
                state = MigrationState(geom=self.geom, pams=scheme)
                monitor = BitChangeMonitor(address_bits=self.geom.address_bits, config=self.config.window)
                predictor = MappingPredictor(base=scheme, config=self.config.predictor)

        homes = locations_of(addrs, scheme, self.geom)
        self.logger.info("Simulating %d requests with %s", len(trace), self.controller.label)
        memory_cycles = self._simulate(
            trace,
            homes,
            tally,
            state=state,
            monitor=monitor,
            predictor=predictor,
            progress=progress,
        )
        if monitor is not None and monitor.requests_observed:
            tally.signatures.append(monitor.finalize_window())

        stats = state.stats if state is not None else None
        total = memory_cycles * self.geom.cpu_to_mem_clock_ratio + round(
            tally.stall_cpu_cycles + tally.mapping_cpu_cycles
        )
        final_scheme = (state.eams or state.pams) if state is not None else scheme
        return SimReport(
            workload=workload,
            controller=self.controller.label,
            requests=len(trace),
            reads=tally.reads,
            writes=tally.writes,
            page_hits=tally.hits,
            page_empties=tally.empties,
            page_conflicts=tally.conflicts,
            memory_cycles=memory_cycles,
            relocation_cpu_cycles=tally.stall_cpu_cycles,
            mapping_change_cpu_cycles=tally.mapping_cpu_cycles,
            total_cpu_cycles=total,
            relocations=RelocationCounts(**asdict(stats)) if stats is not None else RelocationCounts(),
            relocation_breakdown=stats.breakdown() if stats is not None else {},
            mapping_changes=tally.mapping_changes,
            mapping_change_seconds=tally.mapping_seconds,
            reboot_penalty_s=tally.reboot_seconds,
            final_scheme_id=final_scheme.scheme_id,
            migrated_rows=state.migrated_rows if state is not None else 0,
            signatures=tally.signatures,
            decisions=tally.decisions,
        )

    # Controller set-up

    def _profile(self, addrs: np.ndarray) -> list[BitChangeSignature]:
        return profile_addresses(addrs, address_bits=self.geom.address_bits, config=self.config.window)

    def _offline_scheme(self, addrs: np.ndarray, tally: _Tally) -> MappingScheme:
        """Profile the whole trace as one region of interest and pick the mapping to reboot into."""
        pams = self.controller.scheme
        tally.signatures = self._profile(addrs)
        counters = np.sum([sig.counters for sig in tally.signatures], axis=0, dtype=np.int64)
        region = BitChangeSignature(
            counters=tuple(int(c) for c in counters),
            requests_observed=sum(sig.requests_observed for sig in tally.signatures),
            window_id=0,
        )
        eams = estimate_checked(region, pams, self.config.predictor, self.geom)
        gain = improvement(region, pams, eams)
        adopt = gain > self.config.predictor.improvement_threshold
        chosen = eams if adopt else pams
        tally.decisions.append(
            Decision(
                window_id=0,
                action=DecisionAction.ADOPT if adopt else DecisionAction.KEEP,
                improvement=gain,
                streak=0,
                scheme=chosen,
            ),
        )
        if adopt:
            self._charge_mapping_change(tally)
        self.logger.info("Offline profile picks %s (improvement %.4f)", chosen.scheme_id, gain)
        return chosen

    # Simulation loop

    def _simulate(  # noqa: C901, PLR0912, PLR0913, PLR0915
        self,
        trace: Sequence[MemoryRequest],
        homes: np.ndarray,
        tally: _Tally,
        *,
        state: MigrationState | None,
        monitor: BitChangeMonitor | None,
        predictor: MappingPredictor | None,
        progress: bool,
    ) -> int:
        geom = self.geom
        timing = self.config.timing
        sched = self.config.scheduler
        ratio = geom.cpu_to_mem_clock_ratio
        rows_per_bank = geom.rows_per_bank
        banks = [BankState() for _ in range(geom.total_banks)]
        drain = WriteDrain(sched)
        threads = self._threads(trace)
        reads: list[PendingRequest] = []
        writes: list[PendingRequest] = []
        completions: list[tuple[int, int]] = []  # (done, thread_id) of scheduled requests
        seen_epoch = 0
        issued = 0
        now = 0
        last_done = 0
        bar = tqdm(total=len(trace), desc=self.controller.label, unit="req", disable=not progress)

        while issued < len(trace) or reads or writes:
            while completions and completions[0][0] <= now:
                threads[heapq.heappop(completions)[1]].inflight -= 1

            # admission
            for thread_id, thread in threads.items():
                while not thread.done and thread.ready <= now:
                    index = thread.indices[thread.pos]
                    request = trace[index]
                    is_read = request.op is RequestOp.READ
                    thread.blocked = thread.inflight >= sched.rob_size or (
                        not is_read and len(writes) >= sched.write_queue_size
                    )
                    if thread.blocked:
                        break
                    home = int(homes[index])
                    location = state.locate(home) if state is not None else home
                    bank, row = divmod(location, rows_per_bank)
                    pending = PendingRequest(
                        op=request.op,
                        thread_id=thread_id,
                        home=home,
                        location=location,
                        epoch=state.epoch if state is not None else 0,
                        bank=bank,
                        row=row,
                    )
                    (reads if is_read else writes).append(pending)
                    thread.inflight += 1
                    thread.pos += 1
                    if not thread.done:
                        gap = thread.nominal[thread.pos] - thread.nominal[thread.pos - 1]
                        thread.ready = now + ceil_div(gap, ratio)
                    issued += 1
                    if issued % _PROGRESS_STEP == 0:
                        bar.update(_PROGRESS_STEP)
                    if monitor is not None:
                        monitor.observe(request.address)
                        if monitor.window_full:
                            self._end_window(monitor, predictor, state, tally)

            if state is not None and state.epoch != seen_epoch:
                seen_epoch = state.epoch
                for pending in (*reads, *writes):
                    if pending.epoch != seen_epoch:
                        pending.location = state.locate(pending.home)
                        pending.bank, pending.row = divmod(pending.location, rows_per_bank)
                        pending.epoch = seen_epoch

            # one scheduling decision per cycle
            draining = drain.update(len(writes), reads_waiting=bool(reads))
            pick = schedule_next(reads, writes, banks, now, draining=draining)
            if pick is not None:
                queue, position = pick
                pending = queue.pop(position)
                events: list[RelocationEvent] = []
                if state is not None:
                    _, events = state.resolve_home(pending.home)
                bank = banks[pending.bank]
                access, latency = classify(pending.row, bank, timing)
                tally.count(access)
                done = now + latency + timing.burst_cycles
                bank.busy_until = done
                last_done = max(last_done, done)
                heapq.heappush(completions, (done, pending.thread_id))
                if pending.op is RequestOp.READ:
                    tally.reads += 1
                else:
                    tally.writes += 1
                if state is not None:
                    if state.rolling_back:
                        events.extend(state.rollback_step(sched.rollback_drain_rate))
                        if state.rollback_done:
                            self._finish_rollback(predictor, tally)
                    last_done = max(last_done, self._apply_events(events, banks, now, tally))

            now = self._next_time(now, threads, reads, writes, banks, completions)

        bar.update(issued % _PROGRESS_STEP)
        bar.close()
        return max(last_done, now)

    def _threads(self, trace: Sequence[MemoryRequest]) -> dict[int, _Thread]:
        threads: dict[int, _Thread] = {}
        clock = 0
        for index, request in enumerate(trace):
            clock += request.gap
            thread = threads.setdefault(request.thread_id, _Thread(indices=[], nominal=[]))
            thread.indices.append(index)
            thread.nominal.append(clock)
        ratio = self.geom.cpu_to_mem_clock_ratio
        for thread in threads.values():
            thread.ready = ceil_div(thread.nominal[0], ratio)
        return dict(sorted(threads.items()))

    @staticmethod
    def _next_time(
        now: int,
        threads: dict[int, _Thread],
        reads: list[PendingRequest],
        writes: list[PendingRequest],
        banks: list[BankState],
        completions: list[tuple[int, int]],
    ) -> int:
        candidates = []
        queued = (*reads, *writes)
        if queued:
            candidates.append(max(now + 1, min(banks[p.bank].busy_until for p in queued)))
        for thread in threads.values():
            if not thread.done and not thread.blocked:
                candidates.append(max(now + 1, thread.ready))
        if completions:
            candidates.append(max(now + 1, completions[0][0]))
        return min(candidates) if candidates else now

    # Remapping

    def _end_window(
        self,
        monitor: BitChangeMonitor,
        predictor: MappingPredictor,
        state: MigrationState,
        tally: _Tally,
    ) -> None:
        signature = monitor.finalize_window()
        tally.signatures.append(signature)
        decision = predictor.step(signature)
        tally.decisions.append(decision)
        match decision.action:
            case DecisionAction.ADOPT:
                state.activate(decision.scheme)
                self._charge_mapping_change(tally)
            case DecisionAction.ROLLBACK:
                state.begin_rollback()
                if not state.migrated_rows:
                    state.rollback_step(self.config.scheduler.rollback_drain_rate)
                    self._finish_rollback(predictor, tally)

    def _finish_rollback(self, predictor: MappingPredictor, tally: _Tally) -> None:
        predictor.rollback_complete()
        self._charge_mapping_change(tally)

    def _charge_mapping_change(self, tally: _Tally) -> None:
        cost = mapping_change_cost(self.config.cost, self.geom)
        tally.mapping_changes += 1
        tally.mapping_cpu_cycles += cost.cpu_cycles
        tally.mapping_seconds += cost.seconds
        if self.config.cost.scenario is CostScenario.OFFLINE_REBOOT:
            tally.reboot_seconds += cost.seconds

    def _apply_events(self, events: list[RelocationEvent], banks: list[BankState], now: int, tally: _Tally) -> int:
        """Charge relocation costs; returns the last cycle an overlapped relocation keeps a bank busy."""
        model = self.config.cost
        overlap = model.overlap and model.scenario is CostScenario.IN_DRAM
        latest = 0
        self.relocation_log.extend(events)
        for event in events:
            if overlap and event.mem_cycles:
                for location in (event.src_location, event.dst_location):
                    bank = banks[location // self.geom.rows_per_bank]
                    bank.busy_until = max(bank.busy_until, now) + event.mem_cycles
                    bank.open_row = None
                    latest = max(latest, bank.busy_until)
            else:
                tally.stall_cpu_cycles += relocation_cost(event, model, self.geom).cpu_cycles
        return latest


def run(
    trace: Sequence[MemoryRequest],
    controller: ControllerSpec,
    geom: DramGeometry,
    timing: TimingParams | None = None,
    cost_model: CostModel | None = None,
    **config: object,
) -> SimReport:
    """One-call simulation; extra keyword arguments are SimConfig fields (scheduler, window, predictor)."""
    sim_config = SimConfig(timing=timing or TimingParams(), cost=cost_model or CostModel(), **config)
    return Simulator(geom=geom, controller=controller, config=sim_config).run(trace)


class ComparisonRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    run: str
    total_cpu_cycles: int | None
    normalized_exec_time: float


def compare(reports: Mapping[str, SimReport], baseline: str = DEFAULT_BASELINE_NAME) -> list[ComparisonRow]:
    """Execution time of every run normalized to the baseline run, then their geometric mean when there are several."""
    if baseline not in reports:
        msg = f"Baseline run {baseline!r} missing from the compared runs ({', '.join(reports) or 'none'})"
        raise ValueError(msg)
    reference = reports[baseline].total_cpu_cycles
    if reference <= 0:
        msg = f"Baseline run {baseline!r} has no execution time"
        raise ValueError(msg)
    rows = [
        ComparisonRow(
            run=name,
            total_cpu_cycles=report.total_cpu_cycles,
            normalized_exec_time=report.total_cpu_cycles / reference,
        )
        for name, report in reports.items()
    ]
    if len(rows) < 2:  # noqa: PLR2004
        return rows
    mean = gmean(row.normalized_exec_time for row in rows)
    return [*rows, ComparisonRow(run=GMEAN_ROW, total_cpu_cycles=None, normalized_exec_time=mean)]


def write_comparison_csv(path: str | Path, rows: Sequence[ComparisonRow]) -> Path:
    return FileUtils.write_csv(
        path,
        COMPARISON_CSV_HEADER,
        (
            (row.run, "" if row.total_cpu_cycles is None else row.total_cpu_cycles, f"{row.normalized_exec_time:.6f}")
            for row in rows
        ),
    )


def write_report(
    report: SimReport,
    out_dir: str | Path,
    *,
    relocation_log: RelocationLog | None = None,
    geom: DramGeometry | None = None,
) -> Path:
    """Report JSON plus signature, decision and relocation CSVs in `out_dir`."""
    out = Path(out_dir)
    report_path = FileUtils.write_data_to_file(out / "report.json", report.model_dump(mode="json"))
    write_signatures_csv(out / "signatures.csv", report.signatures)
    write_decisions_csv(out / "decisions.csv", report.decisions)
    if relocation_log is not None and geom is not None:
        relocation_log.write_csv(out / "relocations.csv", geom)
    return report_path


def read_report(path: str | Path) -> SimReport:
    data = FileUtils.read_json_file(path)
    if data is None:
        msg = f"Could not read report {path}"
        raise ValueError(msg)
    return SimReport.model_validate(data)
