"""Bank state, request queues and the FR-FCFS scheduler of the memory controller model."""

from dataclasses import dataclass

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.model_types import AccessClass, RequestOp


class TimingParams(BaseModel):
    """DRAM timing in memory-bus cycles."""

    model_config = ConfigDict(frozen=True)

    t_cas: int = Field(default=11, ge=1)
    t_rcd: int = Field(default=11, ge=1)
    t_rp: int = Field(default=11, ge=1)
    burst_cycles: int = Field(default=4, ge=1)

    def latency(self, access: AccessClass) -> int:
        match access:
            case AccessClass.HIT:
                return self.t_cas
            case AccessClass.EMPTY:
                return self.t_rcd + self.t_cas
            case AccessClass.CONFLICT:
                return self.t_rp + self.t_rcd + self.t_cas
        msg = f"Unknown access class {access}"
        raise ValueError(msg)


class SchedulerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    rob_size: int = Field(default=32, ge=1)  # outstanding requests per thread, reads and writes
    write_queue_size: int = Field(default=64, ge=1)  # admission stalls while the write queue is full
    write_high_watermark: int = Field(default=32, ge=1)
    write_low_watermark: int = Field(default=16, ge=0)
    rollback_drain_rate: int = Field(default=1, ge=1)  # rollback moves per serviced request

    @model_validator(mode="after")
    def _check_watermarks(self) -> "SchedulerConfig":
        if self.write_low_watermark >= self.write_high_watermark:
            msg = (
                f"write_low_watermark ({self.write_low_watermark}) must be below "
                f"write_high_watermark ({self.write_high_watermark})"
            )
            raise ValueError(msg)
        if self.write_high_watermark > self.write_queue_size:
            msg = (
                f"write_high_watermark ({self.write_high_watermark}) must not exceed "
                f"write_queue_size ({self.write_queue_size})"
            )
            raise ValueError(msg)
        return self


@dataclass(slots=True)
class BankState:
    open_row: int | None = None
    busy_until: int = 0


@dataclass(slots=True)
class PendingRequest:
    op: RequestOp
    thread_id: int
    home: int  # PAMS location, or the fixed scheme's location
    location: int  # where the row lives as of `epoch`
    epoch: int
    bank: int
    row: int


def classify(row: int, bank: BankState, timing: TimingParams) -> tuple[AccessClass, int]:
    """Classify an access to `row` against the bank's row buffer, leave that row open, return the latency."""
    if bank.open_row is None:
        access = AccessClass.EMPTY
    elif bank.open_row == row:
        access = AccessClass.HIT
    else:
        access = AccessClass.CONFLICT
    bank.open_row = row
    return access, timing.latency(access)


def _first_ready(queue: list[PendingRequest], banks: list[BankState], now: int) -> int | None:
    oldest = None
    for index, request in enumerate(queue):
        bank = banks[request.bank]
        if bank.busy_until > now:
            continue
        if bank.open_row == request.row:
            return index
        if oldest is None:
            oldest = index
    return oldest


def schedule_next(
    reads: list[PendingRequest],
    writes: list[PendingRequest],
    banks: list[BankState],
    now: int,
    *,
    draining: bool,
) -> tuple[list[PendingRequest], int] | None:
    """FR-FCFS pick among requests whose bank is free: the oldest row hit, else the oldest request.

    Reads go first unless the write queue is draining. Queues are kept in arrival order.
    Returns the queue and index of the chosen request.
    """
    for queue in (writes, reads) if draining else (reads, writes):
        index = _first_ready(queue, banks, now)
        if index is not None:
            return queue, index
    return None


class WriteDrain:
    """Hysteresis between the write queue watermarks."""

    def __init__(self, config: SchedulerConfig) -> None:
        self.high = config.write_high_watermark
        self.low = config.write_low_watermark
        self.draining = False

    def update(self, queued_writes: int, *, reads_waiting: bool) -> bool:
        if queued_writes > self.high:
            self.draining = True
        elif queued_writes <= self.low:
            self.draining = False
        # with no reads left, writes go regardless of the watermark
        return self.draining or not reads_waiting
