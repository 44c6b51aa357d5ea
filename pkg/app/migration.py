# NOTE: rows are keyed by their PAMS home location. mt[home] marks a row sitting at its EAMS
# destination, st[home] a row displaced by a swap (at neither place). `residency` is a test shadow.

from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.addrmap import (
    DramGeometry,
    MappingScheme,
    bank_of,
    decompose,
    location_addresses,
    location_index,
    locations_of,
)
from app.files import FileUtils
from app.logger import base_logger
from app.model_types import CostScenario, RelocationKind

logger = base_logger.getChild(__name__)

ROW_TRANSFER_MEM_CYCLES = 64  # 4 Kbit per device over the 64-bit internal bus
SWAP_MEM_CYCLES = 2 * ROW_TRANSFER_MEM_CYCLES
TABLE_BITS_PER_ROW = 2  # one migration bit, one swap bit
NANOCOMMIT_WRITE_LATENCY_NS = 48.0
NVDIMM_BANDWIDTH_BYTES_PER_S = 4 * 2**30
DEFAULT_CPU_FREQUENCY_HZ = 3.2e9

RELOCATION_CSV_HEADER = (
    "event_seq",
    "kind",
    "src_bank",
    "src_row",
    "dst_bank",
    "dst_row",
    "inter_bank",
    "mem_cycles",
)

MIGRATION_VARIANTS: dict[str, dict[str, object]] = {
    "intra-subarray": {
        "executed": False,
        "steps": (
            "activate the source row, loading it into the shared row buffer",
            "activate the destination row while the buffer still drives the bitlines",
        ),
        "why_skipped": "same bank: cannot reduce page conflicts",
    },
    "inter-subarray": {
        "executed": False,
        "steps": (
            "activate the source row into its local row buffer",
            "transfer the local buffer to the global row buffer",
            "activate the destination subarray and connect it to the global row buffer",
        ),
        "why_skipped": "same bank: cannot reduce page conflicts",
    },
    "inter-bank": {
        "executed": True,
        "steps": (
            "activate source and destination rows into their local row buffers",
            "put bank A in read mode and bank B in write mode",
            "transfer the source row to bank B's global row buffer over the narrow I/O bus",
            "put bank A in write mode and bank B in read mode",
            "transfer the destination row to bank A's global row buffer",
            "connect each global row buffer to its new row",
        ),
        "why_skipped": None,
    },
}

# Reported circuit figures; documentation only, never used in timing.
CIRCUIT_CONSTANTS: dict[str, str] = {
    "in_dram_copy_area": "0.01% die area",
    "subarray_latch_area": "0.15% die area",
    "mt_st_area": "0.0016% die area",
    "activate_extra_power": "72.2 uW per ACTIVATE",
}


class IntegrityError(RuntimeError):
    pass


class CostModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    scenario: CostScenario = CostScenario.IN_DRAM
    nvdimm_bandwidth_bytes_per_s: float = Field(default=NVDIMM_BANDWIDTH_BYTES_PER_S, gt=0)
    nanocommit_write_latency_ns: float = Field(default=NANOCOMMIT_WRITE_LATENCY_NS, gt=0)
    reboot_penalty_s: float = Field(default=0.0, ge=0)
    cpu_frequency_hz: float = Field(default=DEFAULT_CPU_FREQUENCY_HZ, gt=0)
    # in-DRAM relocations occupy the two banks instead of stalling the processor
    overlap: bool = False


class RelocationEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: RelocationKind
    src_location: int
    dst_location: int
    inter_bank: bool
    mem_cycles: int

    @property
    def rows_written(self) -> int:
        return 1 if self.kind is RelocationKind.MIGRATE else 2


class RelocationCost(BaseModel):
    model_config = ConfigDict(frozen=True)

    cpu_cycles: float = 0.0
    seconds: float = 0.0


@dataclass
class RelocationStats:
    inter: int = 0  # performed inter-bank migrations
    intra: int = 0  # attempted intra-bank migrations, skipped
    swaps: int = 0
    rollbacks: int = 0
    self_mapped: int = 0  # rows whose EAMS location is their current location
    mem_cycles: int = 0

    @property
    def attempted(self) -> int:
        return self.inter + self.intra

    def breakdown(self) -> dict[str, float]:
        performed = self.inter + self.rollbacks
        return {
            "inter_bank_fraction": self.inter / self.attempted if self.attempted else 0.0,
            "rollback_fraction": self.rollbacks / performed if performed else 0.0,
        }


def relocation_cost(event: RelocationEvent, model: CostModel, geom: DramGeometry) -> RelocationCost:
    """Per-event charge. Bulk scenarios charge per mapping change instead (see mapping_change_cost)."""
    match model.scenario:
        case CostScenario.IN_DRAM:
            cycles = event.mem_cycles * geom.cpu_to_mem_clock_ratio
            return RelocationCost(cpu_cycles=cycles, seconds=cycles / model.cpu_frequency_hz)
        case CostScenario.NANO_COMMIT:
            if event.mem_cycles == 0:
                return RelocationCost()
            seconds = event.rows_written * (model.nanocommit_write_latency_ns / 1e9)
            return RelocationCost(cpu_cycles=seconds * model.cpu_frequency_hz, seconds=seconds)
        case _:
            return RelocationCost()


def mapping_change_cost(model: CostModel, geom: DramGeometry) -> RelocationCost:
    """One-off charge when the controller switches schemes (adoption or completed rollback)."""
    match model.scenario:
        case CostScenario.NVDIMM_BULK:
            # copy out with the old mapping, restore with the new one
            seconds = 2 * geom.capacity / model.nvdimm_bandwidth_bytes_per_s
            return RelocationCost(cpu_cycles=seconds * model.cpu_frequency_hz, seconds=seconds)
        case CostScenario.OFFLINE_REBOOT:
            # reported separately, never added to execution time
            return RelocationCost(seconds=model.reboot_penalty_s)
        case _:
            return RelocationCost()


def table_storage(geom: DramGeometry) -> dict[str, object]:
    bits = TABLE_BITS_PER_ROW * geom.locations
    fraction = TABLE_BITS_PER_ROW / (geom.row_size_bytes * 8)
    return {
        "bits": bits,
        "bytes": bits / 8,
        "fraction": fraction,
        "percent": fraction * 100,
        "note": (
            f"2 bits per {geom.row_size_bytes}-byte row is a fraction of {fraction:.3g} "
            f"({fraction * 100:.3g}%); the quoted '3x10^-5 %' matches the fraction's numeral, "
            "so its percent sign is ambiguous"
        ),
    }


class MigrationState:
    def __init__(self, *, geom: DramGeometry, pams: MappingScheme) -> None:
        self.logger = base_logger.getChild(self.__class__.__name__)
        self.geom = geom
        self.pams = pams
        self.eams: MappingScheme | None = None
        size = geom.locations
        self.mt = np.zeros(size, dtype=np.bool_)
        self.st = np.zeros(size, dtype=np.bool_)
        self.residency = np.arange(size, dtype=np.int64)
        self.stats = RelocationStats()
        self.rolling_back = False
        self.epoch = 0  # bumped on every data movement, lets callers cache resolved locations
        self._dest: np.ndarray | None = None
        self._src: np.ndarray | None = None
        self._migrated: set[int] = set()
        self._skipped: set[int] = set()

    # Lookups

    @property
    def active(self) -> bool:
        return self.eams is not None

    @property
    def migrated_rows(self) -> int:
        return len(self._migrated)

    def home_of(self, addr: int) -> int:
        return location_index(decompose(addr, self.pams, self.geom), self.geom)

    def dest(self, home: int) -> int:
        return int(self._dest[home]) if self._dest is not None else home

    def locate(self, home: int) -> int:
        """Current location of the row whose PAMS home is `home`, without side effects."""
        if self._dest is None or self._src is None:
            return home
        if self.mt[home]:
            return int(self._dest[home])
        if not self.st[home]:
            return home
        # displaced: walk back through the rows that migrated into our slot until the previous row
        # has not migrated; the run's first location holds us
        position = int(self._src[home])
        for _ in range(self.geom.locations):
            previous = int(self._src[position])
            if not self.mt[previous]:
                return position
            position = previous
        msg = f"Swap-chain walk from location {home} exceeded {self.geom.locations} steps"
        self.logger.error(msg)
        raise IntegrityError(msg)

    # Mapping changes

    def activate(self, eams: MappingScheme) -> None:
        if self.active or self.rolling_back:
            msg = "Cannot activate a new mapping while another one is in place"
            raise RuntimeError(msg)
        if self.mt.any() or self.st.any():
            msg = "Migration tables must be clear before a mapping is activated"
            raise IntegrityError(msg)
        homes = np.arange(self.geom.locations, dtype=np.int64)
        dest = locations_of(location_addresses(homes, self.pams, self.geom), eams, self.geom)
        src = np.empty_like(dest)
        src[dest] = homes
        if not np.array_equal(np.sort(dest), homes):
            msg = f"{eams.scheme_id} does not map rows of {self.pams.scheme_id} one-to-one"
            raise ValueError(msg)
        self.eams = eams
        self._dest = dest
        self._src = src
        self._skipped.clear()
        self.logger.info("Activated %s", eams.scheme_id)

    def begin_rollback(self) -> None:
        if not self.active:
            msg = "No active mapping to roll back"
            raise RuntimeError(msg)
        self.rolling_back = True
        self.logger.info("Rolling back %s with %d migrated rows", self.eams.scheme_id, self.migrated_rows)

    # Access path

    def resolve(self, addr: int) -> tuple[int, list[RelocationEvent]]:
        """Location servicing `addr` now, plus the relocations triggered by this access."""
        return self.resolve_home(self.home_of(addr))

    def resolve_home(self, home: int) -> tuple[int, list[RelocationEvent]]:
        if self._dest is None:
            return home, []
        if self.mt[home]:
            return int(self._dest[home]), []
        current = self.locate(home)
        if self.rolling_back:
            return current, []
        return current, self._migrate(home, current)

    def _migrate(self, home: int, current: int) -> list[RelocationEvent]:
        target = int(self._dest[home])
        if target == current:
            self.mt[home] = True
            self.st[home] = False
            self._migrated.add(home)
            self.stats.self_mapped += 1
            return []
        inter_bank = bank_of(current, self.geom) != bank_of(target, self.geom)
        if not inter_bank:
            if home in self._skipped:
                return []
            self._skipped.add(home)
            self.stats.intra += 1
            return [
                RelocationEvent(
                    kind=RelocationKind.MIGRATE,
                    src_location=current,
                    dst_location=target,
                    inter_bank=False,
                    mem_cycles=0,
                ),
            ]

        occupant = int(self.residency[target])
        self._exchange(current, target)
        self.mt[home] = True
        self.st[home] = False
        self._migrated.add(home)
        self.st[occupant] = current != occupant
        self.stats.inter += 1
        self.stats.swaps += 1
        self.stats.mem_cycles += SWAP_MEM_CYCLES
        return [
            RelocationEvent(
                kind=RelocationKind.SWAP,
                src_location=current,
                dst_location=target,
                inter_bank=True,
                mem_cycles=SWAP_MEM_CYCLES,
            ),
        ]

    def _exchange(self, a: int, b: int) -> None:
        self.residency[a], self.residency[b] = self.residency[b], self.residency[a]
        self.epoch += 1

    # Rollback

    def rollback_step(self, budget: int) -> list[RelocationEvent]:
        """Return up to `budget` rows to their PAMS homes. Retires the EAMS once nothing is left."""
        if not self.rolling_back:
            msg = "rollback_step called with no rollback in progress"
            raise RuntimeError(msg)
        events: list[RelocationEvent] = []
        while self._migrated and len(events) < budget:
            event = self._undo_one()
            if event is not None:
                events.append(event)
        if not self._migrated:
            self._retire()
        return events

    @property
    def rollback_done(self) -> bool:
        return not self.rolling_back

    def _undo_one(self) -> RelocationEvent | None:
        start = next(iter(self._migrated))
        # follow the run forward to its last migrated row
        end = start
        for _ in range(self.geom.locations):
            following = int(self._dest[end])
            if not self.mt[following]:
                break
            end = following
            if end == start:
                # the whole cycle migrated: un-marking one row needs no data movement
                self.mt[start] = False
                self._migrated.discard(start)
                self.st[start] = int(self._dest[start]) != start
                return None
        else:
            msg = f"Run walk from location {start} exceeded {self.geom.locations} steps"
            raise IntegrityError(msg)

        # the row after the run sits at the run's first location, and its home holds `end`
        successor = int(self._dest[end])
        first = end
        for _ in range(self.geom.locations):
            previous = int(self._src[first])
            if not self.mt[previous]:
                break
            first = previous
        self._exchange(first, successor)
        self.mt[end] = False
        self._migrated.discard(end)
        self.st[end] = first != end
        self.st[successor] = False
        inter_bank = bank_of(first, self.geom) != bank_of(successor, self.geom)
        self.stats.rollbacks += 1
        self.stats.mem_cycles += SWAP_MEM_CYCLES
        return RelocationEvent(
            kind=RelocationKind.ROLLBACK_MOVE,
            src_location=successor,
            dst_location=first,
            inter_bank=inter_bank,
            mem_cycles=SWAP_MEM_CYCLES,
        )

    def _retire(self) -> None:
        if self.st.any() or self.mt.any():
            msg = "Rollback finished with migration or swap bits still set"
            self.logger.error(msg)
            raise IntegrityError(msg)
        if not np.array_equal(self.residency, np.arange(self.geom.locations)):
            msg = "Rollback finished with rows away from their PAMS homes"
            self.logger.error(msg)
            raise IntegrityError(msg)
        self.logger.info("Retired %s", self.eams.scheme_id if self.eams else "mapping")
        self.eams = None
        self._dest = None
        self._src = None
        self._skipped.clear()
        self.rolling_back = False

    # Checks

    def check_residency(self) -> None:
        """Assert that residency is a bijection and agrees with the tables for every row."""
        if not np.array_equal(np.sort(self.residency), np.arange(self.geom.locations)):
            msg = "Residency lost or duplicated a row"
            raise IntegrityError(msg)
        where = np.empty_like(self.residency)
        where[self.residency] = np.arange(self.geom.locations)
        for home in range(self.geom.locations):
            if self.locate(home) != where[home]:
                msg = f"Row {home} is at {where[home]} but the tables resolve it to {self.locate(home)}"
                raise IntegrityError(msg)


@dataclass
class RelocationLog:
    events: list[RelocationEvent] = field(default_factory=list)

    def extend(self, events: Iterable[RelocationEvent]) -> None:
        self.events.extend(events)

    def write_csv(self, path: str | Path, geom: DramGeometry) -> Path:
        rows_per_bank = geom.rows_per_bank
        rows = (
            (
                seq,
                event.kind.value,
                *divmod(event.src_location, rows_per_bank),
                *divmod(event.dst_location, rows_per_bank),
                int(event.inter_bank),
                event.mem_cycles,
            )
            for seq, event in enumerate(self.events)
        )
        return FileUtils.write_csv(path, RELOCATION_CSV_HEADER, rows)
