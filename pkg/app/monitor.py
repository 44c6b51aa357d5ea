from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.addrmap import DramGeometry, builtin_scheme
from app.files import FileUtils
from app.logger import base_logger
from app.model_types import CoordinateField, SchemeKind
from app.utils import ceil_div

logger = base_logger.getChild(__name__)

DEFAULT_WINDOW_LEN = 250_000
DEFAULT_COUNTER_BITS = 18

# Quoted monitor size for a 512 GB system.
REFERENCE_MONITOR_BYTES = 60
REFERENCE_CAPACITY_BYTES = 512 * 2**30

SIGNATURE_CSV_HEADER = ("window_id", "bit", "count", "requests")
RATES_CSV_HEADER = ("window_id", "bit", "rate")


class EmptyWindowError(ValueError):
    def __init__(self) -> None:
        super().__init__("no requests observed")


class WindowConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    window_len: int = Field(default=DEFAULT_WINDOW_LEN, ge=2)
    counter_bits: int = Field(default=DEFAULT_COUNTER_BITS, ge=1)

    @model_validator(mode="after")
    def _warn_on_saturation(self) -> "WindowConfig":
        if self.may_saturate:
            logger.warning(
                "%d-bit counters can saturate within a %d-request window",
                self.counter_bits,
                self.window_len,
            )
        return self

    @property
    def may_saturate(self) -> bool:
        return self.window_len - 1 > self.counter_max

    @property
    def counter_max(self) -> int:
        return (1 << self.counter_bits) - 1


class BitChangeSignature(BaseModel):
    model_config = ConfigDict(frozen=True)

    counters: tuple[int, ...]
    requests_observed: int
    window_id: int
    saturated: bool = False

    @property
    def address_bits(self) -> int:
        return len(self.counters)

    def scaled(self, factor: int) -> "BitChangeSignature":
        return self.model_copy(update={"counters": tuple(c * factor for c in self.counters)})


class BitChangeMonitor:
    def __init__(self, *, address_bits: int, config: WindowConfig | None = None) -> None:
        if address_bits < 1:
            msg = f"address_bits must be >= 1, got {address_bits}"
            raise ValueError(msg)
        self.logger = base_logger.getChild(self.__class__.__name__)
        self.address_bits = address_bits
        self.config = config or WindowConfig()
        self.history: int | None = None
        self.window_id = 0
        self._counters = np.zeros(address_bits, dtype=np.int64)
        self._requests = 0

    @property
    def requests_observed(self) -> int:
        return self._requests

    @property
    def counters(self) -> tuple[int, ...]:
        counter_max = self.config.counter_max
        return tuple(min(int(c), counter_max) for c in self._counters)

    @property
    def window_full(self) -> bool:
        return self._requests >= self.config.window_len

    def observe(self, addr: int) -> None:
        # the first request of a window only loads the history register, so every count is bounded
        # by requests_observed - 1
        if self._requests and self.history is not None:
            diff = addr ^ self.history
            while diff:
                low = diff & -diff
                self._counters[low.bit_length() - 1] += 1
                diff ^= low
        self.history = addr
        self._requests += 1

    def observe_many(self, addrs: np.ndarray | Sequence[int]) -> None:
        """Vectorized observe over a block of addresses belonging to the current window."""
        addrs = np.asarray(addrs, dtype=np.uint64)
        if addrs.size == 0:
            return
        chain = addrs if not self._requests or self.history is None else np.concatenate(
            (np.array([self.history], dtype=np.uint64), addrs),
        )
        if chain.size > 1:
            diffs = (chain[1:] ^ chain[:-1]).astype("<u8")
            flips = np.unpackbits(diffs.view(np.uint8).reshape(-1, 8), axis=1, bitorder="little")
            self._counters += flips[:, : self.address_bits].sum(axis=0, dtype=np.int64)
        self.history = int(addrs[-1])
        self._requests += int(addrs.size)

    def finalize_window(self) -> BitChangeSignature:
        if self._requests == 0:
            raise EmptyWindowError
        counter_max = self.config.counter_max
        saturated = bool((self._counters > counter_max).any())
        if saturated:
            self.logger.warning("Window %d: counters saturated at %d", self.window_id, counter_max)
        signature = BitChangeSignature(
            counters=tuple(int(c) for c in np.minimum(self._counters, counter_max)),
            requests_observed=self._requests,
            window_id=self.window_id,
            saturated=saturated,
        )
        self.logger.debug("Window %d closed after %d requests", self.window_id, self._requests)
        self.window_id += 1
        self._counters[:] = 0
        self._requests = 0
        return signature

    def reset(self) -> None:
        """Clear counters and the history register; the window sequence number is kept."""
        self._counters[:] = 0
        self._requests = 0
        self.history = None


def change_rates(sig: BitChangeSignature) -> np.ndarray:
    if sig.requests_observed < 2:  # noqa: PLR2004
        msg = f"change rates need at least 2 requests, window {sig.window_id} has {sig.requests_observed}"
        raise ValueError(msg)
    return np.asarray(sig.counters, dtype=np.float64) / (sig.requests_observed - 1)


def profile_addresses(
    addrs: np.ndarray,
    *,
    address_bits: int,
    config: WindowConfig | None = None,
) -> list[BitChangeSignature]:
    """Split an address stream into windows and return one signature per (possibly partial) window."""
    monitor = BitChangeMonitor(address_bits=address_bits, config=config)
    window_len = monitor.config.window_len
    signatures = []
    for start in range(0, len(addrs), window_len):
        monitor.observe_many(addrs[start : start + window_len])
        signatures.append(monitor.finalize_window())
    if not signatures:
        raise EmptyWindowError
    return signatures


def monitor_storage_bytes(address_bits: int, counter_bits: int) -> int:
    """Counter array plus one history register."""
    if address_bits < 1 or counter_bits < 1:
        msg = "address_bits and counter_bits must be >= 1"
        raise ValueError(msg)
    return ceil_div(address_bits * counter_bits, 8) + ceil_div(address_bits, 8)


def monitor_storage_report(geom: DramGeometry, counter_bits: int = DEFAULT_COUNTER_BITS) -> dict[str, object]:
    """Full-width and row+bank-only monitor budgets, next to the quoted 60-byte figure."""
    scheme = builtin_scheme(SchemeKind.BASELINE, geom)
    row_bank_bits = sum(
        len(scheme.bits(field))
        for field in (CoordinateField.ROW, CoordinateField.BANK, CoordinateField.RANK, CoordinateField.CHANNEL)
    )
    full = monitor_storage_bytes(geom.address_bits, counter_bits)
    row_bank = monitor_storage_bytes(row_bank_bits, counter_bits)
    return {
        "capacity_bytes": geom.capacity,
        "address_bits": geom.address_bits,
        "counter_bits": counter_bits,
        "full_width_bytes": full,
        "row_bank_bits": row_bank_bits,
        "row_bank_only_bytes": row_bank,
        "row_bank_counters_only_bytes": ceil_div(row_bank_bits * counter_bits, 8),
        "reference_bytes": REFERENCE_MONITOR_BYTES,
        "reference_capacity_bytes": REFERENCE_CAPACITY_BYTES,
        "note": (
            f"quoted size is at most {REFERENCE_MONITOR_BYTES} bytes for 512 GB; "
            f"{geom.address_bits} bits x {counter_bits}-bit counters gives {full} bytes, so the quoted "
            "figure likely excludes offset/column bits; both readings are reported"
        ),
    }


def write_signatures_csv(path: str | Path, signatures: Iterable[BitChangeSignature]) -> Path:
    rows = (
        (sig.window_id, bit, count, sig.requests_observed)
        for sig in signatures
        for bit, count in enumerate(sig.counters)
    )
    return FileUtils.write_csv(path, SIGNATURE_CSV_HEADER, rows)


def write_rates_csv(path: str | Path, signatures: Iterable[BitChangeSignature]) -> Path:
    rows = []
    for sig in signatures:
        if sig.requests_observed < 2:  # noqa: PLR2004
            continue
        rows.extend((sig.window_id, bit, f"{rate:.6f}") for bit, rate in enumerate(change_rates(sig)))
    return FileUtils.write_csv(path, RATES_CSV_HEADER, rows)


def read_signatures_csv(path: str | Path) -> list[BitChangeSignature]:
    windows: dict[int, dict[int, int]] = {}
    requests: dict[int, int] = {}
    for record in FileUtils.read_csv(path):
        window_id = int(record["window_id"])
        windows.setdefault(window_id, {})[int(record["bit"])] = int(record["count"])
        requests[window_id] = int(record["requests"])
    return [
        BitChangeSignature(
            counters=tuple(counts[bit] for bit in range(len(counts))),
            requests_observed=requests[window_id],
            window_id=window_id,
        )
        for window_id, counts in sorted(windows.items())
    ]
