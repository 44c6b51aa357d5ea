"""Memory request traces: `<gap> <R|W> <0x-address> [<thread>]` per line, gzip optional.

`serialize` writes the canonical form: decimal gap, upper-case op, lower-case `0x` address, and the
thread only when it is not 0. Comments and blank lines are dropped, so parse-then-serialize is stable
from the second pass on.
"""

import heapq
from collections.abc import Callable, Iterable, Iterator, Sequence
from pathlib import Path
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.addrmap import DramGeometry, builtin_scheme
from app.files import FileUtils
from app.logger import base_logger
from app.model_types import RequestOp, SchemeKind, TraceKind

logger = base_logger.getChild(__name__)

DEFAULT_GAP = 4  # CPU cycles, one memory cycle at the default clock ratio


class TraceParseError(ValueError):
    def __init__(self, line_number: int, reason: str) -> None:
        self.line_number = line_number
        super().__init__(f"line {line_number}: {reason}")


class MemoryRequest(NamedTuple):
    gap: int
    op: RequestOp
    address: int
    thread_id: int = 0


Converter = Callable[[list[str]], MemoryRequest]


def _convert_native(fields: list[str]) -> MemoryRequest:
    if len(fields) not in (3, 4):
        msg = f"expected '<gap> <R|W> <hex-address> [<thread>]', got {len(fields)} fields"
        raise ValueError(msg)
    thread_id = int(fields[3]) if len(fields) == 4 else 0  # noqa: PLR2004
    return _build(fields[0], fields[1], fields[2], thread_id)


def _convert_usimm(fields: list[str]) -> MemoryRequest:
    # trailing fields (the instruction pointer) are ignored
    if len(fields) < 3:  # noqa: PLR2004
        msg = f"expected at least 3 fields, got {len(fields)}"
        raise ValueError(msg)
    return _build(fields[0], fields[1], fields[2], 0)


def _build(gap: str, op: str, address: str, thread_id: int) -> MemoryRequest:
    if not address.lower().startswith("0x"):
        msg = f"address {address!r} is not 0x-prefixed"
        raise ValueError(msg)
    request = MemoryRequest(gap=int(gap), op=RequestOp(op.upper()), address=int(address, 16), thread_id=thread_id)
    if request.gap < 0 or request.thread_id < 0:
        msg = "gap and thread must be non-negative"
        raise ValueError(msg)
    return request


_CONVERTERS: dict[str, Converter] = {"native": _convert_native, "usimm": _convert_usimm}


def register_converter(name: str, converter: Converter) -> None:
    """Register a line converter for an external trace format (fields are the whitespace-split line)."""
    _CONVERTERS[name] = converter


def parse(lines: Iterable[str], *, converter: str = "native", geom: DramGeometry | None = None) -> Iterator[MemoryRequest]:
    convert = _CONVERTERS[converter]
    for line_number, line in enumerate(lines, start=1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        try:
            request = convert(fields)
        except ValueError as e:
            raise TraceParseError(line_number, str(e)) from e
        if geom is not None and request.address >= geom.capacity:
            raise TraceParseError(line_number, f"address {request.address:#x} beyond capacity {geom.capacity:#x}")
        yield request


def serialize(requests: Iterable[MemoryRequest]) -> Iterator[str]:
    for request in requests:
        line = f"{request.gap} {request.op.value} {request.address:#x}"
        yield f"{line} {request.thread_id}" if request.thread_id else line


def load_trace(path: str | Path, *, converter: str = "native", geom: DramGeometry | None = None) -> list[MemoryRequest]:
    with FileUtils.open_text(path) as handle:
        return list(parse(handle, converter=converter, geom=geom))


def write_trace(path: str | Path, requests: Iterable[MemoryRequest], *, compress: bool = False) -> Path:
    return FileUtils.write_text(path, serialize(requests), compress=compress)


def addresses(requests: Sequence[MemoryRequest]) -> np.ndarray:
    return np.fromiter((request.address for request in requests), dtype=np.uint64, count=len(requests))


# Generators


def _ops(n: int, write_ratio: float, seed: int) -> list[RequestOp]:
    if write_ratio <= 0:
        return [RequestOp.READ] * n
    writes = np.random.default_rng(seed).random(n) < write_ratio
    return [RequestOp.WRITE if w else RequestOp.READ for w in writes]


def _requests(addrs: np.ndarray, *, gap: int, write_ratio: float, seed: int) -> list[MemoryRequest]:
    ops = _ops(len(addrs), write_ratio, seed)
    return [MemoryRequest(gap, op, int(addr)) for op, addr in zip(ops, addrs, strict=True)]


def _check_n(n: int) -> None:
    if n < 1:
        msg = f"trace length must be >= 1, got {n}"
        raise ValueError(msg)


def gen_sequential(
    start: int,
    n: int,
    geom: DramGeometry,
    *,
    gap: int = DEFAULT_GAP,
    write_ratio: float = 0.0,
    seed: int = 0,
) -> list[MemoryRequest]:
    return gen_strided(start, geom.line_size, None, n, geom, gap=gap, write_ratio=write_ratio, seed=seed)


def gen_strided(  # noqa: PLR0913
    start: int,
    stride: int,
    hot_bit: int | None,
    n: int,
    geom: DramGeometry,
    *,
    gap: int = DEFAULT_GAP,
    write_ratio: float = 0.0,
    seed: int = 0,
) -> list[MemoryRequest]:
    """`start + i * stride` (wrapping at capacity); with `hot_bit`, that bit alternates on every access."""
    _check_n(n)
    if stride <= 0 or stride % geom.line_size:
        msg = f"stride {stride} must be a positive multiple of the {geom.line_size}-byte line"
        raise ValueError(msg)
    if not 0 <= start < geom.capacity:
        msg = f"start {start:#x} out of range"
        raise ValueError(msg)
    steps = np.arange(n, dtype=np.uint64)
    addrs = (np.uint64(start) + steps * np.uint64(stride)) % np.uint64(geom.capacity)
    if hot_bit is not None:
        if not geom.address_bits > hot_bit >= (geom.line_size.bit_length() - 1):
            msg = f"hot_bit {hot_bit} must address a line within the {geom.address_bits}-bit space"
            raise ValueError(msg)
        mask = np.uint64(1 << hot_bit)
        addrs = (addrs & ~mask) | ((steps & np.uint64(1)) << np.uint64(hot_bit))
    return _requests(addrs, gap=gap, write_ratio=write_ratio, seed=seed)


def gen_random(
    seed: int,
    n: int,
    geom: DramGeometry,
    *,
    gap: int = DEFAULT_GAP,
    write_ratio: float = 0.0,
) -> list[MemoryRequest]:
    _check_n(n)
    lines = np.random.default_rng(seed).integers(0, geom.capacity // geom.line_size, size=n, dtype=np.uint64)
    return _requests(lines * np.uint64(geom.line_size), gap=gap, write_ratio=write_ratio, seed=seed + 1)


def interleave(traces: Sequence[Sequence[MemoryRequest]], seed: int = 0, *, jitter: int = 0) -> list[MemoryRequest]:
    """Merge per-thread traces on their cumulative issue times; ties go to the lower thread index.

    With `jitter`, each component starts at a seeded random offset in [0, jitter] CPU cycles.
    """
    if not traces:
        msg = "interleave needs at least one trace"
        raise ValueError(msg)
    offsets = np.random.default_rng(seed).integers(0, jitter + 1, size=len(traces)) if jitter else [0] * len(traces)

    def timeline(thread_id: int, trace: Sequence[MemoryRequest]) -> Iterator[tuple[int, int, int, MemoryRequest]]:
        clock = int(offsets[thread_id])
        for seq, request in enumerate(trace):
            clock += request.gap
            yield clock, thread_id, seq, request

    merged = []
    previous = 0
    for clock, thread_id, _, request in heapq.merge(*(timeline(i, t) for i, t in enumerate(traces))):
        merged.append(request._replace(gap=clock - previous, thread_id=thread_id))
        previous = clock
    return merged


class TraceSpec(BaseModel):
    """Declarative generator parameters; `phases` feed phase-switch traces, `components` feed mixes."""

    model_config = ConfigDict(frozen=True)

    kind: TraceKind
    length: int = Field(default=10_000, ge=1)
    start: int = Field(default=0, ge=0)
    stride: int = 64
    hot_bit: int | None = None
    seed: int = 0
    gap: int = Field(default=DEFAULT_GAP, ge=0)
    write_ratio: float = Field(default=0.0, ge=0.0, le=1.0)
    jitter: int = Field(default=0, ge=0)
    phases: tuple["TraceSpec", ...] = ()
    components: tuple["TraceSpec", ...] = ()


def generate(spec: TraceSpec, geom: DramGeometry) -> list[MemoryRequest]:
    common = {"gap": spec.gap, "write_ratio": spec.write_ratio}
    match spec.kind:
        case TraceKind.SEQUENTIAL:
            return gen_sequential(spec.start, spec.length, geom, seed=spec.seed, **common)
        case TraceKind.STRIDED:
            return gen_strided(spec.start, spec.stride, spec.hot_bit, spec.length, geom, seed=spec.seed, **common)
        case TraceKind.RANDOM:
            return gen_random(spec.seed, spec.length, geom, **common)
        case TraceKind.PHASE_SWITCH:
            if len(spec.phases) < 2:  # noqa: PLR2004
                msg = "a phase-switch trace needs at least two phases"
                raise ValueError(msg)
            return [request for phase in spec.phases for request in generate(phase, geom)]
        case TraceKind.MIX:
            if not spec.components:
                msg = "a mix needs at least one component"
                raise ValueError(msg)
            return interleave([generate(c, geom) for c in spec.components], spec.seed, jitter=spec.jitter)
    msg = f"Unsupported trace kind {spec.kind}"
    raise ValueError(msg)


def hot_row_bit_spec(geom: DramGeometry, *, length: int, hot_bit: int = 20, seed: int = 0) -> TraceSpec:
    """Sequential lines with one row bit toggled every access: the mapping-sensitive pattern."""
    return TraceSpec(kind=TraceKind.STRIDED, length=length, stride=geom.line_size, hot_bit=hot_bit, seed=seed)


def synthetic_suite(geom: DramGeometry, *, length: int, seed: int = 0) -> dict[str, TraceSpec]:
    """Workloads spanning mapping-sensitive and mapping-insensitive patterns, keyed by name."""
    if length < 8:  # noqa: PLR2004
        msg = f"suite traces need at least 8 requests, got {length}"
        raise ValueError(msg)
    line = geom.line_size
    baseline = builtin_scheme(SchemeKind.BASELINE, geom)
    bank_low = min(baseline.bank) if baseline.bank else min(baseline.row)
    row_bits = baseline.row
    row_low = min(row_bits)
    suite: dict[str, TraceSpec] = {}

    for offset, bit in enumerate(row_bits[:: max(1, len(row_bits) // 6)][:6]):
        suite[f"hot-row-bit-{bit}"] = TraceSpec(
            kind=TraceKind.STRIDED, length=length, stride=line, hot_bit=bit, seed=seed + offset
        )
    for shift in (0, 2, 4):
        stride = 1 << (row_low + shift)
        suite[f"row-stride-{stride:#x}"] = TraceSpec(kind=TraceKind.STRIDED, length=length, stride=stride, seed=seed)
    suite["bank-stride"] = TraceSpec(kind=TraceKind.STRIDED, length=length, stride=1 << bank_low, seed=seed)
    suite["sequential"] = TraceSpec(kind=TraceKind.SEQUENTIAL, length=length, seed=seed)
    suite["sequential-writes"] = TraceSpec(kind=TraceKind.SEQUENTIAL, length=length, write_ratio=0.3, seed=seed)
    for i in range(3):
        suite[f"random-{i}"] = TraceSpec(kind=TraceKind.RANDOM, length=length, seed=seed + 100 + i)

    hot = hot_row_bit_spec(geom, length=length // 2, hot_bit=row_low + 4, seed=seed)
    for share, name in ((1, "mix-hot-random"), (3, "mix-hot-heavy")):
        components = [hot] * share + [TraceSpec(kind=TraceKind.RANDOM, length=length // 2, seed=seed + 200 + share)]
        suite[name] = TraceSpec(kind=TraceKind.MIX, components=tuple(components), seed=seed)
    suite["mix-4-sequential"] = TraceSpec(
        kind=TraceKind.MIX,
        components=tuple(
            TraceSpec(kind=TraceKind.SEQUENTIAL, length=length // 4, start=i << (geom.address_bits - 2))
            for i in range(4)
        ),
        seed=seed,
    )
    suite["mix-8-random"] = TraceSpec(
        kind=TraceKind.MIX,
        components=tuple(TraceSpec(kind=TraceKind.RANDOM, length=length // 8, seed=seed + 300 + i) for i in range(8)),
        seed=seed,
    )
    suite["phase-hot-then-sequential"] = TraceSpec(
        kind=TraceKind.PHASE_SWITCH,
        phases=(hot, TraceSpec(kind=TraceKind.SEQUENTIAL, length=length // 2, seed=seed)),
    )
    return suite
