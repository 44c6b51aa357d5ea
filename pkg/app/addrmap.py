"""DRAM geometry, coordinates and bit-field address-mapping schemes."""

from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.files import FileUtils
from app.logger import base_logger
from app.model_types import COORDINATE_FIELDS, CoordinateField, SchemeKind
from app.utils import ceil_div, is_power_of_two, log2_exact

logger = base_logger.getChild(__name__)

# (source shift in the address, width, destination shift in the field value)
Run = tuple[int, int, int]


class SchemeError(ValueError):
    def __init__(self, scheme_id: str, violations: list[str]) -> None:
        self.violations = violations
        super().__init__(f"Scheme {scheme_id!r} is invalid: {'; '.join(violations)}")


class DramGeometry(BaseModel):
    """Memory-system organisation. Defaults describe a 4 GB, single-channel, 8-bank part."""

    model_config = ConfigDict(frozen=True)

    channels: int = 1
    ranks_per_channel: int = 1
    banks_per_rank: int = 8
    rows_per_bank: int = 65_536
    columns_per_row: int = 128  # in cache lines
    line_size: int = 64  # bytes
    cpu_to_mem_clock_ratio: int = Field(default=4, ge=1)  # 3.2 GHz core, 800 MHz bus

    @field_validator(
        "channels",
        "ranks_per_channel",
        "banks_per_rank",
        "rows_per_bank",
        "columns_per_row",
        "line_size",
    )
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if not is_power_of_two(value):
            msg = f"must be a power of two >= 1, got {value}"
            raise ValueError(msg)
        return value

    @property
    def capacity(self) -> int:
        return self.total_banks * self.rows_per_bank * self.columns_per_row * self.line_size

    @property
    def address_bits(self) -> int:
        return log2_exact(self.capacity)

    @property
    def row_size_bytes(self) -> int:
        return self.columns_per_row * self.line_size

    @property
    def total_banks(self) -> int:
        return self.channels * self.ranks_per_channel * self.banks_per_rank

    @property
    def locations(self) -> int:
        """Number of (channel, rank, bank, row) locations."""
        return self.total_banks * self.rows_per_bank

    def count(self, field: CoordinateField) -> int:
        return {
            CoordinateField.CHANNEL: self.channels,
            CoordinateField.RANK: self.ranks_per_channel,
            CoordinateField.BANK: self.banks_per_rank,
            CoordinateField.ROW: self.rows_per_bank,
            CoordinateField.COLUMN: self.columns_per_row,
            CoordinateField.OFFSET: self.line_size,
        }[field]

    def field_width(self, field: CoordinateField) -> int:
        return log2_exact(self.count(field))


class DramCoordinate(NamedTuple):
    channel: int = 0
    rank: int = 0
    bank: int = 0
    row: int = 0
    column: int = 0
    offset: int = 0


class MappingScheme(BaseModel):
    model_config = ConfigDict(frozen=True)

    scheme_id: str
    channel: tuple[int, ...] = ()
    rank: tuple[int, ...] = ()
    bank: tuple[int, ...] = ()
    row: tuple[int, ...] = ()
    column: tuple[int, ...] = ()
    offset: tuple[int, ...] = ()
    xor_bank_sources: tuple[int, ...] | None = None

    def bits(self, field: CoordinateField) -> tuple[int, ...]:
        return getattr(self, field.value)

    @property
    def field_bits(self) -> dict[CoordinateField, tuple[int, ...]]:
        return {field: self.bits(field) for field in COORDINATE_FIELDS}

    def field_of(self, bit: int) -> CoordinateField | None:
        for field in COORDINATE_FIELDS:
            if bit in self.bits(field):
                return field
        return None

    def with_fields(self, *, scheme_id: str, **fields: tuple[int, ...] | None) -> "MappingScheme":
        return self.model_copy(update={"scheme_id": scheme_id, **fields})


class SchemeFile(BaseModel):
    """On-disk scheme layout: `{"scheme_id": ..., "fields": {...}, "xor_bank_sources": [...]}`."""

    scheme_id: str
    fields: dict[CoordinateField, list[int]]
    xor_bank_sources: list[int] | None = None

    def to_scheme(self) -> MappingScheme:
        return MappingScheme(
            scheme_id=self.scheme_id,
            xor_bank_sources=tuple(self.xor_bank_sources) if self.xor_bank_sources is not None else None,
            **{field.value: tuple(bits) for field, bits in self.fields.items()},
        )

    @classmethod
    def from_scheme(cls, scheme: MappingScheme) -> "SchemeFile":
        return cls(
            scheme_id=scheme.scheme_id,
            fields={field: list(bits) for field, bits in scheme.field_bits.items()},
            xor_bank_sources=list(scheme.xor_bank_sources) if scheme.xor_bank_sources is not None else None,
        )


def _runs(positions: tuple[int, ...]) -> tuple[Run, ...]:
    runs: list[list[int]] = []
    for index, position in enumerate(positions):
        if runs and position == runs[-1][0] + runs[-1][1]:
            runs[-1][1] += 1
        else:
            runs.append([position, 1, index])
    return tuple((src, width, dst) for src, width, dst in runs)


def _gather(addr: int, runs: tuple[Run, ...]) -> int:
    value = 0
    for src, width, dst in runs:
        value |= ((addr >> src) & ((1 << width) - 1)) << dst
    return value


def _scatter(value: int, runs: tuple[Run, ...]) -> int:
    addr = 0
    for src, width, dst in runs:
        addr |= ((value >> dst) & ((1 << width) - 1)) << src
    return addr


def _gather_array(addrs: np.ndarray, runs: tuple[Run, ...]) -> np.ndarray:
    value = np.zeros(addrs.shape, dtype=np.uint64)
    for src, width, dst in runs:
        value |= ((addrs >> np.uint64(src)) & np.uint64((1 << width) - 1)) << np.uint64(dst)
    return value


def _scatter_array(value: np.ndarray, runs: tuple[Run, ...]) -> np.ndarray:
    addrs = np.zeros(value.shape, dtype=np.uint64)
    for src, width, dst in runs:
        addrs |= ((value >> np.uint64(dst)) & np.uint64((1 << width) - 1)) << np.uint64(src)
    return addrs


class _Translator:
    """Precompiled runs for one (scheme, geometry) pair."""

    def __init__(self, scheme: MappingScheme, geom: DramGeometry) -> None:
        self.geom = geom
        self.runs = {field: _runs(scheme.bits(field)) for field in COORDINATE_FIELDS}
        self.xor_runs = _runs(scheme.xor_bank_sources) if scheme.xor_bank_sources else None
        self.limits = tuple(geom.count(field) for field in COORDINATE_FIELDS)

    def decompose(self, addr: int) -> DramCoordinate:
        coord = DramCoordinate(*(_gather(addr, self.runs[field]) for field in COORDINATE_FIELDS))
        if self.xor_runs is not None:
            coord = coord._replace(bank=coord.bank ^ _gather(addr, self.xor_runs))
        return coord

    def compose(self, coord: DramCoordinate) -> int:
        for field, value, limit in zip(COORDINATE_FIELDS, coord, self.limits, strict=True):
            if not 0 <= value < limit:
                msg = f"Invalid coordinate {coord}: {field}={value} not in [0, {limit})"
                raise ValueError(msg)
        addr = 0
        for field, value in zip(COORDINATE_FIELDS, coord, strict=True):
            if field is not CoordinateField.BANK:
                addr |= _scatter(value, self.runs[field])
        bank = coord.bank
        if self.xor_runs is not None:
            bank ^= _gather(addr, self.xor_runs)
        return addr | _scatter(bank, self.runs[CoordinateField.BANK])

    def decompose_array(self, addrs: np.ndarray) -> dict[CoordinateField, np.ndarray]:
        fields = {field: _gather_array(addrs, self.runs[field]) for field in COORDINATE_FIELDS}
        if self.xor_runs is not None:
            fields[CoordinateField.BANK] ^= _gather_array(addrs, self.xor_runs)
        return fields

    def compose_array(self, fields: dict[CoordinateField, np.ndarray]) -> np.ndarray:
        shape = fields[CoordinateField.ROW].shape
        addrs = np.zeros(shape, dtype=np.uint64)
        for field in COORDINATE_FIELDS:
            if field is not CoordinateField.BANK:
                addrs |= _scatter_array(fields[field].astype(np.uint64), self.runs[field])
        bank = fields[CoordinateField.BANK].astype(np.uint64)
        if self.xor_runs is not None:
            bank = bank ^ _gather_array(addrs, self.xor_runs)
        return addrs | _scatter_array(bank, self.runs[CoordinateField.BANK])


@lru_cache(maxsize=256)
def _translator(scheme: MappingScheme, geom: DramGeometry) -> _Translator:
    violations = validate(scheme, geom)
    if violations:
        raise SchemeError(scheme.scheme_id, violations)
    return _Translator(scheme, geom)


def validate(scheme: MappingScheme, geom: DramGeometry) -> list[str]:
    """Every invariant violation of `scheme` against `geom`; an empty list means the scheme is valid."""
    violations: list[str] = []
    owner: dict[int, CoordinateField] = {}
    for field in COORDINATE_FIELDS:
        bits = scheme.bits(field)
        expected = geom.field_width(field)
        if len(bits) != expected:
            violations.append(f"{field} width {len(bits)} ≠ {expected}")
        for bit in bits:
            if bit < 0:
                violations.append(f"negative bit {bit} in {field}")
            elif bit in owner:
                violations.append(f"overlapping bit {bit} ({owner[bit]} and {field})")
            else:
                owner[bit] = field

    address_bits = geom.address_bits
    violations.extend(f"bit {bit} beyond the {address_bits}-bit address" for bit in sorted(owner) if bit >= address_bits)
    violations.extend(f"missing bit {bit}" for bit in range(address_bits) if bit not in owner)

    if scheme.xor_bank_sources is not None:
        sources = scheme.xor_bank_sources
        bank_width = geom.field_width(CoordinateField.BANK)
        if len(sources) != bank_width:
            violations.append(f"xor_bank_sources length {len(sources)} ≠ bank width {bank_width}")
        if len(set(sources)) != len(sources):
            violations.append("duplicate xor_bank_sources")
        row_bits = set(scheme.row)
        violations.extend(f"xor source bit {bit} outside the row field" for bit in sources if bit not in row_bits)
    return violations


def decompose(addr: int, scheme: MappingScheme, geom: DramGeometry) -> DramCoordinate:
    if not 0 <= addr < geom.capacity:
        msg = f"Address {addr:#x} out of range for a {geom.capacity:#x}-byte memory"
        raise ValueError(msg)
    return _translator(scheme, geom).decompose(addr)


def compose(coord: DramCoordinate, scheme: MappingScheme, geom: DramGeometry) -> int:
    return _translator(scheme, geom).compose(coord)


def decompose_array(addrs: np.ndarray, scheme: MappingScheme, geom: DramGeometry) -> dict[CoordinateField, np.ndarray]:
    """Vectorized decompose; `addrs` is converted to uint64 and range-checked."""
    addrs = np.asarray(addrs, dtype=np.uint64)
    if addrs.size and int(addrs.max()) >= geom.capacity:
        msg = f"Address {int(addrs.max()):#x} out of range for a {geom.capacity:#x}-byte memory"
        raise ValueError(msg)
    return _translator(scheme, geom).decompose_array(addrs)


def compose_array(fields: dict[CoordinateField, np.ndarray], scheme: MappingScheme, geom: DramGeometry) -> np.ndarray:
    return _translator(scheme, geom).compose_array(fields)


def location_index(coord: DramCoordinate, geom: DramGeometry) -> int:
    bank = (coord.channel * geom.ranks_per_channel + coord.rank) * geom.banks_per_rank + coord.bank
    return bank * geom.rows_per_bank + coord.row


def location_coordinate(location: int, geom: DramGeometry) -> DramCoordinate:
    """Coordinate of column 0, offset 0 in the row at `location`."""
    bank, row = divmod(location, geom.rows_per_bank)
    channel_rank, bank = divmod(bank, geom.banks_per_rank)
    channel, rank = divmod(channel_rank, geom.ranks_per_channel)
    return DramCoordinate(channel=channel, rank=rank, bank=bank, row=row)


def bank_of(location: int, geom: DramGeometry) -> int:
    """Global bank id (channel and rank folded in) of a location."""
    return location // geom.rows_per_bank


def locations_of(addrs: np.ndarray, scheme: MappingScheme, geom: DramGeometry) -> np.ndarray:
    fields = decompose_array(addrs, scheme, geom)
    bank = (
        fields[CoordinateField.CHANNEL] * np.uint64(geom.ranks_per_channel) + fields[CoordinateField.RANK]
    ) * np.uint64(geom.banks_per_rank) + fields[CoordinateField.BANK]
    return (bank * np.uint64(geom.rows_per_bank) + fields[CoordinateField.ROW]).astype(np.int64)


def location_addresses(locations: np.ndarray, scheme: MappingScheme, geom: DramGeometry) -> np.ndarray:
    """Address of column 0, offset 0 of every location under `scheme`."""
    locations = np.asarray(locations, dtype=np.int64)
    bank, row = np.divmod(locations, geom.rows_per_bank)
    channel_rank, bank = np.divmod(bank, geom.banks_per_rank)
    channel, rank = np.divmod(channel_rank, geom.ranks_per_channel)
    zeros = np.zeros(locations.shape, dtype=np.int64)
    fields = {
        CoordinateField.CHANNEL: channel,
        CoordinateField.RANK: rank,
        CoordinateField.BANK: bank,
        CoordinateField.ROW: row,
        CoordinateField.COLUMN: zeros,
        CoordinateField.OFFSET: zeros,
    }
    return compose_array(fields, scheme, geom)


def builtin_scheme(kind: SchemeKind, geom: DramGeometry) -> MappingScheme:
    """Built-in layout: baseline, permutation (baseline + lowest row bits XORed into bank) or minimalist."""
    widths = {field: geom.field_width(field) for field in COORDINATE_FIELDS}
    cursor = 0

    def take(width: int) -> tuple[int, ...]:
        nonlocal cursor
        bits = tuple(range(cursor, cursor + width))
        cursor += width
        return bits

    offset = take(widths[CoordinateField.OFFSET])
    if kind is SchemeKind.MINIMALIST:
        low_width = ceil_div(widths[CoordinateField.COLUMN], 2)
        column_low = take(low_width)
        bank = take(widths[CoordinateField.BANK])
        rank = take(widths[CoordinateField.RANK])
        channel = take(widths[CoordinateField.CHANNEL])
        column = column_low + take(widths[CoordinateField.COLUMN] - low_width)
    else:
        column = take(widths[CoordinateField.COLUMN])
        bank = take(widths[CoordinateField.BANK])
        rank = take(widths[CoordinateField.RANK])
        channel = take(widths[CoordinateField.CHANNEL])
    row = take(widths[CoordinateField.ROW])

    xor_sources = None
    if kind is SchemeKind.PERMUTATION:
        if len(row) < len(bank):
            msg = f"Permutation scheme needs at least {len(bank)} row bits, geometry has {len(row)}"
            raise ValueError(msg)
        xor_sources = row[: len(bank)]

    return MappingScheme(
        scheme_id=kind.value,
        channel=channel,
        rank=rank,
        bank=bank,
        row=row,
        column=column,
        offset=offset,
        xor_bank_sources=xor_sources,
    )


def load_scheme(path: str | Path, geom: DramGeometry | None = None) -> MappingScheme:
    scheme = SchemeFile.model_validate(FileUtils.read_config_file(path)).to_scheme()
    if geom is not None:
        violations = validate(scheme, geom)
        if violations:
            raise SchemeError(scheme.scheme_id, violations)
    return scheme


def dump_scheme(scheme: MappingScheme, path: str | Path) -> Path:
    return FileUtils.write_data_to_file(path, SchemeFile.from_scheme(scheme).model_dump(mode="json"))


def resolve_scheme(name: str, geom: DramGeometry) -> MappingScheme:
    """A built-in scheme by kind name, or a scheme file path."""
    if name in set(SchemeKind):
        return builtin_scheme(SchemeKind(name), geom)
    path = Path(name)
    if not path.exists():
        msg = f"Unknown scheme {name!r}: not a built-in kind ({', '.join(SchemeKind)}) nor a file"
        raise ValueError(msg)
    return load_scheme(path, geom)
