import numpy as np

from app.addrmap import DramGeometry, MappingScheme
from app.model_types import COORDINATE_FIELDS, CoordinateField
from app.monitor import BitChangeSignature


def random_scheme(
    geom: DramGeometry,
    rng: np.random.Generator,
    *,
    xor: bool = False,
    scheme_id: str = "random",
) -> MappingScheme:
    """Random assignment of every address bit to a field, in random order within each field."""
    bits = [int(bit) for bit in rng.permutation(geom.address_bits)]
    fields: dict[str, tuple[int, ...]] = {}
    cursor = 0
    for field in COORDINATE_FIELDS:
        width = geom.field_width(field)
        fields[field.value] = tuple(bits[cursor : cursor + width])
        cursor += width
    bank_width = geom.field_width(CoordinateField.BANK)
    xor_sources = fields["row"][:bank_width] if xor else None
    return MappingScheme(scheme_id=scheme_id, xor_bank_sources=xor_sources, **fields)


def shuffled_rows(base: MappingScheme, rng: np.random.Generator, *, scheme_id: str = "shuffled") -> MappingScheme:
    """`base` with its row/bank/rank/channel bits redistributed at random; column and offset untouched."""
    movable = (CoordinateField.ROW, CoordinateField.BANK, CoordinateField.RANK, CoordinateField.CHANNEL)
    pool = [int(bit) for bit in rng.permutation([bit for field in movable for bit in base.bits(field)])]
    fields = {}
    for field in movable:
        width = len(base.bits(field))
        fields[field.value] = tuple(pool[:width])
        pool = pool[width:]
    return base.with_fields(scheme_id=scheme_id, **fields)


def signature(counts: dict[int, int], *, address_bits: int = 32, requests: int = 5000, window_id: int = 0) -> BitChangeSignature:
    counters = [0] * address_bits
    for bit, count in counts.items():
        counters[bit] = count
    return BitChangeSignature(counters=tuple(counters), requests_observed=requests, window_id=window_id)


def brute_force_counts(addrs: list[int], address_bits: int) -> list[int]:
    counts = [0] * address_bits
    for previous, current in zip(addrs, addrs[1:], strict=False):
        for bit in range(address_bits):
            if ((previous ^ current) >> bit) & 1:
                counts[bit] += 1
    return counts
