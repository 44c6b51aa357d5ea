import numpy as np
import pytest

from app.addrmap import DramGeometry, MappingScheme, builtin_scheme
from app.model_types import SchemeKind


@pytest.fixture
def geom() -> DramGeometry:
    return DramGeometry()


@pytest.fixture
def tiny_geom() -> DramGeometry:
    """4 banks x 64 rows x 4 lines of 64 bytes: 16 address bits, 256 row locations."""
    return DramGeometry(banks_per_rank=4, rows_per_bank=64, columns_per_row=4, line_size=64)


@pytest.fixture
def baseline(geom: DramGeometry) -> MappingScheme:
    return builtin_scheme(SchemeKind.BASELINE, geom)


@pytest.fixture
def permutation(geom: DramGeometry) -> MappingScheme:
    return builtin_scheme(SchemeKind.PERMUTATION, geom)


@pytest.fixture
def tiny_baseline(tiny_geom: DramGeometry) -> MappingScheme:
    return builtin_scheme(SchemeKind.BASELINE, tiny_geom)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(2024)
