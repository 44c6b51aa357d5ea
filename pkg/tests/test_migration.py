import numpy as np
import pytest

from app.addrmap import DramGeometry, MappingScheme
from app.migration import (
    RELOCATION_CSV_HEADER,
    SWAP_MEM_CYCLES,
    CostModel,
    IntegrityError,
    MigrationState,
    RelocationEvent,
    RelocationLog,
    mapping_change_cost,
    relocation_cost,
    table_storage,
)
from app.model_types import CostScenario, RelocationKind
from tests.helpers import shuffled_rows

ROWS = 64  # rows per bank in the tiny geometry


def address(bank: int, row: int) -> int:
    """Address of column 0 in (bank, row) under the tiny baseline."""
    return (row << 10) | (bank << 8)


def location(bank: int, row: int) -> int:
    return bank * ROWS + row


@pytest.fixture
def bank_swap(tiny_baseline: MappingScheme) -> MappingScheme:
    # bank <- low row bits, low row bits <- bank: (b, r) moves to (r & 3, b | r & ~3)
    return tiny_baseline.with_fields(scheme_id="bank-swap", bank=(10, 11), row=(8, 9, 12, 13, 14, 15))


@pytest.fixture
def row_swap(tiny_baseline: MappingScheme) -> MappingScheme:
    # rows only trade places inside their bank
    return tiny_baseline.with_fields(scheme_id="row-swap", row=(11, 10, 12, 13, 14, 15))


@pytest.fixture
def state(tiny_geom: DramGeometry, tiny_baseline: MappingScheme) -> MigrationState:
    return MigrationState(geom=tiny_geom, pams=tiny_baseline)


def apply(shadow: np.ndarray, events: list[RelocationEvent]) -> None:
    for event in events:
        if event.kind is not RelocationKind.MIGRATE:
            a, b = event.src_location, event.dst_location
            shadow[a], shadow[b] = shadow[b], shadow[a]


def test_inactive_state_resolves_home(state: MigrationState) -> None:
    assert state.resolve(address(2, 5)) == (location(2, 5), [])
    assert state.locate(location(2, 5)) == location(2, 5)


def test_swap_example(state: MigrationState, bank_swap: MappingScheme) -> None:
    state.activate(bank_swap)
    row_a, row_b = location(0, 1), location(1, 0)
    assert state.dest(row_a) == row_b
    assert state.dest(row_b) == row_a

    served, events = state.resolve(address(0, 1))
    assert served == row_a
    assert events == [
        RelocationEvent(
            kind=RelocationKind.SWAP,
            src_location=row_a,
            dst_location=row_b,
            inter_bank=True,
            mem_cycles=SWAP_MEM_CYCLES,
        ),
    ]
    assert state.mt[row_a]
    assert not state.st[row_a]
    assert state.st[row_b]
    assert state.locate(row_a) == row_b
    assert state.locate(row_b) == row_a
    state.check_residency()

    # B now sits at its own destination
    served, events = state.resolve(address(1, 0))
    assert (served, events) == (row_a, [])
    assert state.mt[row_b]
    assert not state.st[row_b]
    state.check_residency()


def test_self_mapped_row(state: MigrationState, bank_swap: MappingScheme) -> None:
    state.activate(bank_swap)
    home = location(2, 6)  # 6 & 3 == 2
    assert state.dest(home) == home
    for _ in range(3):
        assert state.resolve_home(home) == (home, [])
    assert state.mt[home]
    assert state.stats.self_mapped == 1
    assert state.stats.swaps == 0


def test_migrated_row_is_not_moved_again(state: MigrationState, bank_swap: MappingScheme) -> None:
    state.activate(bank_swap)
    home = location(0, 1)
    _, first = state.resolve_home(home)
    served, second = state.resolve_home(home)
    assert len(first) == 1
    assert second == []
    assert served == location(1, 0)
    assert state.stats.swaps == 1


def test_intra_bank_migration_is_recorded_once(state: MigrationState, row_swap: MappingScheme) -> None:
    state.activate(row_swap)
    home = location(0, 1)
    assert state.dest(home) == location(0, 2)

    served, events = state.resolve_home(home)
    assert served == home
    assert events == [
        RelocationEvent(
            kind=RelocationKind.MIGRATE,
            src_location=home,
            dst_location=location(0, 2),
            inter_bank=False,
            mem_cycles=0,
        ),
    ]
    assert state.resolve_home(home) == (home, [])
    assert not state.mt[home]
    assert state.stats.intra == 1
    assert state.stats.inter == 0
    assert state.stats.mem_cycles == 0
    np.testing.assert_array_equal(state.residency, np.arange(256))


def test_random_accesses_conserve_rows(
    tiny_geom: DramGeometry,
    tiny_baseline: MappingScheme,
    rng: np.random.Generator,
) -> None:
    for trial in range(20):
        state = MigrationState(geom=tiny_geom, pams=tiny_baseline)
        state.activate(shuffled_rows(tiny_baseline, rng, scheme_id=f"shuffled-{trial}"))
        shadow = np.arange(tiny_geom.locations)  # location -> row
        for home in rng.integers(0, tiny_geom.locations, size=400):
            served, events = state.resolve_home(int(home))
            assert shadow[served] == home
            apply(shadow, events)
            assert shadow[state.locate(int(home))] == home
            assert not (state.mt & state.st).any()
        np.testing.assert_array_equal(state.residency, shadow)
        state.check_residency()


def test_rollback_restores_every_row(
    tiny_geom: DramGeometry,
    tiny_baseline: MappingScheme,
    rng: np.random.Generator,
) -> None:
    for trial in range(10):
        state = MigrationState(geom=tiny_geom, pams=tiny_baseline)
        state.activate(shuffled_rows(tiny_baseline, rng, scheme_id=f"shuffled-{trial}"))
        shadow = np.arange(tiny_geom.locations)
        for home in rng.integers(0, tiny_geom.locations, size=300):
            apply(shadow, state.resolve_home(int(home))[1])
        assert state.migrated_rows > 0

        state.begin_rollback()
        for _ in range(10 * tiny_geom.locations):
            if state.rollback_done:
                break
            home = int(rng.integers(0, tiny_geom.locations))
            served, events = state.resolve_home(home)
            assert events == []  # no new migrations while rolling back
            assert shadow[served] == home
            moves = state.rollback_step(1)
            assert all(event.kind is RelocationKind.ROLLBACK_MOVE for event in moves)
            apply(shadow, moves)
        assert state.rollback_done
        assert not state.active
        assert not state.mt.any()
        assert not state.st.any()
        np.testing.assert_array_equal(shadow, np.arange(tiny_geom.locations))
        assert all(state.locate(home) == home for home in range(tiny_geom.locations))


def test_rollback_with_nothing_migrated(state: MigrationState, bank_swap: MappingScheme) -> None:
    state.activate(bank_swap)
    state.begin_rollback()
    assert state.rollback_step(1) == []
    assert state.rollback_done
    assert state.eams is None


def test_rollback_of_one_swap(state: MigrationState, bank_swap: MappingScheme) -> None:
    state.activate(bank_swap)
    state.resolve_home(location(0, 1))
    state.begin_rollback()
    events = state.rollback_step(4)
    assert len(events) == 1
    assert events[0].kind is RelocationKind.ROLLBACK_MOVE
    assert events[0].mem_cycles == SWAP_MEM_CYCLES
    assert events[0].inter_bank
    assert state.rollback_done
    assert state.stats.rollbacks == 1


def test_rollback_of_a_fully_migrated_cycle(state: MigrationState, bank_swap: MappingScheme) -> None:
    state.activate(bank_swap)
    state.resolve_home(location(0, 1))
    state.resolve_home(location(1, 0))
    state.begin_rollback()
    events = state.rollback_step(4)
    assert len(events) == 1
    assert state.rollback_done
    np.testing.assert_array_equal(state.residency, np.arange(256))


def test_rollback_step_requires_rollback(state: MigrationState, bank_swap: MappingScheme) -> None:
    with pytest.raises(RuntimeError, match="No active mapping"):
        state.begin_rollback()
    state.activate(bank_swap)
    with pytest.raises(RuntimeError, match="no rollback in progress"):
        state.rollback_step(1)


def test_corrupted_residency_is_detected(state: MigrationState, bank_swap: MappingScheme) -> None:
    state.activate(bank_swap)
    state.resolve_home(location(0, 1))
    state.residency[[0, 1]] = state.residency[[1, 0]]
    with pytest.raises(IntegrityError, match="Row 0"):
        state.check_residency()

    state.begin_rollback()
    with pytest.raises(IntegrityError, match="away from their PAMS homes"):
        state.rollback_step(1)


def test_activate_rejects_non_bijective_scheme(state: MigrationState, tiny_baseline: MappingScheme) -> None:
    # row bit 10 goes to the column field, so two homes land on one location
    lossy = tiny_baseline.with_fields(scheme_id="lossy", column=(6, 10), row=(7, 11, 12, 13, 14, 15))
    with pytest.raises(ValueError, match="one-to-one"):
        state.activate(lossy)
    assert not state.active


def test_activate_twice(state: MigrationState, bank_swap: MappingScheme, row_swap: MappingScheme) -> None:
    state.activate(bank_swap)
    with pytest.raises(RuntimeError, match="Cannot activate"):
        state.activate(row_swap)


def test_stats_and_breakdown(state: MigrationState, bank_swap: MappingScheme) -> None:
    state.activate(bank_swap)
    state.resolve_home(location(0, 1))
    state.resolve_home(location(2, 6))
    stats = state.stats
    assert (stats.inter, stats.intra, stats.swaps, stats.self_mapped) == (1, 0, 1, 1)
    assert stats.mem_cycles == SWAP_MEM_CYCLES
    assert stats.breakdown() == {"inter_bank_fraction": 1.0, "rollback_fraction": 0.0}
    assert state.migrated_rows == 2


def swap_event(mem_cycles: int, kind: RelocationKind = RelocationKind.SWAP) -> RelocationEvent:
    return RelocationEvent(kind=kind, src_location=0, dst_location=64, inter_bank=True, mem_cycles=mem_cycles)


@pytest.mark.parametrize(("mem_cycles", "cpu_cycles"), [(128, 512), (64, 256), (0, 0)])
def test_in_dram_cost(mem_cycles: int, cpu_cycles: int, geom: DramGeometry) -> None:
    cost = relocation_cost(swap_event(mem_cycles), CostModel(), geom)
    assert cost.cpu_cycles == cpu_cycles


def test_nanocommit_cost(geom: DramGeometry) -> None:
    model = CostModel(scenario=CostScenario.NANO_COMMIT)
    assert relocation_cost(swap_event(128), model, geom).seconds == pytest.approx(96e-9)
    assert relocation_cost(swap_event(64, RelocationKind.MIGRATE), model, geom).seconds == pytest.approx(48e-9)
    assert relocation_cost(swap_event(0, RelocationKind.MIGRATE), model, geom).cpu_cycles == 0
    assert relocation_cost(swap_event(128), model, geom).cpu_cycles == pytest.approx(96e-9 * 3.2e9)


def test_bulk_scenarios_charge_per_mapping_change(geom: DramGeometry) -> None:
    nvdimm = CostModel(scenario=CostScenario.NVDIMM_BULK)
    assert relocation_cost(swap_event(128), nvdimm, geom).cpu_cycles == 0
    change = mapping_change_cost(nvdimm, geom)
    assert change.seconds == pytest.approx(2.0)
    assert change.cpu_cycles == pytest.approx(6.4e9)

    reboot = CostModel(scenario=CostScenario.OFFLINE_REBOOT, reboot_penalty_s=30.0)
    assert mapping_change_cost(reboot, geom).seconds == 30.0
    assert mapping_change_cost(reboot, geom).cpu_cycles == 0
    assert mapping_change_cost(CostModel(), geom).cpu_cycles == 0


def test_table_storage(geom: DramGeometry) -> None:
    storage = table_storage(geom)
    assert storage["bytes"] == 131_072
    assert storage["fraction"] == 2 / 65_536
    assert table_storage(DramGeometry(banks_per_rank=1, rows_per_bank=1))["bits"] == 2
    doubled = table_storage(DramGeometry(rows_per_bank=2 * geom.rows_per_bank))
    assert doubled["bits"] == 2 * storage["bits"]


def test_relocation_csv(tmp_path, tiny_geom: DramGeometry, state: MigrationState, bank_swap: MappingScheme) -> None:  # noqa: ANN001
    state.activate(bank_swap)
    log = RelocationLog()
    log.extend(state.resolve_home(location(0, 1))[1])
    lines = log.write_csv(tmp_path / "relocations.csv", tiny_geom).read_text().splitlines()
    assert lines[0] == ",".join(RELOCATION_CSV_HEADER)
    assert lines[1] == "0,swap,0,1,1,0,1,128"
