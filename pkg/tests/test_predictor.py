import itertools

import numpy as np
import pytest

from app.addrmap import DramGeometry, MappingScheme, builtin_scheme, validate
from app.model_types import CoordinateField, DecisionAction, SchemeKind
from app.monitor import BitChangeSignature
from app.predictor import (
    MappingPredictor,
    PredictorConfig,
    decide,
    estimate_checked,
    estimate_mapping,
    improvement,
    score,
    write_decisions_csv,
)
from tests.helpers import signature

CFG = PredictorConfig()

# bank bits 14 and 15 stay busy so only bit 13 can trade places with the hot row bit 20
HOT_ROW_BIT = {14: 2000, 15: 2000}


def with_improvement(gain_per_mille: int, window_id: int) -> BitChangeSignature:
    """Signature whose best EAMS improves on the baseline by gain_per_mille / 1000."""
    if gain_per_mille == 0:
        return signature({13: 10, 14: 10, 15: 10}, window_id=window_id)
    return signature({**HOT_ROW_BIT, 20: 1000, 13: 1000 - gain_per_mille}, window_id=window_id)


def test_score_of_silent_signature(baseline: MappingScheme, permutation: MappingScheme) -> None:
    sig = signature({})
    assert score(sig, baseline) == 0
    assert score(sig, permutation) == 0


def test_score_example(baseline: MappingScheme) -> None:
    sig = signature({20: 90}, requests=100)
    assert score(sig, baseline) == pytest.approx(90 / (99 * 16))

    swapped = baseline.with_fields(
        scheme_id="swapped",
        bank=(20, 14, 15),
        row=(16, 17, 18, 19, 13, *range(21, 32)),
    )
    assert score(sig, swapped) == 0


def test_score_rejects_narrow_signature(baseline: MappingScheme) -> None:
    with pytest.raises(ValueError, match="covers 16 bits"):
        score(signature({}, address_bits=16), baseline)


def test_uniform_signature_keeps_base(baseline: MappingScheme) -> None:
    sig = signature(dict.fromkeys(range(32), 7))
    eams = estimate_mapping(sig, baseline, CFG)
    assert eams.field_bits == baseline.field_bits


def test_hot_row_bit_moves_to_bank(baseline: MappingScheme) -> None:
    sig = signature({20: 90, 13: 1, 14: 2, 15: 3}, requests=101)
    eams = estimate_mapping(sig, baseline, CFG)
    assert 20 in eams.bank
    assert 13 in eams.row
    assert eams.bank == (20, 14, 15)  # bits keep their base-field precedence inside the new field
    assert eams.column == baseline.column
    assert eams.offset == baseline.offset
    assert improvement(sig, baseline, eams) == pytest.approx(89 / 90)


def test_frozen_columns_never_move(baseline: MappingScheme, rng: np.random.Generator) -> None:
    for _ in range(50):
        sig = signature({bit: int(c) for bit, c in enumerate(rng.integers(0, 5000, size=32))})
        assert estimate_mapping(sig, baseline, CFG).column == baseline.column


def test_unfrozen_columns_take_busiest_bits(baseline: MappingScheme, geom: DramGeometry) -> None:
    sig = signature({6: 0, 7: 0, 20: 4000, 21: 4000})
    eams = estimate_checked(sig, baseline, PredictorConfig(freeze_column_bits=False), geom)
    assert {20, 21} <= set(eams.column)
    assert {6, 7} <= set(eams.bank)


@pytest.mark.parametrize("kind", list(SchemeKind))
def test_estimates_are_valid(kind: SchemeKind, geom: DramGeometry, rng: np.random.Generator) -> None:
    base = builtin_scheme(kind, geom)
    for _ in range(100):
        sig = signature({bit: int(c) for bit, c in enumerate(rng.integers(0, 5000, size=32))})
        for cfg in (CFG, PredictorConfig(freeze_column_bits=False)):
            eams = estimate_checked(sig, base, cfg, geom)
            assert validate(eams, geom) == []
            assert (eams.xor_bank_sources is None) == (base.xor_bank_sources is None)
            assert score(sig, eams) <= score(sig, base)


def test_assignment_is_optimal_for_small_pools(tiny_geom: DramGeometry, tiny_baseline: MappingScheme) -> None:
    rng = np.random.default_rng(7)
    pool = tiny_baseline.row + tiny_baseline.bank  # 8 reorderable bits
    row_width = len(tiny_baseline.row)
    for _ in range(1000):
        counts = rng.integers(0, 50, size=tiny_geom.address_bits)
        sig = signature({bit: int(c) for bit, c in enumerate(counts)}, address_bits=tiny_geom.address_bits)
        eams = estimate_mapping(sig, tiny_baseline, CFG)
        best = min(sum(int(counts[bit]) for bit in rows) for rows in itertools.combinations(pool, row_width))
        assert sum(int(counts[bit]) for bit in eams.row) == best


def test_scale_invariance(baseline: MappingScheme, rng: np.random.Generator) -> None:
    stream = [
        signature({bit: int(c) for bit, c in enumerate(rng.integers(0, 3000, size=32))}, window_id=i)
        for i in range(20)
    ]
    scaled = [sig.scaled(3) for sig in stream]
    for sig, big in zip(stream, scaled, strict=True):
        assert estimate_mapping(sig, baseline, CFG) == estimate_mapping(big, baseline, CFG)
    assert [d.action for d in decide(stream, baseline)] == [d.action for d in decide(scaled, baseline)]


def test_improvement_helper_signatures(baseline: MappingScheme) -> None:
    for per_mille in (0, 69, 200):
        sig = with_improvement(per_mille, 0)
        eams = estimate_mapping(sig, baseline, CFG)
        assert improvement(sig, baseline, eams) == pytest.approx(per_mille / 1000)


def test_below_threshold_never_adopts(baseline: MappingScheme) -> None:
    decisions = decide([with_improvement(69, i) for i in range(10)], baseline)
    assert {d.action for d in decisions} == {DecisionAction.KEEP}
    assert all(d.streak == 0 for d in decisions)


def test_adopt_after_consistent_windows(baseline: MappingScheme) -> None:
    decisions = decide([with_improvement(200, i) for i in range(3)], baseline)
    assert [d.action for d in decisions] == [DecisionAction.KEEP, DecisionAction.KEEP, DecisionAction.ADOPT]
    assert [d.streak for d in decisions[:2]] == [1, 2]
    adopted = decisions[-1].scheme
    assert 20 in adopted.bank


def test_streak_resets(baseline: MappingScheme) -> None:
    gains = [200, 0, 200, 200, 200]
    decisions = decide([with_improvement(g, i) for i, g in enumerate(gains)], baseline)
    assert [d.action for d in decisions].index(DecisionAction.ADOPT) == 4


def test_rollback_when_active_scheme_stops_improving(baseline: MappingScheme) -> None:
    stream = [with_improvement(200, i) for i in range(3)] + [with_improvement(0, 3)]
    decisions = decide(stream, baseline)
    assert decisions[-1].action is DecisionAction.ROLLBACK
    assert decisions[-1].scheme == baseline


def test_third_scheme_after_rollback(baseline: MappingScheme) -> None:
    gains = [200, 200, 200, 0, 200, 200, 200]
    actions = [d.action for d in decide([with_improvement(g, i) for i, g in enumerate(gains)], baseline)]
    assert actions.count(DecisionAction.ADOPT) == 2
    assert actions[3] is DecisionAction.ROLLBACK


def test_base_optimal_stream_never_adopts(baseline: MappingScheme) -> None:
    # sequential-like rates: the row field already holds the quietest bits
    counts = {bit: 5000 >> (bit - 6) for bit in range(6, 32)}
    decisions = decide([signature(counts, window_id=i) for i in range(10)], baseline)
    assert all(d.action is DecisionAction.KEEP for d in decisions)
    assert all(d.improvement == 0 for d in decisions)


def test_decisions_are_deterministic(baseline: MappingScheme, rng: np.random.Generator) -> None:
    stream = [
        signature({bit: int(c) for bit, c in enumerate(rng.integers(0, 3000, size=32))}, window_id=i)
        for i in range(30)
    ]
    assert decide(stream, baseline) == decide(stream, baseline)


def test_predictor_holds_during_rollback(baseline: MappingScheme) -> None:
    predictor = MappingPredictor(base=baseline)
    for i in range(3):
        predictor.step(with_improvement(200, i))
    assert predictor.active is not None
    assert predictor.step(with_improvement(0, 3)).action is DecisionAction.ROLLBACK
    assert predictor.rolling_back
    assert predictor.current == baseline

    held = [predictor.step(with_improvement(200, i)) for i in range(4, 8)]
    assert {d.action for d in held} == {DecisionAction.KEEP}

    predictor.rollback_complete()
    assert predictor.active is None
    with pytest.raises(RuntimeError, match="no rollback"):
        predictor.rollback_complete()


def test_predictor_config_bounds() -> None:
    with pytest.raises(ValueError, match="improvement_threshold"):
        PredictorConfig(improvement_threshold=1.5)
    with pytest.raises(ValueError, match="consistency_windows"):
        PredictorConfig(consistency_windows=0)


def test_decision_log(tmp_path, baseline: MappingScheme) -> None:  # noqa: ANN001
    decisions = decide([with_improvement(200, i) for i in range(3)], baseline)
    lines = write_decisions_csv(tmp_path / "decisions.csv", decisions).read_text().splitlines()
    assert lines[0] == "window_id,action,improvement,streak,scheme_id"
    assert lines[3] == "2,adopt,0.200000,3,baseline-eams-w2"


def test_field_order_is_row_first(baseline: MappingScheme) -> None:
    sig = signature({})
    eams = estimate_mapping(sig, baseline, CFG)
    assert eams.bits(CoordinateField.ROW) == baseline.row
