"""Estimated address-mapping schemes and the adopt / keep / rollback protocol."""

from collections.abc import Iterable
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field

from app.addrmap import DramGeometry, MappingScheme, SchemeError, validate
from app.files import FileUtils
from app.logger import base_logger
from app.model_types import CoordinateField, DecisionAction
from app.monitor import BitChangeSignature

logger = base_logger.getChild(__name__)

DECISION_CSV_HEADER = ("window_id", "action", "improvement", "streak", "scheme_id")

# Tie-break preference for a bit's field in the base scheme, and the order fields are filled.
_FIELD_RANK = {
    CoordinateField.ROW: 0,
    CoordinateField.BANK: 1,
    CoordinateField.RANK: 2,
    CoordinateField.CHANNEL: 3,
    CoordinateField.COLUMN: 4,
}
_FILL_ORDER = (CoordinateField.ROW, CoordinateField.BANK, CoordinateField.RANK, CoordinateField.CHANNEL)


class PredictorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    improvement_threshold: float = Field(default=0.07, gt=0.0, lt=1.0)
    consistency_windows: int = Field(default=3, ge=1)
    freeze_column_bits: bool = True


class Decision(BaseModel):
    model_config = ConfigDict(frozen=True)

    window_id: int
    action: DecisionAction
    improvement: float
    streak: int
    scheme: MappingScheme  # scheme the controller should map with after this window

    def csv_row(self) -> tuple[int, str, str, int, str]:
        return (self.window_id, self.action.value, f"{self.improvement:.6f}", self.streak, self.scheme.scheme_id)


def _check_width(sig: BitChangeSignature, scheme: MappingScheme) -> None:
    highest = max(bit for bits in scheme.field_bits.values() for bit in bits)
    if highest >= sig.address_bits:
        msg = f"Signature covers {sig.address_bits} bits but scheme {scheme.scheme_id!r} uses bit {highest}"
        raise ValueError(msg)


def row_change_count(sig: BitChangeSignature, scheme: MappingScheme) -> int:
    _check_width(sig, scheme)
    return sum(sig.counters[bit] for bit in scheme.row)


def score(sig: BitChangeSignature, scheme: MappingScheme) -> float:
    """Mean change rate of the row-field bits; lower is better."""
    total = row_change_count(sig, scheme)
    if sig.requests_observed < 2 or not scheme.row:  # noqa: PLR2004
        return 0.0
    return total / ((sig.requests_observed - 1) * len(scheme.row))


def improvement(sig: BitChangeSignature, base: MappingScheme, candidate: MappingScheme) -> float:
    """Relative reduction of the row-field change count; 0 when the base row field never changes."""
    base_total = row_change_count(sig, base)
    if base_total == 0:
        return 0.0
    # Both schemes have the same row width, so the ratio of raw counts equals the ratio of scores.
    return (base_total - row_change_count(sig, candidate)) / base_total


def estimate_mapping(sig: BitChangeSignature, base: MappingScheme, cfg: PredictorConfig) -> MappingScheme:
    _check_width(sig, base)
    # fields are filled in this order; column bits only take part when they are not frozen
    reorderable = [*_FILL_ORDER] if cfg.freeze_column_bits else [*_FILL_ORDER, CoordinateField.COLUMN]

    def origin(bit: int) -> tuple[int, int, int]:
        field = base.field_of(bit)
        return (_FIELD_RANK[field], base.bits(field).index(bit), bit)

    pool = [bit for field in reorderable for bit in base.bits(field)]
    ranked = sorted(pool, key=lambda bit: (sig.counters[bit], *origin(bit)))

    assigned: dict[CoordinateField, tuple[int, ...]] = {}
    cursor = 0
    for field in reorderable:
        width = len(base.bits(field))
        chosen = ranked[cursor : cursor + width]
        if len(chosen) != width:
            msg = f"Reorderable pool of {len(pool)} bits cannot fill the {field} field"
            raise ValueError(msg)
        assigned[field] = tuple(sorted(chosen, key=origin))
        cursor += width

    row = assigned[CoordinateField.ROW]
    xor_sources = row[: len(assigned[CoordinateField.BANK])] if base.xor_bank_sources is not None else None
    return base.with_fields(
        scheme_id=f"{base.scheme_id}-eams-w{sig.window_id}",
        xor_bank_sources=xor_sources,
        **{field.value: bits for field, bits in assigned.items()},
    )


def estimate_checked(
    sig: BitChangeSignature,
    base: MappingScheme,
    cfg: PredictorConfig,
    geom: DramGeometry,
) -> MappingScheme:
    eams = estimate_mapping(sig, base, cfg)
    violations = validate(eams, geom)
    if violations:
        raise SchemeError(eams.scheme_id, violations)
    return eams


class MappingPredictor:
    """Decision state machine for one controller; `step` is called once per finished window."""

    def __init__(self, *, base: MappingScheme, config: PredictorConfig | None = None) -> None:
        self.logger = base_logger.getChild(self.__class__.__name__)
        self.base = base
        self.config = config or PredictorConfig()
        self.active: MappingScheme | None = None
        self.streak = 0
        self.rolling_back = False

    @property
    def current(self) -> MappingScheme:
        return self.active if self.active is not None and not self.rolling_back else self.base

    def step(self, sig: BitChangeSignature) -> Decision:
        threshold = self.config.improvement_threshold

        if self.rolling_back:
            # no new scheme until every migrated row is back home
            self.streak = 0
            gain = improvement(sig, self.base, estimate_mapping(sig, self.base, self.config))
            return self._decision(sig, DecisionAction.KEEP, gain, self.base)

        if self.active is not None:
            gain = improvement(sig, self.base, self.active)
            if gain <= threshold:
                self.rolling_back = True
                self.streak = 0
                self.logger.info(
                    "Window %d: %s improves only %.4f, rolling back",
                    sig.window_id,
                    self.active.scheme_id,
                    gain,
                )
                return self._decision(sig, DecisionAction.ROLLBACK, gain, self.base)
            return self._decision(sig, DecisionAction.KEEP, gain, self.active)

        eams = estimate_mapping(sig, self.base, self.config)
        gain = improvement(sig, self.base, eams)
        self.streak = self.streak + 1 if gain > threshold else 0
        if self.streak >= self.config.consistency_windows:
            decision = self._decision(sig, DecisionAction.ADOPT, gain, eams)
            self.active = eams
            self.streak = 0
            self.logger.info("Window %d: adopting %s (improvement %.4f)", sig.window_id, eams.scheme_id, gain)
            return decision
        self.logger.debug("Window %d: keep, improvement %.4f (streak %d)", sig.window_id, gain, self.streak)
        return self._decision(sig, DecisionAction.KEEP, gain, self.base)

    def rollback_complete(self) -> None:
        if not self.rolling_back:
            msg = "rollback_complete called with no rollback in progress"
            raise RuntimeError(msg)
        self.logger.info("Rollback of %s complete", self.active.scheme_id if self.active else "scheme")
        self.active = None
        self.rolling_back = False

    def _decision(self, sig: BitChangeSignature, action: DecisionAction, gain: float, scheme: MappingScheme) -> Decision:
        return Decision(window_id=sig.window_id, action=action, improvement=gain, streak=self.streak, scheme=scheme)


def decide(
    window_stream: Iterable[BitChangeSignature],
    base: MappingScheme,
    cfg: PredictorConfig | None = None,
) -> list[Decision]:
    """Decision stream for a window stream, treating every rollback as completing immediately."""
    predictor = MappingPredictor(base=base, config=cfg)
    decisions = []
    for sig in window_stream:
        decision = predictor.step(sig)
        if decision.action is DecisionAction.ROLLBACK:
            predictor.rollback_complete()
        decisions.append(decision)
    return decisions


def write_decisions_csv(path: str | Path, decisions: Iterable[Decision]) -> Path:
    return FileUtils.write_csv(path, DECISION_CSV_HEADER, (decision.csv_row() for decision in decisions))
