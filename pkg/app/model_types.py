try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__


class SchemeKind(StrEnum):
    BASELINE = "baseline"
    PERMUTATION = "permutation"
    MINIMALIST = "minimalist"


class CoordinateField(StrEnum):
    CHANNEL = "channel"
    RANK = "rank"
    BANK = "bank"
    ROW = "row"
    COLUMN = "column"
    OFFSET = "offset"


class ControllerKind(StrEnum):
    FIXED = "fixed"
    DREAM_ONLINE = "dream-online"
    DREAM_OFFLINE = "dream-offline"


class CostScenario(StrEnum):
    IN_DRAM = "in-dram"
    OFFLINE_REBOOT = "offline-reboot"
    NVDIMM_BULK = "nvdimm-bulk"
    NANO_COMMIT = "nano-commit"


class AccessClass(StrEnum):
    HIT = "hit"
    EMPTY = "empty"
    CONFLICT = "conflict"


class DecisionAction(StrEnum):
    KEEP = "keep"
    ADOPT = "adopt"
    ROLLBACK = "rollback"


class RelocationKind(StrEnum):
    MIGRATE = "migrate"
    SWAP = "swap"
    ROLLBACK_MOVE = "rollback-move"


class RequestOp(StrEnum):
    READ = "R"
    WRITE = "W"


class TraceKind(StrEnum):
    SEQUENTIAL = "sequential"
    STRIDED = "strided"
    RANDOM = "random"
    PHASE_SWITCH = "phase-switch"
    MIX = "mix"


# Field order used when laying out a scheme from the least significant bit upwards.
COORDINATE_FIELDS: tuple[CoordinateField, ...] = (
    CoordinateField.CHANNEL,
    CoordinateField.RANK,
    CoordinateField.BANK,
    CoordinateField.ROW,
    CoordinateField.COLUMN,
    CoordinateField.OFFSET,
)

DEFAULT_BASELINE_NAME = "fixed:baseline"
