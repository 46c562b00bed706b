"""
Exception hierarchy for the geohealth-gnn pipeline.

Every error carries the CLI exit code of its category so the command
line layer can translate failures without inspecting messages.
"""

from typing import Any, Optional


class GeoHealthError(Exception):
    """Base class for all pipeline errors"""

    exit_code = 1

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context
        for key, value in context.items():
            setattr(self, key, value)

    @property
    def name(self) -> str:
        return type(self).__name__


class InputError(GeoHealthError):
    exit_code = 2


class NumericFailure(GeoHealthError):
    exit_code = 3


class ConfigError(GeoHealthError):
    exit_code = 4


# === INPUT ERRORS ===

class InputFileNotFound(InputError):
    def __init__(self, path: Any):
        super().__init__(f"Input file not found: {path}", path=str(path))


class InvalidRegion(InputError):
    pass


class MissingBoundary(InputError):
    pass


class DegenerateGeometry(InputError):
    pass


class DuplicateCentroid(InputError):
    pass


class KTooLarge(InputError):
    pass


class EmptyTestSet(InputError):
    pass


class MissingColumn(InputError):
    pass


class NonNumericCell(InputError):
    def __init__(self, row: int, column: str, value: str):
        super().__init__(f"Non-numeric value {value!r} at row {row}, column {column!r}",
                         row=row, column=column, value=value)


class RegionIdMismatch(InputError):
    pass


class MissingRegion(InputError):
    def __init__(self, region_id: str, source: Optional[str] = None):
        where = f" in {source}" if source else ""
        super().__init__(f"Region {region_id!r} missing{where}", region_id=region_id)


class RaggedRows(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class UnknownGroup(InputError):
    pass


class GraphTooSmall(InputError):
    pass


class EmptyMask(InputError):
    pass


class EmptyTrainMask(InputError):
    pass


class EmptyTrainSet(InputError):
    pass


class UntrainedModel(InputError):
    pass


# === NUMERIC FAILURES ===

class TooFewRows(NumericFailure):
    pass


class AlreadyStandardized(NumericFailure):
    pass


class DimTooLarge(NumericFailure):
    pass


class RankDeficient(NumericFailure):
    pass


class NonConvergence(NumericFailure):
    pass


class DegenerateData(NumericFailure):
    pass


class NoRecordedForward(NumericFailure):
    pass


class LeakageDetected(NumericFailure):
    pass


# === CONFIG ERRORS ===

class InvalidConfig(ConfigError):
    pass


class MissingSeed(ConfigError):
    def __init__(self):
        super().__init__("A seed is required (pass --seed or set 'seed' in the config file)")
