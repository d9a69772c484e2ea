"""Exception types raised across confgate.

Every error derives from :class:`ConfgateError` (itself a ``ValueError``) and
exposes a short machine-readable ``code`` used by the CLI when it reports
failures as JSON on stderr.
"""

from __future__ import annotations


class ConfgateError(ValueError):
    code = "error"

    def to_dict(self) -> dict:
        return {"error": self.code, "message": str(self)}


class ZeroVectorRow(ConfgateError):
    code = "zero_vector_row"

    def __init__(self, row: int):
        self.row = row
        super().__init__(f"embedding row {row} has (near) zero norm")


class NotNormalized(ConfgateError):
    code = "not_normalized"


class DimensionMismatch(ConfgateError):
    code = "dimension_mismatch"


class BatchTooSmall(ConfgateError):
    code = "batch_too_small"


class EmptyBag(ConfgateError):
    code = "empty_bag"


class InconsistentBatchSizes(ConfgateError):
    code = "inconsistent_batch_sizes"


class EmptyInput(ConfgateError):
    code = "empty_input"


class InvalidConfig(ConfgateError):
    code = "invalid_config"


class TooFewBatches(ConfgateError):
    code = "too_few_batches"


class ParseError(ConfgateError):
    code = "parse_error"

    def __init__(self, line: int, reason: str):
        self.line = line
        super().__init__(f"line {line}: {reason}")


class SeverityOutOfRange(ConfgateError):
    code = "severity_out_of_range"

    def __init__(self, response_id: str, value: float):
        self.response_id = response_id
        super().__init__(f"response {response_id!r}: severity {value} not in [0, 1]")


class VersionMismatch(ConfgateError):
    code = "version_mismatch"
