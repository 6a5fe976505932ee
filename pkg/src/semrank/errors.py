"""Exception hierarchy shared by all semrank modules."""


class SemrankError(Exception):
    """Base class; ``kind`` is the short machine-readable error code."""

    kind = "error"

    def to_record(self):
        return {"error": self.kind, "type": type(self).__name__, "message": str(self)}


class LengthError(SemrankError, ValueError):
    kind = "length"


class SplitRequired(LengthError):
    """Raised when a multi-item prompt overflows max_seq; the caller must re-batch."""

    kind = "split_required"


class MaskError(SemrankError, ValueError):
    kind = "mask"


class SpecError(SemrankError, ValueError):
    kind = "spec"


class PayloadError(SemrankError, ValueError):
    kind = "payload"


class SchemaError(SemrankError, ValueError):
    kind = "schema"


class AlignmentError(SemrankError, ValueError):
    kind = "alignment"


class DegenerateInputError(SemrankError, ValueError):
    kind = "degenerate_input"


class ParameterError(SemrankError, ValueError):
    kind = "parameter"


class DivergenceError(SemrankError, ArithmeticError):
    kind = "divergence"


class UndefinedMetricError(SemrankError, ValueError):
    kind = "undefined_metric"


class OversizeError(SemrankError, ValueError):
    kind = "oversize"


class ConsistencyError(SemrankError, RuntimeError):
    kind = "consistency"


class StateError(SemrankError, RuntimeError):
    kind = "state"


class ReconciliationError(SemrankError, ValueError):
    kind = "reconciliation"

    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)

    def to_record(self):
        rec = super().to_record()
        rec["offenders"] = self.offenders
        return rec


class SkipQuery(SemrankError):
    """Signal: the query has no usable positive and should be skipped."""

    kind = "skip_query"


class DegenerateTaskWarning(UserWarning):
    """A weighted task had every row masked out and contributed nothing."""
