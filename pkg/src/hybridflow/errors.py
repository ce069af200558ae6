"""Exception hierarchy shared by every stage of the pipeline."""


class HybridFlowError(Exception):
    """Base class for all errors raised by hybridflow."""


class ContractError(HybridFlowError, ValueError):
    """An operation was called with inputs violating its preconditions."""


class FlowFormatError(HybridFlowError, ValueError):
    """A flow file has the wrong magic number, bit depth or layout."""


class FlowLengthError(FlowFormatError):
    """A flow file ends before its declared payload."""


class UndefinedMetricError(HybridFlowError, ValueError):
    """A metric was requested over zero valid pixels."""


class NoSeedsError(HybridFlowError):
    """Every candidate correspondence was filtered out.

    The ``stage`` attribute names the last stage that still had seeds.
    """

    def __init__(self, stage: str, message: str | None = None):
        self.stage = stage
        super().__init__(message or f"no seeds survived after stage '{stage}'")


class InvariantViolation(HybridFlowError, AssertionError):
    """An internal consistency check failed."""
