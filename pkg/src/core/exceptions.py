"""Error hierarchy shared by the library and the command-line interface.

Library code raises these and never exits the process. The CLI maps each
family to a process exit code through ``exit_code``.
"""

from __future__ import annotations


class FlowForestError(Exception):
    """Base class for every error raised by flowforest."""

    exit_code = 1


class DataError(FlowForestError):
    """Input data is malformed, empty or inconsistent."""

    exit_code = 3


class ConstraintError(FlowForestError):
    """A threshold or hardware constraint cannot be satisfied."""

    exit_code = 4


class MalformedCaptureError(DataError):
    """A capture file is truncated or does not follow its format."""


class UnsupportedLinkTypeError(DataError):
    """The pcap link type is not Ethernet."""

    def __init__(self, link_type: int) -> None:
        super().__init__(f"Unsupported pcap link type {link_type} (only Ethernet)")
        self.link_type = link_type


class NonMonotonicTimestampError(DataError):
    """A packet arrived with a timestamp earlier than its predecessor."""


class EmptyContextError(DataError):
    """No flow reaches the requested packet count."""


class InsufficientSamplesError(DataError):
    """Too few rows to estimate a statistic."""


class EmptyInputError(DataError):
    """A training or scoring routine received no samples."""


class UndefinedFeatureError(DataError):
    """A model read a feature that is not defined for the current packet."""


class LengthMismatchError(DataError):
    """Two parallel sequences differ in length."""


class TooFewSamplesError(DataError):
    """A class has fewer than two samples, so stratified folds are impossible."""


class MalformedConfigError(DataError):
    """A serialized artifact failed to parse or validate."""


class MissingEntryError(DataError):
    """A table walk found no entry for the current key."""


class NoModelFoundError(ConstraintError):
    """No context reached the score threshold, so no model was extracted."""

    def __init__(self, message: str, report: object | None = None) -> None:
        super().__init__(message)
        self.report = report


class DepthExceededError(ConstraintError):
    """A tree is deeper than the table levels available for it."""


class HardwareLimitExceededError(ConstraintError):
    """A compiled model does not fit the target's dimensions."""

    def __init__(self, dimension: str, limit: int, actual: int) -> None:
        super().__init__(
            f"Hardware limit exceeded for {dimension}: {actual} > {limit}"
        )
        self.dimension = dimension
        self.limit = limit
        self.actual = actual
