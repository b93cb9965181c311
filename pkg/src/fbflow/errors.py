"""Exception types shared across modules.

Each error carries the CLI exit code it maps to, so the runner can translate
failures without a lookup table.
"""

from __future__ import annotations


class FbflowError(Exception):
    exit_code = 1


class ConfigError(FbflowError):
    exit_code = 2


class IoError(FbflowError):
    exit_code = 3


class InvariantViolation(FbflowError):
    exit_code = 4


class OutsideTube(FbflowError):
    """A point is farther from the target (or from K) than the tube radius."""

    exit_code = 5


class LeftTube(OutsideTube):
    """The flow or a reflection left the region where the involution is defined."""


class FrameUnavailable(FbflowError):
    pass


class SingularP(FbflowError):
    pass


class RadiusTooSmall(FbflowError):
    pass


class CflViolation(FbflowError):
    exit_code = 2


class MissingSnapshot(FbflowError):
    pass


class NoScale(FbflowError):
    pass


class OutOfDomain(FbflowError):
    pass


class ScaleOverlap(FbflowError):
    pass


class BadCenter(FbflowError):
    pass


class MismatchAtInfinity(FbflowError):
    pass


class VersionMismatch(IoError):
    pass


class CorruptRow(IoError):
    def __init__(self, row: int, message: str = ""):
        self.row = row
        super().__init__(f"corrupt row {row}: {message}" if message else f"corrupt row {row}")


class OffManifold(IoError):
    def __init__(self, node: int, distance: float, what: str = "N"):
        self.node = node
        self.distance = distance
        super().__init__(f"node {node} is {distance:.3e} away from {what}")
