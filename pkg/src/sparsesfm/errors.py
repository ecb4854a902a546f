"""Exception types raised across the package."""


class SparseSfmError(Exception):
    """Base class for all package errors."""


class DegenerateProjection(SparseSfmError):
    """Camera-frame depth magnitude below the projection threshold."""


class LayoutMismatch(SparseSfmError):
    """Jacobian entry shapes disagree with the block layout."""


class DimensionMismatch(SparseSfmError):
    """Vector length does not match the layout."""


class SingularBlock(SparseSfmError):
    """An eliminable diagonal block is singular after damping."""


class CGStall(SparseSfmError):
    """Conjugate gradient exceeded its iteration budget."""


class SolverFailure(SparseSfmError):
    """Linear solve failed with damping already at its upper bound.

    Carries the partial solve report (when available) in `.report`.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ZeroQuaternion(SparseSfmError):
    """Quaternion norm too small to renormalize."""


class EmptyProblem(SparseSfmError):
    """No observations survive pruning, or metric input is empty."""


class MissingDepth(SparseSfmError):
    """Depth mode requested but an observation lacks a depth value."""


class ParseError(SparseSfmError):
    """Malformed input file; carries the failing line number."""

    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class CountMismatch(SparseSfmError):
    """Header counts disagree with the records actually present."""


class DuplicateObservation(SparseSfmError):
    """Two observations reference the same (camera, point) pair."""


class UnsupportedModel(SparseSfmError):
    """Operation does not support this camera model."""


class InsufficientCameras(SparseSfmError):
    """Too few cameras for the requested alignment."""


class DegenerateConfig(SparseSfmError):
    """Synthetic-scene configuration cannot produce a valid scene."""
