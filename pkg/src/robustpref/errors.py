"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`RobustPrefError`, which itself is a ``ValueError`` so callers that
only care about "bad input" can catch the builtin.
"""


class RobustPrefError(ValueError):
    """Base class for all package errors."""


class EnvValidationError(RobustPrefError):
    """An environment violates one of its invariants."""


class DegeneratePairError(RobustPrefError):
    """A comparison was requested between an action and itself."""


class DegenerateSFTError(RobustPrefError):
    """The SFT policy cannot produce two distinct actions for some prompt."""


class InvalidRateError(RobustPrefError):
    """A flip rate lies outside its admissible range."""


class MalformedRankingError(RobustPrefError):
    """A ranking repeats an action or has the wrong length."""


class KindMismatchError(RobustPrefError):
    """Pairwise data was given where rankings were expected, or vice versa."""


class InvalidPolicyError(RobustPrefError):
    """A policy table has rows that are not probability vectors."""


class CoverageError(RobustPrefError):
    """A covariance needed for coverage has a zero minimum eigenvalue."""


class NumericRangeError(RobustPrefError):
    """A computation left the representable floating point range."""


class DivergedError(RobustPrefError):
    """Training produced a non-finite loss."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class ProvenanceError(RobustPrefError):
    """Files belong to different environments."""
