"""Typed domain errors shared across the package.

CLI maps LanPoseError subclasses to exit code 1; bad usage/config is exit 2.
"""


class LanPoseError(Exception):
    """Base class for all domain errors."""


class DegenerateInput(LanPoseError):
    """Numerically degenerate input, e.g. a collapsed 6D rotation vector."""


class BehindCamera(LanPoseError):
    """A point required by projection lies at or behind the camera plane."""


class ShapeMismatch(LanPoseError):
    """Tensor operands with incompatible shapes."""


class ParseError(LanPoseError):
    """Base class for instruction parsing failures."""


class UnknownAction(ParseError):
    """No action phrase in the lexicon matches."""


class UnknownAttribute(ParseError):
    """A shape or color word is outside the closed vocabulary."""


class MalformedStructure(ParseError):
    """No sentence template matches the token sequence."""


class NoReferent(LanPoseError):
    """A command descriptor matches no object in the scene."""


class AmbiguousReferent(LanPoseError):
    """A command descriptor matches more than one object in the scene."""


class AmbiguousScene(LanPoseError):
    """The scene has no pair of uniquely describable objects."""


class IncompatiblePair(LanPoseError):
    """The assembly action is undefined for this block pair."""


class SamplingExhausted(LanPoseError):
    """Rejection sampling exceeded its retry budget."""


class NonFiniteLoss(LanPoseError):
    """Training produced a NaN/inf loss; aborts with diagnostics."""


class ConfigError(LanPoseError):
    """Invalid configuration file or field (usage error, exit 2)."""


class CheckpointError(LanPoseError):
    """Checkpoint file is malformed or inconsistent with the model."""
