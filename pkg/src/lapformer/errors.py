"""Exception types raised across the package."""


class LAPFormerError(Exception):
    """Base class for all errors raised by lapformer."""


class ConfigError(LAPFormerError, ValueError):
    """A configuration invariant was violated (raised at build time)."""


class DimensionError(LAPFormerError, ValueError):
    """A tensor has a shape incompatible with the operation."""


class CheckpointError(LAPFormerError):
    """Malformed, truncated or incompatible checkpoint file."""


class UnsupportedOpError(LAPFormerError):
    """The FLOP counter met a layer it has no rule for."""


class TrainingError(LAPFormerError, RuntimeError):
    """Training diverged (non-finite loss) or was misconfigured."""
