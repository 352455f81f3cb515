"""Exception types shared across the package."""


class FlowshiftError(Exception):
    """Base class for all errors raised by this package."""


class CatalogError(FlowshiftError):
    """Bad catalog or front content: schema violations, invalid masks, bad bounds."""


class TraceError(FlowshiftError):
    """Bad trace content or parameters."""


class ConfigError(FlowshiftError):
    """Bad run configuration (flags, config file, mode strings)."""


class PipelineError(FlowshiftError):
    """Illegal pipeline state transition, e.g. overlapping exports."""


class InvariantViolation(FlowshiftError):
    """An internal accounting invariant failed; results cannot be trusted."""
