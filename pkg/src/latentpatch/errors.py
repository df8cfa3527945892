"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Bad config values, bad arguments, or missing inputs.

    The CLI maps this to exit code 2.
    """


class PipelineError(RuntimeError):
    """A backend or pipeline stage failed at runtime (exit code 1)."""
