class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


class EmptySurfaceError(Exception):
    """A field that was expected to cross zero has a single sign."""


class DivergenceError(Exception):
    """Training produced a non-finite loss."""
