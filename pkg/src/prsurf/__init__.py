"""Prior-based residual SDF learning for fast surface reconstruction."""

__version__ = "0.1.0"
