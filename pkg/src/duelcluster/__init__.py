"""Online clustering of dueling bandits: algorithms, environments, harness."""

from .errors import ConfigError, FeatureFileError

__all__ = ["ConfigError", "FeatureFileError"]

__version__ = "0.1.0"
