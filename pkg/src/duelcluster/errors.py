"""Error types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad parameter combination, infeasible setup,
    or an unusable input file. Maps to CLI exit code 2."""


class FeatureFileError(ConfigError):
    """A feature file failed to parse; the message carries path and line number."""
