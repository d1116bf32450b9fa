class ConfigError(ValueError):
    """Invalid architectural or training configuration."""
