"""Error taxonomy shared across modules, mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataError(ValueError):
    """Unreadable, malformed, or out-of-contract input data (CLI exit code 3)."""


class AdapterError(RuntimeError):
    """External adapter subprocess failed or spoke the protocol wrong (CLI exit code 5)."""
