"""Exception types that map onto the CLI exit codes."""


class ConfigError(Exception):
    """Bad configuration or usage (exit code 2)."""


class NumericalError(RuntimeError):
    """Non-finite loss or other numerical failure (exit code 3)."""


class CheckpointError(Exception):
    """Unreadable, truncated, or mismatched checkpoint (exit code 4)."""
