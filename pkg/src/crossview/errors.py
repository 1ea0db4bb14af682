"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Invalid configuration, data, or arguments (CLI exit code 1).

    IO failures (missing files, unreadable paths) stay OSError and map
    to CLI exit code 2.
    """
