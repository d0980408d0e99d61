"""Exception types raised by the library and mapped to exit codes by the CLI."""

from typing import Optional


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 2)."""


class RunExistsError(ConfigError):
    """A run folder with the same id already exists and --force was not given."""


class DataError(ValueError):
    """Invalid data: manifests, splits, frames, memory contents (exit code 3)."""


class ManifestError(DataError):
    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class SplitError(DataError):
    """Task sequence cannot be generated or does not match the manifest."""


class MemoryBudgetError(DataError):
    """Stored frames would exceed the episodic memory frame capacity."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, FileNotFoundError)):
        return EXIT_DATA
    return 1
