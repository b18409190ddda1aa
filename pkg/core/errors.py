from typing import Optional


class PulseForgeError(Exception):
    """Base class for every error raised by PulseForge."""


class InvalidInputError(PulseForgeError, ValueError):
    """Raised when an operation receives arguments outside its contract."""


class ConfigParseError(PulseForgeError, ValueError):
    """
    Raised while reading an experiment file. Carries the offending path and line
    so the CLI can point the user at it.
    """
    def __init__(self, message: str, path: Optional[str] = None, line_number: Optional[int] = None):
        self.path = path
        self.line_number = line_number
        location = ""
        if path is not None:
            location = f"{path}"
            if line_number is not None:
                location += f":{line_number}"
            location += ": "
        super().__init__(f"{location}{message}")


class OracleRefusalError(PulseForgeError):
    """Raised when an exhaustive oracle is asked for an instance above its size cap."""


class PulseFileError(PulseForgeError):
    """Raised for missing or malformed pulse files."""
    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ConsistencyError(PulseForgeError):
    """Raised when a re-evaluated figure of merit disagrees with the emitted one."""


class OutputError(PulseForgeError):
    """Raised when a result file cannot be written."""
    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
