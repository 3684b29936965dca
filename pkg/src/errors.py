"""
Error types shared by every oclbench module.
"""

from typing import Optional


class OclError(ValueError):
    """Base class for all oclbench errors"""


class DimensionError(OclError):
    """Shapes that do not line up"""


class ConfigError(OclError):
    """Invalid configuration value or combination"""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.message = message
        self.key = key
        self.line = line
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if key is not None:
            prefix += f"{key}: "
        super().__init__(prefix + message)


class LabelError(OclError):
    """Class label outside the configured label space"""


class ContractError(OclError):
    """Precondition of an operation was violated by the caller"""


class FormatError(OclError):
    """Malformed binary container (IDX or weight file)"""

    def __init__(self, message: str, offset: int = 0):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")
