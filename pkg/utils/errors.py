class TafnetError(Exception):
    """Base error; exit_code is what the CLI returns for it"""

    exit_code = 1


class ValidationError(TafnetError, ValueError):
    """Bad input: config, shapes, files"""


class ConfigError(ValidationError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ShapeError(ValidationError):
    pass


class DatasetError(ValidationError):
    def __init__(self, path, message: str, line: int = None):
        location = f"{path}:{line}" if line is not None else f"{path}"
        super().__init__(f"{location}: {message}")
        self.path = path
        self.line = line


class NumericalError(TafnetError, ArithmeticError):
    """Non-finite values or failed gradient checks"""

    exit_code = 2
