"""Exception hierarchy; each maps onto a CLI exit code."""


class AnylinkError(Exception):
    exit_code = 1


class ConfigError(AnylinkError):
    exit_code = 2


class ProvenanceError(ConfigError):
    """A cross-KB run whose test KB also appears among the training KBs."""


class DataError(AnylinkError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class CheckpointMismatch(DataError):
    pass


class TrainingDivergence(AnylinkError):
    exit_code = 4
