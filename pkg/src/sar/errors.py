class SarError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(SarError, ValueError):
    pass


class ParseError(SarError, ValueError):
    """A data or model file could not be parsed.

    ``record`` is the 1-based line (record) index where parsing failed.
    """

    def __init__(self, path, record, message):
        self.path = str(path)
        self.record = record
        super().__init__(f"{path}: record {record}: {message}")


class ValidationError(SarError, ValueError):
    pass


class ArtifactError(SarError):
    """A required artifact is missing or does not match the data it is used with."""


class TrainingError(SarError, RuntimeError):
    pass
