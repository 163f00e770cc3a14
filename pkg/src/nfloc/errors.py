class ConfigError(ValueError):
    """Invalid or incomplete experiment/scenario configuration."""


class FormatError(ValueError):
    """A dataset or model file failed validation.

    Attributes:
        offset: byte offset where the problem was detected.
        record: index of the affected record, when applicable.
    """

    def __init__(self, message: str, offset: int, record: int | None = None):
        where = f"byte offset {offset}" if record is None else f"record {record}, byte offset {offset}"
        super().__init__(f"{message} ({where})")
        self.offset = offset
        self.record = record


class TrainingDivergence(RuntimeError):
    """Training loss became non-finite."""
