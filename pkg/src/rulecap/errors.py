"""Exception hierarchy shared across the package."""


class RuleCapError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RuleCapError, ValueError):
    pass


class RecognizerError(RuleCapError):
    def __init__(self, window_index: int, cause: BaseException):
        super().__init__(f"entity recognizer failed on window {window_index}: {cause}")
        self.window_index = window_index
        self.cause = cause


class ScorerError(RuleCapError):
    def __init__(self, message: str, entity=None):
        super().__init__(message)
        self.entity = entity


class InvalidFrameError(RuleCapError, ValueError):
    pass


class RuleParseError(RuleCapError, ValueError):
    def __init__(self, message: str, column: int):
        super().__init__(f"{message} (column {column})")
        self.column = column


class NumericalError(RuleCapError, FloatingPointError):
    def __init__(self, message: str, layer=None, head=None):
        super().__init__(message)
        self.layer = layer
        self.head = head


class TrainingError(RuleCapError):
    def __init__(self, message: str, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id


class CheckpointError(RuleCapError):
    pass


class ConfigError(RuleCapError, ValueError):
    pass


class StageError(RuleCapError):
    """A pipeline stage failed; carries the stage name and the sample id."""

    def __init__(self, stage: str, sample_id: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed for sample {sample_id!r}: {cause}")
        self.stage = stage
        self.sample_id = sample_id
        self.cause = cause
