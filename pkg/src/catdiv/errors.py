"""Exception hierarchy shared by the library and the CLI.

Every error carries a short machine-readable ``code`` and the process exit
status the CLI uses for its failure class.
"""


class CatdivError(Exception):
    exit_status = 5
    code = "internal"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class ConfigError(CatdivError):
    exit_status = 2
    code = "config"


class DataError(CatdivError):
    exit_status = 3
    code = "data"


class ModelError(CatdivError):
    exit_status = 4
    code = "model"


class CheckpointError(ModelError):
    code = "checkpoint"


class TrainingDiverged(ModelError):
    """Raised when a loss or gradient stops being finite.

    ``last_good`` holds the best parameters seen before the failure.
    """

    code = "diverged"

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good
