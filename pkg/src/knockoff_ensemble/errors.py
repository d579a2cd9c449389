"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class KnockoffEnsembleError(Exception):
    exit_code = 1


class ConfigError(KnockoffEnsembleError, ValueError):
    exit_code = 2


class DataError(KnockoffEnsembleError, ValueError):
    exit_code = 3


class MissingColumnError(DataError):
    pass


class NonNumericError(DataError):
    pass


class ConstantColumnError(DataError):
    pass


class KnockoffError(KnockoffEnsembleError):
    exit_code = 4


class TrainingError(KnockoffEnsembleError):
    exit_code = 5


class NonFiniteLossError(TrainingError):
    """Raised when the training loss becomes NaN or infinite."""

    def __init__(self, message, epoch=None, batch=None):
        context = []
        if epoch is not None:
            context.append(f"epoch={epoch}")
        if batch is not None:
            context.append(f"batch={batch}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class EnsembleError(KnockoffEnsembleError, ValueError):
    exit_code = 6


class SelectionError(KnockoffEnsembleError, ValueError):
    exit_code = 7
