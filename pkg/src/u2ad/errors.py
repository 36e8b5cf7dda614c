"""Exception types shared across the pipeline.

Each carries the CLI exit code it maps to.
"""


class U2adError(Exception):
    exit_code = 1


class ConfigError(U2adError, ValueError):
    exit_code = 2


class PreconditionError(U2adError):
    exit_code = 3


class TrainingDivergence(U2adError):
    exit_code = 4

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class DegenerateInputError(U2adError, ValueError):
    pass


class IncompleteEnsembleError(U2adError, ValueError):
    pass


class RunawaySamplingError(U2adError, RuntimeError):
    pass
