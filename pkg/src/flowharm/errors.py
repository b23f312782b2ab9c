"""Exception taxonomy shared across the toolkit.

CLI exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric failure.
"""


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition (shape, range, flag)."""


class NumericFailureError(RuntimeError):
    """A non-finite value appeared mid-computation.

    Carries the index of the offending transform (flow) or sample (batch)
    so the failure can be located in logs.
    """

    def __init__(self, message, transform_index=None, batch_index=None):
        super().__init__(message)
        self.transform_index = transform_index
        self.batch_index = batch_index


class SamplingFailureError(RuntimeError):
    """Rejection sampling exhausted its try budget."""


class ConfigError(ValueError):
    """A run configuration is malformed (unknown key, bad value, bad path)."""


class MissingArtifactError(FileNotFoundError):
    """An upstream checkpoint or dataset required by a stage is absent."""


class IntegrityError(RuntimeError):
    """A frozen model's checksum changed, or a checkpoint does not match
    the architecture it is being loaded into."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_NUMERIC = 4
