"""Exception hierarchy shared across the pipeline.

Exit-code mapping used by the CLI: ConfigurationError and DataError map to
exit code 3, NumericError to 4; argparse handles usage errors with 2.
"""


class KidttsError(Exception):
    """Base class for all pipeline errors."""


class ConfigurationError(KidttsError):
    """Invalid configuration (bad alphabet, colliding tones, bad ranges)."""


class DataError(KidttsError):
    """Malformed or inconsistent input data (manifests, wavs, ratings)."""


class NumericError(KidttsError):
    """Non-finite values encountered during training or inference."""


class StageError(KidttsError):
    """Failure inside a named pipeline stage during synthesis."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause
