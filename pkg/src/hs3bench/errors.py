"""Exception hierarchy.

Validation errors map to CLI exit code 2, runtime failures to exit code 3.
"""


class HS3Error(Exception):
    exit_code = 3


class ValidationError(HS3Error):
    """Bad input, bad configuration or a broken benchmark rule."""

    exit_code = 2


class RuntimeFailure(HS3Error):
    exit_code = 3


class DatasetNotFound(ValidationError):
    pass


class SchemaMismatch(ValidationError):
    pass


class DegenerateSplit(ValidationError):
    pass


class DegenerateSpectra(ValidationError):
    pass


class InvalidBand(ValidationError):
    pass


class ProtocolViolation(ValidationError):
    def __init__(self, detail: str):
        super().__init__(f"protocol violation: {detail}")
        self.detail = detail


class CheckpointMismatch(ValidationError):
    def __init__(self, offending):
        self.offending = list(offending)
        super().__init__("checkpoint mismatch: " + ", ".join(self.offending))


class DecodeError(RuntimeFailure):
    def __init__(self, path, reason=""):
        self.path = str(path)
        msg = f"decode error: {self.path}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


class NumericalDivergence(RuntimeFailure):
    def __init__(self, epoch: int, record=None):
        super().__init__(f"numerical divergence at epoch {epoch}")
        self.epoch = epoch
        self.record = record
