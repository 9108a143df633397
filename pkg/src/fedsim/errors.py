"""Exception hierarchy shared by every fedsim module."""


class FedSimError(Exception):
    """Base class for all errors raised by fedsim."""


class IncompatibleShapesError(FedSimError, ValueError):
    pass


class EmptyInputError(FedSimError, ValueError):
    pass


class NumericOverflowError(FedSimError, ArithmeticError):
    pass


class DecodeError(FedSimError, ValueError):
    """A parameter blob could not be decoded."""


class BadMagicError(DecodeError):
    pass


class VersionMismatchError(DecodeError):
    pass


class LengthMismatchError(DecodeError):
    pass


class NonFiniteValueError(DecodeError):
    pass


class InsufficientClientsError(FedSimError, ValueError):
    pass


class ConfigError(FedSimError, ValueError):
    pass


class DivergenceError(FedSimError, ArithmeticError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class IntegrityError(FedSimError):
    """Stored content does not match its recorded SHA-256 digest."""


class ProtocolOrderError(FedSimError):
    """A coordination step was attempted out of protocol order."""


class BarrierTimeoutError(FedSimError, TimeoutError):
    def __init__(self, round_, missing):
        self.round = round_
        self.missing = sorted(missing)
        names = ", ".join(f"client {k}" for k in self.missing)
        super().__init__(f"round {round_}: timed out waiting for {names}")


class RoundFailedError(FedSimError):
    def __init__(self, round_, failed, message=None):
        self.round = round_
        self.failed = sorted(failed)
        super().__init__(message or f"round {round_} failed: clients {self.failed} reported failure")


class StoreTimeoutError(FedSimError, TimeoutError):
    pass


class CancelledError(FedSimError):
    """A role stopped waiting because another role of the same run failed."""
