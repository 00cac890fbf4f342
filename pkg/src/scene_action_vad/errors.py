class ContractViolation(ValueError):
    """An operation was called with inputs outside its documented domain."""


class ZeroNormError(ContractViolation):
    pass


class DatasetError(ValueError):
    """Malformed dataset file or record."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
