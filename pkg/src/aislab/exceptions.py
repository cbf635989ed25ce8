class InputError(ValueError):
    pass


class SizeError(ValueError):
    pass


class ClosureError(RuntimeError):
    """A tabular update produced a feature outside the declared feature set."""


class KernelValidityError(ValueError):
    pass


class CodebookError(RuntimeError):
    """An undefined codebook entry was read."""


class ScheduleError(ValueError):
    pass


class BoundViolation(AssertionError):
    def __init__(self, message, counterexample=None):
        super().__init__(message)
        self.counterexample = counterexample
