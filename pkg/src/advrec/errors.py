"""Exception hierarchy shared across the package."""


class AdvrecError(Exception):
    """Base class for all package errors."""


class ParseError(AdvrecError, ValueError):
    def __init__(self, line_number, message):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class EmptyDatasetError(AdvrecError, ValueError):
    pass


class ConfigurationError(AdvrecError, ValueError):
    pass


class DomainError(AdvrecError, ValueError):
    pass


class FormatError(AdvrecError, ValueError):
    def __init__(self, offset, message):
        self.offset = offset
        super().__init__(f"offset {offset}: {message}")


class TrainingDivergedError(AdvrecError, FloatingPointError):
    def __init__(self, epoch, batch, message="non-finite loss"):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} at epoch {epoch}, batch {batch}")


class ReportError(AdvrecError):
    pass


class AttackDivergedError(AdvrecError, FloatingPointError):
    def __init__(self, iteration):
        self.iteration = iteration
        super().__init__(f"non-finite attack gradient at iteration {iteration}")
