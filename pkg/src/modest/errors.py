class DataError(ValueError):
    """Bad or inconsistent input data."""


class ParseError(DataError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class EmptyDatasetError(DataError):
    pass


class NoNegativeError(DataError):
    pass


class NumericalError(ArithmeticError):
    """Non-finite or otherwise invalid value met during optimization."""
