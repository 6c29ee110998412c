class ContractError(ValueError):
    """An operation was called with inputs outside its contract (shapes, ranges)."""


class ParseError(ValueError):
    """Malformed input file; carries the offending 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class OrderingError(ParseError):
    """Event timestamps decrease within a stream."""
