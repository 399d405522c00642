"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not fit together."""


class DegenerateInputError(ValueError):
    """Input lies outside an operation's numeric domain (e.g. a zero vector)."""


class ContractError(RuntimeError):
    """A caller broke an operation's precondition."""


class ConfigError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class VocabularyError(KeyError):
    pass


class DataError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


class FormatError(ValueError):
    """Unknown or mismatched file format version."""


class IntegrityError(ValueError):
    """Stored data failed a hash or length check."""
