"""Exception types shared across the package."""


class TrispanError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(TrispanError):
    """Operands have incompatible shapes; the message names the offending axis."""


class NumericError(TrispanError):
    """A computation produced non-finite values or an invalid numeric state."""


class ConfigError(TrispanError):
    """An invalid configuration or configuration combination."""


class DataError(TrispanError):
    """A corpus, vocabulary, or prediction file failed validation."""


class VocabError(TrispanError):
    """A token id fell outside the vocabulary."""


class EvalError(TrispanError):
    """Predictions reference unknown sentences or cannot be scored."""
