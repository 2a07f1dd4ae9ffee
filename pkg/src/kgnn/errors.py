"""Exception hierarchy shared across the package."""


class KGNNError(Exception):
    """Base class for every error raised by kgnn."""


class ParseError(KGNNError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
            if line is not None:
                where += f"{line}:"
            where += " "
        super().__init__(where + message)


class VocabLookupError(KGNNError, LookupError):
    pass


class DimensionError(KGNNError, ValueError):
    pass


class NumericError(KGNNError, ArithmeticError):
    def __init__(self, op, message="non-finite value produced"):
        self.op = op
        super().__init__(f"{op}: {message}")


class ContractError(KGNNError, RuntimeError):
    """A caller violated a documented precondition."""


class ExhaustionError(KGNNError, RuntimeError):
    pass


class CoverageError(KGNNError, LookupError):
    """An entity has neither a trained embedding nor attributes."""


class ConstraintError(KGNNError, ValueError):
    pass


class ConfigError(KGNNError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class CheckpointError(KGNNError, ValueError):
    pass


class ProtocolError(KGNNError, RuntimeError):
    def __init__(self, code, message):
        self.code = code
        self.message = message
        super().__init__(f"[0x{code:02x}] {message}")


class TrainingAborted(KGNNError, RuntimeError):
    def __init__(self, epoch, batch, key, message="non-finite loss"):
        self.epoch = epoch
        self.batch = batch
        self.key = key
        super().__init__(f"{message} at epoch {epoch}, batch {batch}; largest gradient at {key}")


class RunAborted(KGNNError, RuntimeError):
    """A distributed run stopped because a participant failed."""
