"""Exception types shared across mergelab."""


class MergeLabError(Exception):
    pass


class DimensionError(MergeLabError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MergeLabError, ValueError):
    """A precondition of an operation was violated."""


class EvaluationError(MergeLabError, ArithmeticError):
    """A function produced a non-finite value."""


class IntegrityError(MergeLabError):
    """Stored state no longer satisfies its invariant (e.g. R lost orthonormality)."""


class NumericError(MergeLabError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""


class ConfigError(MergeLabError, ValueError):
    """Experiment config failed validation; ``problems`` lists (path, message)."""

    def __init__(self, problems):
        self.problems = list(problems)
        lines = [f"{path}: {msg}" for path, msg in self.problems]
        super().__init__("invalid config:\n  " + "\n  ".join(lines))


class StageError(MergeLabError, RuntimeError):
    """A pipeline stage could not find the artifacts it depends on."""


class ChecksumError(MergeLabError, ValueError):
    pass
