"""Exception hierarchy shared by every module of the toolkit."""


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ToolkitError):
    pass


class ParseError(ToolkitError):
    pass


class ContractError(ToolkitError):
    """A documented precondition on shapes or arguments was violated."""


class UnsupportedInputError(ToolkitError):
    """Input lies outside the domain an algorithm supports (e.g. cycles)."""


class DegenerateGraphError(ToolkitError):
    """The graph has no complete path, or its total weight is semiring zero."""


class InsufficientContextError(ContractError):
    def __init__(self, required, got):
        super().__init__(f"need at least {required} input frames, got {got}")
        self.required = required
        self.got = got


class TrainingDivergenceError(ToolkitError):
    pass


class DecodeFailureError(ToolkitError):
    pass


class RescoringFailureError(ToolkitError):
    pass


class MalformedAlignmentError(ToolkitError):
    pass


class EmptySupervisionError(ToolkitError):
    pass


class InconsistentSupervisionError(ToolkitError):
    pass


class SupervisionTooLargeError(ToolkitError):
    """A numerator graph would exceed its state budget."""


class StageError(ToolkitError):
    """Wraps a failure inside a pipeline stage; carries the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
