"""Exception types shared across the package."""


class LatqError(Exception):
    """Base class for all package errors."""


class ShapeError(LatqError):
    """Operands have incompatible shapes."""


class ConfigError(LatqError):
    """A configuration value violates its contract."""


class NumericError(LatqError):
    """Non-finite values or numeric-domain violations."""


class ContractError(LatqError):
    """An operation was called outside its contract."""


class StageOrderError(ContractError):
    """Training stages invoked out of order (distill -> finetune -> length-adaptive)."""


class FormatError(LatqError):
    """A serialized artifact is malformed."""


class BudgetInfeasibleError(LatqError):
    """No frontier member fits under the requested compute budget."""


class PipelineError(LatqError):
    """A pipeline stage failed; `stage` names it, prior artifacts persist."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage
