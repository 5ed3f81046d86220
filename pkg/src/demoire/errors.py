"""Exception hierarchy shared by every module.

``ContractError`` covers caller mistakes (bad shapes, out-of-range arguments,
inconsistent files). The CLI maps it to exit code 1; ``OSError`` maps to 2.
"""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ShapeError(ContractError):
    pass


class DegenerateStatisticsError(ContractError):
    pass


class NonFiniteError(ArithmeticError):
    """A NaN/Inf showed up where only finite values are allowed."""


class TrainingDivergedError(NonFiniteError):
    pass


class ManifestError(ContractError):
    pass


class ManifestNotFoundError(ManifestError, FileNotFoundError):
    pass


class DuplicateIdError(ManifestError):
    pass


class DanglingPathError(ManifestError):
    pass


class PoolOverlapError(ManifestError):
    pass


class InsufficientSourcesError(ContractError):
    pass


class CheckpointError(ContractError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointKindError(CheckpointError):
    pass


class CheckpointSpecError(CheckpointError):
    pass


class CheckpointNameError(CheckpointError):
    pass
