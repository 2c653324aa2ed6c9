"""Exception hierarchy shared across the package."""


class VLMError(Exception):
    """Base class for all package errors."""


class ShapeError(VLMError, ValueError):
    pass


class ContractError(VLMError):
    """A caller violated an operation's precondition."""


class DegenerateBatchError(VLMError, ValueError):
    pass


class OptimizerError(VLMError):
    pass


class SequenceLengthError(VLMError, ValueError):
    pass


class ConfigError(VLMError, ValueError):
    pass


class SceneError(VLMError, ValueError):
    pass


class SplitError(VLMError, ValueError):
    pass


class CheckpointError(VLMError):
    pass


class ChecksumError(CheckpointError):
    pass


class JudgeProtocolError(VLMError):
    pass


class TransportError(VLMError):
    pass


class EvaluationError(VLMError):
    pass


class NumericError(VLMError):
    """Non-finite loss or activations during training."""
