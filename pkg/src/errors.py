from typing import Any, Dict, Optional


class ShapeError(ValueError):
    """Raised when array or tensor operands have incompatible shapes."""


class ConfigError(ValueError):
    """Raised for invalid model/train configurations and flag combinations."""


class RleParseError(ValueError):
    """
    Raised when a run-length label cannot be decoded.

    Attributes:
        token_index (int): Zero-based index of the offending token.
    """

    def __init__(self, message: str, token_index: int):
        super().__init__(f"{message} (token {token_index})")
        self.token_index = token_index


class NonFiniteLossError(RuntimeError):
    """
    Raised when a training step produces a NaN or infinite loss.

    Attributes:
        diagnostics (dict): Fold, stage, epoch, step and loss components at the failing step.
    """

    def __init__(self, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = dict(diagnostics or {})
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        super().__init__(f"Non-finite loss, aborting run: {details}")
