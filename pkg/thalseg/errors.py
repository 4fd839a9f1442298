"""Exception types shared across the package.

The CLI maps each type to an exit code (see `EXIT_CODES`).
"""
from typing import Any, Dict, List, Optional


class ThalsegError(Exception):
    """Base class for every error raised on purpose by thalseg."""

    exit_code = 2


class ConfigError(ThalsegError, ValueError):
    exit_code = 1

    def __init__(self, key_path: str, message: str):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}")


class VolumeError(ThalsegError, ValueError):
    exit_code = 2


class DataError(ThalsegError, ValueError):
    exit_code = 2


class NumericError(ThalsegError, ArithmeticError):
    exit_code = 3

    def __init__(self, message: str, epoch: Optional[int] = None, step: Optional[int] = None):
        self.epoch = epoch
        self.step = step
        where = ""
        if epoch is not None:
            where = f" (epoch {epoch}, step {step})"
        super().__init__(message + where)


class RegistrationError(ThalsegError, RuntimeError):
    exit_code = 3

    def __init__(self, message: str, trace: List[float]):
        self.trace = list(trace)
        super().__init__(f"{message}; objective trace: {[round(t, 6) for t in self.trace]}")


class CurriculumHalted(ThalsegError, RuntimeError):
    exit_code = 3

    def __init__(self, message: str, state_path: Optional[str]):
        self.state_path = state_path
        super().__init__(f"{message}; resumable state at {state_path}")


class PipelineError(ThalsegError, RuntimeError):
    def __init__(self, step: str, cause: BaseException, provenance: Dict[str, Any]):
        self.step = step
        self.cause = cause
        self.provenance = provenance
        self.exit_code = getattr(cause, "exit_code", 2)
        super().__init__(f"pipeline step '{step}' failed: {cause}")


EXIT_CODES = {
    "ok": 0,
    "usage": 1,
    "data": 2,
    "numeric": 3,
}
