"""
Error hierarchy for diffcodec

Library code raises these; only the CLI turns them into exit codes.
"""

from typing import Optional, Sequence, Tuple


class DiffCodecError(Exception):
    """Base class for all diffcodec errors"""

    exit_code = 1


class NumericsError(DiffCodecError):
    """Non-finite values or an invalid autodiff request"""


class ShapeMismatchError(NumericsError):
    """Operand shapes that do not conform for an op"""

    def __init__(self, op: str, shapes: Sequence[Tuple[int, ...]], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        message = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class ImageFormatError(DiffCodecError):
    """Malformed or truncated image file"""

    exit_code = 4

    def __init__(self, path: str, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class BitstreamError(DiffCodecError):
    """Bitstream that does not follow the documented layout"""

    exit_code = 4


class RangeCoderError(BitstreamError):
    """Corrupted payload or symbol outside the coding alphabet"""


class ModelMismatchError(DiffCodecError):
    """Checkpoint that cannot decode the given bitstream"""

    exit_code = 4


class TrainingDivergedError(DiffCodecError):
    """Loss became NaN or infinite during training"""

    def __init__(self, step: int, loss: float, what: str = "training"):
        self.step = step
        self.loss = loss
        super().__init__(f"{what} diverged at step {step} (loss={loss})")


class InfeasibleBudgetError(DiffCodecError):
    """Even the coarsest uniform allocation exceeds the bit budget"""

    exit_code = 3

    def __init__(self, minimum_bits: int, r_max: float, image: Optional[str] = None):
        self.minimum_bits = int(minimum_bits)
        self.r_max = float(r_max)
        where = f" for {image}" if image else ""
        super().__init__(
            f"budget of {self.r_max:.0f} bits is infeasible{where}: "
            f"minimum achievable is {self.minimum_bits} bits"
        )


class ConfigError(DiffCodecError):
    """Bad configuration file or value"""

    exit_code = 2


class DataError(DiffCodecError):
    """Missing, unreadable or unpaired input data"""

    exit_code = 4
