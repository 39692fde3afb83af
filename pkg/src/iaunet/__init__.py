"""IAU blocks for person re-identification on a verifiable numpy autodiff core."""

from .tensor import Tape, Tensor, backward

__all__ = ["Tensor", "Tape", "backward"]
__version__ = "0.1.0"
