from .autodiff import Tape, Var, backward
from .moments import MomentAccumulator, accumulate, centered_moments, finalize, merge
from .reductions import logsumexp
from .rng import RngStream, rng_draw_normal
from .tensor import NonFiniteError, as_tensor

__all__ = [
    "MomentAccumulator",
    "NonFiniteError",
    "RngStream",
    "Tape",
    "Var",
    "accumulate",
    "as_tensor",
    "backward",
    "centered_moments",
    "finalize",
    "logsumexp",
    "merge",
    "rng_draw_normal",
]
