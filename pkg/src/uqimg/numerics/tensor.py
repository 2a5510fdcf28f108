"""Tensors are plain float64 numpy arrays; this module only guards their construction."""

import numpy as np


class NonFiniteError(ValueError):
    pass


def as_tensor(data, shape=None, name="tensor"):
    """Return ``data`` as a C-contiguous float64 array, rejecting NaN/Inf.

    If ``shape`` is given the array is reshaped to it (row-major) and the
    total size must agree.
    """
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ValueError(f"{name}: dimensions must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"{name}: {arr.size} entries do not fill shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: contains NaN or Inf")
    return arr
