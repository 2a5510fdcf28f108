import math

import numpy as np


def logsumexp(values, axis=None):
    """Max-shifted ``log(sum(exp(values)))``.

    With ``axis=None`` the input is treated as a flat list and a Python float
    is returned.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty reduction")
    if np.isnan(v).any():
        raise ValueError("logsumexp: NaN in input")
    if axis is None:
        v = v.ravel()
        m = v.max()
        if math.isinf(m):
            return float(m)
        return float(m + math.log(np.exp(v - m).sum()))
    m = v.max(axis=axis, keepdims=True)
    safe = np.where(np.isinf(m), 0.0, m)
    out = safe + np.log(np.exp(v - safe).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)
