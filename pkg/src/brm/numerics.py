"""Max-shifted logsumexp/softmax shared by every soft-value computation."""
from __future__ import annotations

import numpy as np


def logsumexp_softmax(x: np.ndarray, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(logsumexp(x), softmax(x))`` along ``axis`` from one shifted pass."""
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    z = np.sum(e, axis=axis, keepdims=True)
    lse = np.squeeze(m + np.log(z), axis=axis)
    return lse, e / z


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return logsumexp_softmax(x, axis)[0]


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return logsumexp_softmax(x, axis)[1]
