"""Dense helpers on top of numpy float64 arrays.

``matmul`` accumulates strictly left to right over the inner index. Every
output element is therefore computed by the same sequence of scalar
operations no matter how many samples are stacked in the leading batch
dimensions, which is what makes inference results independent of how the
samples are chunked across workers.
"""

from __future__ import annotations

import numpy as np

from est.errors import DimensionError


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes, leading axes broadcast."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    inner = a.shape[-1]
    out = a[..., :, 0:1] * b[..., 0:1, :]
    for k in range(1, inner):
        out = out + a[..., :, k : k + 1] * b[..., k : k + 1, :]
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def t(x: np.ndarray) -> np.ndarray:
    """Transpose of the last two axes."""
    return np.swapaxes(x, -1, -2)


def check_shape(name: str, x: np.ndarray, shape: tuple[int, ...]) -> None:
    if tuple(x.shape) != tuple(shape):
        raise DimensionError(f"{name}: expected shape {tuple(shape)}, got {tuple(x.shape)}")
