"""Dense numeric kernels.

Every function takes and returns plain 2-D numpy arrays. The default
precision is float64; pass ``dtype=np.float32`` (or ``precision="float32"``
where accepted) for the narrow mode.
"""

import math

import numpy as np

from .errors import DegenerateRowError, ShapeError

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_PRECISIONS = {
    "float64": np.float64,
    "f64": np.float64,
    "64": np.float64,
    "float32": np.float32,
    "f32": np.float32,
    "32": np.float32,
}


def resolve_dtype(precision):
    """Map a precision label (``"float64"``, ``"float32"``, 64, 32 or a dtype) to a numpy dtype."""
    if precision is None:
        return np.dtype(np.float64)
    if isinstance(precision, str) or isinstance(precision, int):
        key = str(precision).lower()
        if key not in _PRECISIONS:
            raise ValueError(f"unknown precision {precision!r}")
        return np.dtype(_PRECISIONS[key])
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def as_matrix(x, dtype=None, name="matrix", allow_neg_inf=False):
    """Validate ``x`` as a non-empty finite 2-D array and return it as ``dtype``."""
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    if arr.dtype.kind not in "fiu":
        raise ShapeError(f"{name} must be numeric, got dtype {arr.dtype}")
    if dtype is None and arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must have at least one row and column, got {arr.shape}")
    if allow_neg_inf:
        bad = np.isnan(arr) | (arr == np.inf)
    else:
        bad = ~np.isfinite(arr)
    if bad.any():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_vector(x, length, dtype=None, name="vector"):
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 1 or arr.shape[0] != length:
        raise ShapeError(f"{name} must be a vector of length {length}, got shape {arr.shape}")
    return arr


def matmul(a, b):
    a = as_matrix(a, name="a")
    b = as_matrix(b, name="b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m):
    """Row-wise softmax with per-row max subtraction.

    ``-inf`` entries are treated as masked. A row made entirely of ``-inf``
    raises :class:`DegenerateRowError`; callers must drop padding rows first.
    """
    m = as_matrix(m, name="logits", allow_neg_inf=True)
    row_max = m.max(axis=1, keepdims=True)
    dead = ~np.isfinite(row_max[:, 0])
    if dead.any():
        rows = np.flatnonzero(dead).tolist()
        raise DegenerateRowError(f"rows {rows} are fully masked")
    e = np.exp(m - row_max)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(x, gamma, beta, eps=1e-5):
    x = as_matrix(x, name="x")
    gamma = as_vector(gamma, x.shape[1], name="gamma")
    beta = as_vector(beta, x.shape[1], name="beta")
    if not eps > 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def gelu(x):
    """GELU, tanh approximation."""
    x = np.asarray(x)
    return 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + GELU_COEF * x**3)))


def mlp2(x, w1, b1, w2, b2):
    """Two-layer perceptron ``gelu(x @ w1 + b1) @ w2 + b2``."""
    x = as_matrix(x, name="x")
    w1 = as_matrix(w1, name="w1")
    w2 = as_matrix(w2, name="w2")
    if x.shape[1] != w1.shape[0]:
        raise ShapeError(f"x has {x.shape[1]} columns but w1 has {w1.shape[0]} rows")
    if w1.shape[1] != w2.shape[0]:
        raise ShapeError(f"w1 has {w1.shape[1]} columns but w2 has {w2.shape[0]} rows")
    b1 = as_vector(b1, w1.shape[1], name="b1")
    b2 = as_vector(b2, w2.shape[1], name="b2")
    return gelu(x @ w1 + b1) @ w2 + b2
