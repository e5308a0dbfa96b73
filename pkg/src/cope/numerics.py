"""Small numerical helpers shared by the rest of the package.

Vectors and matrices are plain float64 numpy arrays.  This module adds the
pieces numpy does not ship: an L2-normalisation layer with its backward pass,
a central-difference gradient checker and label-derived child generators.
"""
from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

DTYPE = np.float64


class DegenerateNormError(ValueError):
    """Raised when asked to normalise a (near) zero vector."""

    def __init__(self, message: str = "degenerate-norm"):
        super().__init__(message)


def as_matrix(a, name: str = "array") -> np.ndarray:
    arr = np.asarray(a, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 1-d or 2-d, got shape {arr.shape}")
    return arr


def check_finite(a: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{name} contains NaN or Inf")
    return a


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm.

    Works on a single vector or row-wise on a matrix.  Zero rows raise
    :class:`DegenerateNormError` instead of picking an arbitrary direction.
    """
    v = np.asarray(v, dtype=DTYPE)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateNormError()
    return v / norms


def l2_normalize_backward(v: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of :func:`l2_normalize` at ``v``.

    Returns ``(I - u u^T) upstream / ||v||`` with ``u = v / ||v||``, row-wise
    for matrices.
    """
    v = np.asarray(v, dtype=DTYPE)
    upstream = np.asarray(upstream, dtype=DTYPE)
    if v.shape != upstream.shape:
        raise ValueError(f"shape mismatch: {v.shape} vs {upstream.shape}")
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateNormError()
    u = v / norms
    radial = np.sum(u * upstream, axis=-1, keepdims=True)
    return (upstream - radial * u) / norms


def grad_check(
    f: Callable[[np.ndarray], float],
    point: np.ndarray,
    analytic_grad: np.ndarray,
    eps: float = 1e-6,
) -> float:
    """Largest per-coordinate error of ``analytic_grad`` against central differences.

    The error for a coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``point`` may have any shape; ``f`` receives an array of that shape.
    """
    x = np.array(point, dtype=DTYPE, copy=True)
    analytic = np.asarray(analytic_grad, dtype=DTYPE).reshape(x.shape)
    flat = x.reshape(-1)
    worst = 0.0
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        f_plus = float(f(x))
        flat[k] = orig - eps
        f_minus = float(f(x))
        flat[k] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic.reshape(-1)[k]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def mean_rows(m: np.ndarray) -> np.ndarray:
    m = as_matrix(m, "m")
    if m.shape[0] == 0:
        raise ValueError("mean of zero rows")
    return m.mean(axis=0)


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def make_rng(seed: int, label: str = "") -> np.random.Generator:
    """Generator determined only by ``(seed, label)``.

    Different labels give statistically independent streams, so components
    that draw randomness never interleave with each other.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(_label_words(label)))
    return np.random.Generator(np.random.PCG64(ss))
