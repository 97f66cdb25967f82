"""Numeric foundation: precision modes, seeded RNG, parameters, checked array ops,
and the central-difference gradient oracle used to certify every backward pass.

All tensors are plain numpy arrays. Two precisions are supported: float32 for
training and inference ("f32"), float64 for gradient certification ("f64").
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(precision: str) -> np.dtype:
    """Map a precision mode name ("f32" or "f64") to a numpy dtype."""
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ValueError(f"unknown precision mode {precision!r}; expected one of {sorted(DTYPES)}")


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for the requested operation."""


def _check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    _check_same_shape(a, b, "add")
    return a + b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product; shapes must match exactly."""
    _check_same_shape(a, b, "mul")
    return a * b


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product with an explicit inner-dimension check."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D operand, got shape {a.shape}")
    return a.T


def reduce_sum(a: np.ndarray, axis: int | None = None) -> np.ndarray:
    return np.sum(a, axis=axis)


def reduce_mean(a: np.ndarray, axis: int | None = None) -> np.ndarray:
    return np.mean(a, axis=axis)


def assert_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values in {what}")


@dataclass
class Param:
    """A named learnable array with a gradient buffer of identical shape."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class Rng:
    """Deterministic random source backed by the Philox 4x64 counter-based generator.

    Identical seed plus identical call sequence yields identical streams on every
    platform. Named children (for independent init / shuffle / noise streams) are
    derived by mixing a CRC32 of the tag into the seed sequence, so they are
    reproducible and order-independent of one another.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._spawn_key = _spawn_key
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=_spawn_key))
        )

    def child(self, tag: str) -> "Rng":
        """Independent sub-stream identified by a stable string tag."""
        return Rng(self.seed, self._spawn_key + (zlib.crc32(tag.encode("utf-8")),))

    def uniform(self, lo: float, hi: float, shape=(), dtype=np.float64) -> np.ndarray:
        if not lo < hi:
            raise ValueError(f"uniform: require lo < hi, got [{lo}, {hi})")
        return self._gen.uniform(lo, hi, size=shape).astype(dtype)

    def normal(self, mean: float, std: float, shape=(), dtype=np.float64) -> np.ndarray:
        if std < 0:
            raise ValueError(f"normal: std must be >= 0, got {std}")
        if std == 0:
            return np.full(shape, mean, dtype=dtype)
        return self._gen.normal(mean, std, size=shape).astype(dtype)

    def integers(self, lo: int, hi: int, shape=()) -> np.ndarray:
        return self._gen.integers(lo, hi, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def finite_diff_grad(f, params: list[Param], step: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function of the given parameters.

    Perturbs every scalar coordinate of every Param in place by +-step and
    evaluates ``f()`` (which must read the live Param values), restoring the
    original value afterwards. Intended to run on float64 models.
    """
    grads = []
    for p in params:
        g = np.zeros(p.value.shape, dtype=np.float64)
        flat_v = p.value.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_v.size):
            orig = flat_v[i]
            flat_v[i] = orig + step
            f_plus = float(f())
            flat_v[i] = orig - step
            f_minus = float(f())
            flat_v[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(
                    f"non-finite objective while probing {p.name}[{i}]"
                )
            flat_g[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Group-level relative disagreement between two gradient estimates.

    The denominator is the larger of the two infinity norms, floored at 1e-6 so
    that all-zero gradients compare on an absolute scale instead of dividing by
    noise.
    """
    diff = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = max(
        float(np.max(np.abs(analytic))) if analytic.size else 0.0,
        float(np.max(np.abs(numeric))) if numeric.size else 0.0,
        1e-6,
    )
    return diff / scale
