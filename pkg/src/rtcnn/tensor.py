"""Dense NCHW tensors.

A tensor here is a plain 4-D, C-contiguous numpy array laid out (batch,
channels, rows, cols). Training and inference run in float32; float64 is
used only for finite-difference gradient checks. Kernels keep whatever
dtype their inputs carry, so precision is selected by the caller.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

FLOAT32 = np.float32
FLOAT64 = np.float64

_MASK64 = (1 << 64) - 1
_XS_MULT = 0x2545F4914F6CDD1D
# xorshift64* has an all-zero fixed point, so seed 0 is remapped.
_ZERO_SEED = 0x9E3779B97F4A7C15

AXES = {"n": 0, "c": 1, "h": 2, "w": 3}


def as_shape(shape: Sequence[int]) -> tuple[int, int, int, int]:
    """Validate a 4-tuple shape. Lower-rank shapes are not accepted."""
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected a 4-D shape, got {shape}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    if int(np.prod(shape, dtype=object)) > np.iinfo(np.int64).max // 8:
        raise ShapeError(f"shape {shape} overflows addressable memory")
    return shape


def vector_shape(c: int) -> tuple[int, int, int, int]:
    """Shape used to hold a per-channel vector."""
    return as_shape((1, c, 1, 1))


def flat_index(shape: Sequence[int], n: int, c: int, y: int, x: int) -> int:
    _, C, H, W = shape
    return ((n * C + c) * H + y) * W + x


class XorShift64Star:
    """Marsaglia xorshift (12, 25, 27) followed by the 2685821657736338717 multiply.

    ``next_u64`` returns the scrambled 64-bit output; ``uniform`` keeps its top
    53 bits to build a double in [0, 1).
    """

    def __init__(self, seed: int):
        seed = int(seed) & _MASK64
        self.state = seed or _ZERO_SEED

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self.state = x
        return (x * _XS_MULT) & _MASK64

    def uniform(self, count: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        x = self.state
        out = [0] * count
        # inlined next_u64; this loop dominates weight initialisation time
        for i in range(count):
            x ^= x >> 12
            x ^= (x << 25) & _MASK64
            x ^= x >> 27
            out[i] = ((x * _XS_MULT) & _MASK64) >> 11
        self.state = x
        u = np.array(out, dtype=np.float64) * (1.0 / (1 << 53))
        return lo + (hi - lo) * u


def new_tensor(shape: Sequence[int], init="zeros", dtype=FLOAT32) -> np.ndarray:
    """Allocate a tensor.

    ``init`` is ``"zeros"``, ``("constant", k)`` or ``("uniform", lo, hi, seed)``.
    Uniform draws are generated in float64 from xorshift64* and then cast.
    """
    shape = as_shape(shape)
    if init == "zeros" or init == ("zeros",):
        return np.zeros(shape, dtype=dtype)
    kind, *args = init
    if kind == "constant":
        (k,) = args
        return np.full(shape, k, dtype=dtype)
    if kind == "uniform":
        lo, hi, seed = args
        count = int(np.prod(shape))
        data = XorShift64Star(seed).uniform(count, lo, hi)
        return data.reshape(shape).astype(dtype)
    raise ValueError(f"unknown init descriptor {init!r}")


def check_tensor(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(t, np.ndarray) or t.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D array, got {getattr(t, 'shape', type(t))}")
    return t


def get(t: np.ndarray, n: int, c: int, y: int, x: int) -> float:
    return t.reshape(-1)[flat_index(t.shape, n, c, y, x)].item()


def set_(t: np.ndarray, n: int, c: int, y: int, x: int, value: float) -> None:
    t.reshape(-1)[flat_index(t.shape, n, c, y, x)] = value


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def ew_binary(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    try:
        fn = _BINARY[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    return fn(a, b)


def argmax_flat(t: np.ndarray) -> tuple[int, int, int]:
    """(c, y, x) of the largest element of batch item 0; ties go to the lowest flat index."""
    check_tensor(t)
    if t.shape[0] != 1:
        raise ContractError(f"argmax_flat needs batch size 1, got {t.shape[0]}")
    # np.argmax returns the first occurrence, which is the tie rule we want
    idx = int(np.argmax(t.reshape(-1)))
    _, _, H, W = t.shape
    c, rem = divmod(idx, H * W)
    y, x = divmod(rem, W)
    return c, y, x


def reduce(t: np.ndarray, axes: Iterable, op: str) -> np.ndarray:
    """Reduce over ``axes`` (ints or names from "nchw"), keeping reduced dims as size 1.

    An empty axis set returns a copy.
    """
    ax = tuple(sorted({AXES[a] if isinstance(a, str) else int(a) for a in axes}))
    if any(a < 0 or a > 3 for a in ax):
        raise ShapeError(f"invalid axes {ax}")
    if not ax:
        return t.copy()
    if op == "sum":
        return t.sum(axis=ax, keepdims=True)
    if op == "mean":
        return t.mean(axis=ax, keepdims=True)
    if op == "max":
        return t.max(axis=ax, keepdims=True)
    raise ValueError(f"unknown reduction {op!r}")
