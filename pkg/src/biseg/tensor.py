"""Rank-4 NCHW tensor substrate and the deterministic RNG.

Tensors are thin wrappers over contiguous float32 numpy arrays laid out
(batch, channel, height, width), with an optional gradient buffer of the
same shape. The flat offset of element (n, c, h, w) is
((n * C + c) * H + h) * W + w.

Randomness comes from a counter-based SplitMix64 generator so that a seed
produces the same stream everywhere regardless of platform RNG defaults.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError, SizeError

# Largest element count we accept; keeps byte sizes well inside addressable
# range on 64-bit platforms.
_MAX_NUMEL = 1 << 61


@dataclass(frozen=True)
class Shape:
    """Static NCHW extents. All four must be at least 1."""

    n: int
    c: int
    h: int
    w: int

    def __post_init__(self):
        for axis, value in zip("nchw", (self.n, self.c, self.h, self.w)):
            if not isinstance(value, int) or value < 1:
                raise SizeError(f"shape axis '{axis}' must be a positive int, got {value!r}")
        if self.numel() > _MAX_NUMEL:
            raise SizeError(f"element count {self.numel()} overflows the supported range")

    def numel(self) -> int:
        return self.n * self.c * self.h * self.w

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n, self.c, self.h, self.w)

    def offset_of(self, n: int, c: int, h: int, w: int) -> int:
        """Flat index of element (n, c, h, w) in the contiguous buffer."""
        if not (0 <= n < self.n and 0 <= c < self.c and 0 <= h < self.h and 0 <= w < self.w):
            raise SizeError(f"index ({n},{c},{h},{w}) out of bounds for {self}")
        return ((n * self.c + c) * self.h + h) * self.w + w

    def __str__(self):
        return f"({self.n},{self.c},{self.h},{self.w})"


class Tensor:
    """Contiguous float32 NCHW array plus an optional grad buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray, grad: np.ndarray | None = None):
        if not isinstance(data, np.ndarray) or data.ndim != 4:
            raise ShapeError("tensor data must be a rank-4 numpy array")
        if data.dtype != np.float32:
            raise ShapeError(f"tensor data must be float32, got {data.dtype}")
        if not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        if grad is not None:
            if grad.shape != data.shape or grad.dtype != np.float32:
                raise ShapeError("grad buffer must match data shape and dtype")
            if not grad.flags["C_CONTIGUOUS"]:
                grad = np.ascontiguousarray(grad)
        self.data = data
        self.grad = grad

    @classmethod
    def of(cls, array_like, grad=None) -> "Tensor":
        """Build a tensor from any array-like, casting to float32."""
        return cls(np.ascontiguousarray(np.asarray(array_like, dtype=np.float32)))

    @property
    def shape(self) -> Shape:
        n, c, h, w = self.data.shape
        return Shape(n, c, h, w)

    def numel(self) -> int:
        return int(self.data.size)

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'yes' if self.grad is not None else 'no'})"


# ---------------------------------------------------------------------------
# Deterministic RNG
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a uint64 array."""
    with np.errstate(over="ignore"):
        z = (z + _GOLDEN).astype(np.uint64)
        z ^= z >> np.uint64(30)
        z *= _MIX1
        z ^= z >> np.uint64(27)
        z *= _MIX2
        z ^= z >> np.uint64(31)
    return z


class Rng:
    """Counter-based SplitMix64 stream.

    The i-th raw draw is mix(seed + (i+1) * golden), so the stream is a pure
    function of (seed, position): identical seeds give identical integer
    streams on every platform. Gaussian variates use Box-Muller on the
    uniform stream (float64 math; last-ulp libm differences are the only
    platform dependence).
    """

    __slots__ = ("seed", "_pos")

    def __init__(self, seed: int):
        self.seed = int(seed) & _U64_MASK
        self._pos = 0

    def split(self, salt: int) -> "Rng":
        """Derive an independent child stream from (seed, salt)."""
        salted = np.uint64((self.seed ^ (int(salt) & _U64_MASK)) & _U64_MASK)
        child = int(_mix64(salted[None] * _GOLDEN)[0])
        return Rng(child)

    def u64(self, count: int) -> np.ndarray:
        if count < 0:
            raise ArgumentError("draw count must be non-negative")
        idx = np.arange(self._pos + 1, self._pos + count + 1, dtype=np.uint64)
        self._pos += count
        with np.errstate(over="ignore"):
            ctr = np.uint64(self.seed) + idx * _GOLDEN
        return _mix64(ctr)

    def uniform(self, count: int) -> np.ndarray:
        """count float64 draws in [0, 1)."""
        return (self.u64(count) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normal(self, count: int, std: float = 1.0) -> np.ndarray:
        """count float64 N(0, std^2) draws via Box-Muller."""
        pairs = (count + 1) // 2
        raw = self.u64(2 * pairs)
        # u1 in (0, 1] so the log is finite; u2 in [0, 1).
        u1 = ((raw[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        u2 = (raw[pairs:] >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:count] * std

    def randint(self, lo: int, hi: int) -> int:
        """One integer in [lo, hi). Uses rejection-free modulo (desk scale)."""
        if hi <= lo:
            raise ArgumentError(f"empty range [{lo}, {hi})")
        span = hi - lo
        return lo + int(self.u64(1)[0] % np.uint64(span))

    def choice(self, items):
        return items[self.randint(0, len(items))]


# ---------------------------------------------------------------------------
# Tensor constructors and elementwise ops
# ---------------------------------------------------------------------------


def zeros(shape: Shape) -> Tensor:
    if not isinstance(shape, Shape):
        raise ArgumentError("zeros expects a Shape")
    return Tensor(np.zeros(shape.as_tuple(), dtype=np.float32))


def init_kaiming(shape: Shape, fan_in: int, rng: Rng) -> Tensor:
    """He-normal init: Normal(0, sqrt(2 / fan_in)) truncated to float32."""
    if fan_in < 1:
        raise ArgumentError(f"fan_in must be >= 1, got {fan_in}")
    std = float(np.sqrt(2.0 / fan_in))
    draws = rng.normal(shape.numel(), std=std)
    return Tensor(draws.astype(np.float32).reshape(shape.as_tuple()))


def _broadcast_ok(a: np.ndarray, b: np.ndarray) -> bool:
    """b may be (n, c, 1, 1) against a's (n, c, h, w)."""
    return b.shape == (a.shape[0], a.shape[1], 1, 1)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Pointwise add or mul; the second operand may be (n, c, 1, 1)."""
    if kind not in ("add", "mul"):
        raise ArgumentError(f"unknown elementwise kind {kind!r}")
    x, y = a.data, b.data
    if x.shape != y.shape and not _broadcast_ok(x, y):
        raise ShapeError(f"elementwise operands {a.shape} and {b.shape} do not align")
    out = x + y if kind == "add" else x * y
    return Tensor(out)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    xa, xb = a.data, b.data
    if xa.shape[0] != xb.shape[0] or xa.shape[2:] != xb.shape[2:]:
        raise ShapeError(f"concat operands {a.shape} and {b.shape} differ outside the channel axis")
    return Tensor(np.concatenate([xa, xb], axis=1))


def split_channels(t: Tensor, c_first: int) -> tuple[Tensor, Tensor]:
    """Inverse of concat_channels: split after the first c_first channels."""
    c = t.data.shape[1]
    if not (1 <= c_first < c):
        raise ShapeError(f"split point {c_first} invalid for {c} channels")
    return Tensor(t.data[:, :c_first].copy()), Tensor(t.data[:, c_first:].copy())
