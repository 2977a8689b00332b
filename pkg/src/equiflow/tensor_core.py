"""Rank-d tensors on a periodic index lattice, circular convolution and pooling.

Tensors live on Z_{n1} x ... x Z_{nd}; every index computation wraps.  Indices
in the public API are 1-based, matching the usual convolution conventions for
this kind of data; storage is a dense row-major numpy array.  Convolution is
computed by direct summation over the kernel's nonzero entries (no transform
tricks), which keeps results exact and bit-reproducible at the small sizes
this library targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DimensionMismatchError",
    "NonfiniteSampleError",
    "PeriodicTensor",
    "as_dims",
    "circ_conv",
    "shift",
    "support",
    "pool",
    "BoxDomain",
    "BallDomain",
    "LpEstimate",
    "lp_norm_mc",
]

POOL_KINDS = ("sum", "max", "mean")


class DimensionMismatchError(ValueError):
    """Raised when two tensors with different dims meet in a binary op."""


class NonfiniteSampleError(FloatingPointError):
    """Raised when a Monte-Carlo integrand produces NaN or infinity."""


def as_dims(n) -> tuple[int, ...]:
    """Validate and normalize a dims specification to a tuple of ints >= 1."""
    dims = tuple(int(v) for v in (n if hasattr(n, "__iter__") else (n,)))
    if len(dims) < 1 or any(v < 1 for v in dims):
        raise ValueError(f"dims must be a nonempty tuple of positive ints, got {dims}")
    return dims


def _wrap_index(index, dims) -> tuple[int, ...]:
    # 1-based index -> 0-based storage offset, wrapped per axis
    if len(index) != len(dims):
        raise ValueError(f"index {index} has wrong rank for dims {dims}")
    return tuple((int(i) - 1) % n for i, n in zip(index, dims))


@dataclass(frozen=True)
class PeriodicTensor:
    """Dense real tensor over a periodic multi-index lattice.

    ``values[i1-1, ..., id-1]`` holds the entry at 1-based index ``(i1,...,id)``;
    lookups at any integer index wrap around each axis.
    """

    dims: tuple[int, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = as_dims(self.dims)
        arr = np.asarray(self.values, dtype=float).reshape(dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "values", arr)

    # -- constructors -------------------------------------------------
    @classmethod
    def zeros(cls, dims) -> "PeriodicTensor":
        dims = as_dims(dims)
        return cls(dims, np.zeros(dims))

    @classmethod
    def ones(cls, dims) -> "PeriodicTensor":
        dims = as_dims(dims)
        return cls(dims, np.ones(dims))

    @classmethod
    def full(cls, dims, value: float) -> "PeriodicTensor":
        dims = as_dims(dims)
        return cls(dims, np.full(dims, float(value)))

    @classmethod
    def delta(cls, dims, index=None) -> "PeriodicTensor":
        """Indicator of a single lattice site (default: the (1,...,1) corner)."""
        dims = as_dims(dims)
        arr = np.zeros(dims)
        if index is None:
            index = (1,) * len(dims)
        arr[_wrap_index(index, dims)] = 1.0
        return cls(dims, arr)

    @classmethod
    def random(cls, dims, rng: np.random.Generator, scale: float = 1.0) -> "PeriodicTensor":
        dims = as_dims(dims)
        return cls(dims, scale * rng.standard_normal(dims))

    # -- element access ------------------------------------------------
    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def __getitem__(self, index) -> float:
        if isinstance(index, int):
            index = (index,)
        return float(self.values[_wrap_index(index, self.dims)])

    def with_value(self, index, value: float) -> "PeriodicTensor":
        arr = self.values.copy()
        arr[_wrap_index(index, self.dims)] = float(value)
        return PeriodicTensor(self.dims, arr)

    # -- arithmetic ------------------------------------------------------
    def _check_same_dims(self, other: "PeriodicTensor"):
        if self.dims != other.dims:
            raise DimensionMismatchError(f"dims {self.dims} != {other.dims}")

    def __add__(self, other: "PeriodicTensor") -> "PeriodicTensor":
        self._check_same_dims(other)
        return PeriodicTensor(self.dims, self.values + other.values)

    def __sub__(self, other: "PeriodicTensor") -> "PeriodicTensor":
        self._check_same_dims(other)
        return PeriodicTensor(self.dims, self.values - other.values)

    def __mul__(self, scalar: float) -> "PeriodicTensor":
        return PeriodicTensor(self.dims, self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> "PeriodicTensor":
        return PeriodicTensor(self.dims, -self.values)

    def max_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.size else 0.0

    def allclose(self, other: "PeriodicTensor", tol: float = 1e-12) -> bool:
        self._check_same_dims(other)
        return bool(np.max(np.abs(self.values - other.values)) <= tol)

    # -- fixture format ----------------------------------------------
    def to_json_obj(self) -> dict:
        return {"dims": list(self.dims), "values": [float(v) for v in self.values.ravel()]}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "PeriodicTensor":
        dims = as_dims(obj["dims"])
        values = np.asarray(obj["values"], dtype=float)
        if values.size != int(np.prod(dims)):
            raise ValueError(f"expected {int(np.prod(dims))} values for dims {dims}, got {values.size}")
        return cls(dims, values.reshape(dims))


# ---------------------------------------------------------------------------
# core operations
# ---------------------------------------------------------------------------

def kernel_offsets(kernel: PeriodicTensor) -> list[tuple[tuple[int, ...], float]]:
    """Nonzero kernel entries as (zero-based offset, value) pairs.

    A kernel entry at 1-based index j contributes data at offset j-1;
    convolving with the delta at (1,...,1) is the identity.
    """
    out = []
    for idx in np.argwhere(kernel.values != 0.0):
        out.append((tuple(int(v) for v in idx), float(kernel.values[tuple(idx)])))
    return out


def conv_raw(offsets, arr: np.ndarray, d: int) -> np.ndarray:
    """Convolve a batched array (..., n1, ..., nd) by precomputed kernel offsets."""
    out = np.zeros_like(arr)
    axes = tuple(range(arr.ndim - d, arr.ndim))
    for off, val in offsets:
        out += val * np.roll(arr, shift=tuple(-o for o in off), axis=axes)
    return out


def circ_conv(x: PeriodicTensor, y: PeriodicTensor) -> PeriodicTensor:
    """Circular convolution: z_i = sum_j x_j * y_{i+j-1}, all indices wrapping."""
    x._check_same_dims(y)
    d = len(x.dims)
    return PeriodicTensor(x.dims, conv_raw(kernel_offsets(x), y.values, d))


def shift_raw(arr: np.ndarray, k, d: int) -> np.ndarray:
    axes = tuple(range(arr.ndim - d, arr.ndim))
    return np.roll(arr, shift=tuple(-int(v) for v in k), axis=axes)


def shift(x: PeriodicTensor, k) -> PeriodicTensor:
    """Translate: result_i = x_{i+k}.  k=(0,...,0) is the identity."""
    k = tuple(int(v) for v in (k if hasattr(k, "__iter__") else (k,)))
    if len(k) != len(x.dims):
        raise ValueError(f"shift offset {k} has wrong rank for dims {x.dims}")
    return PeriodicTensor(x.dims, shift_raw(x.values, k, len(x.dims)))


def all_shifts(dims) -> list[tuple[int, ...]]:
    """Every translation offset of the lattice, (0,...,0) first."""
    dims = as_dims(dims)
    grids = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
    return [tuple(int(g[idx]) for g in grids) for idx in np.ndindex(*dims)]


def support(x: PeriodicTensor) -> tuple[int, ...]:
    """Componentwise minimal box (j_1,...,j_d) with all entries beyond it zero.

    The zero tensor has support (0,...,0) by convention.
    """
    nz = np.argwhere(x.values != 0.0)
    if nz.size == 0:
        return (0,) * len(x.dims)
    return tuple(int(v) + 1 for v in nz.max(axis=0))


def pool(x: PeriodicTensor, kind: str) -> float:
    """Permutation-invariant scalar readout: sum, max or mean of all entries."""
    return float(pool_raw(x.values, kind, len(x.dims)))


def pool_raw(arr: np.ndarray, kind: str, d: int):
    axes = tuple(range(arr.ndim - d, arr.ndim))
    if kind == "sum":
        return arr.sum(axis=axes)
    if kind == "max":
        return arr.max(axis=axes)
    if kind == "mean":
        return arr.mean(axis=axes)
    raise ValueError(f"unknown pooling kind {kind!r}; expected one of {POOL_KINDS}")


# ---------------------------------------------------------------------------
# Monte-Carlo Lp distances
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box [low, high]^(n1 x ... x nd) in tensor space."""

    dims: tuple[int, ...]
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "dims", as_dims(self.dims))
        if not self.high > self.low:
            raise ValueError("box needs high > low")

    @property
    def volume(self) -> float:
        return float((self.high - self.low) ** int(np.prod(self.dims)))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(count, *self.dims))


@dataclass(frozen=True)
class BallDomain:
    """Euclidean ball of given radius around the origin of the flattened space."""

    dims: tuple[int, ...]
    radius: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "dims", as_dims(self.dims))
        if self.radius <= 0:
            raise ValueError("ball needs positive radius")

    @property
    def volume(self) -> float:
        m = int(np.prod(self.dims))
        return float(math.pi ** (m / 2) / math.gamma(m / 2 + 1) * self.radius**m)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        m = int(np.prod(self.dims))
        direction = rng.standard_normal((count, m))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        r = self.radius * rng.uniform(0.0, 1.0, size=(count, 1)) ** (1.0 / m)
        return (direction * r).reshape(count, *self.dims)


def sphere_surface_measure(m: int, radius: float = 1.0) -> float:
    """Surface measure of the sphere bounding the m-dimensional unit ball."""
    return float(2 * math.pi ** (m / 2) / math.gamma(m / 2) * radius ** (m - 1))


@dataclass(frozen=True)
class LpEstimate:
    """Monte-Carlo estimate of an Lp distance.

    ``value`` is the norm estimate; ``power_integral`` the unbiased estimate of
    the integral of |f-g|^p over the domain, with ``power_stderr`` its standard
    error.  Consistency tests should run in the power scale, where the
    estimator is unbiased.
    """

    value: float
    power_integral: float
    power_stderr: float
    p: float
    n_samples: int

    def consistent_with(self, target_norm: float, k: float = 3.0) -> bool:
        return abs(self.power_integral - target_norm**self.p) <= k * self.power_stderr + 1e-15


def _eval_samples(fn, samples: np.ndarray, batch: bool, dims) -> np.ndarray:
    if batch:
        return np.asarray(fn(samples))
    outs = [fn(PeriodicTensor(dims, s)) for s in samples]
    if isinstance(outs[0], PeriodicTensor):
        return np.stack([o.values for o in outs])
    return np.asarray(outs, dtype=float)


def lp_norm_mc(f, g, domain, p: float, n_samples: int, seed, batch: bool = False) -> LpEstimate:
    """Monte-Carlo estimate of the Lp(domain) distance between two maps.

    ``f`` and ``g`` may return scalars or tensors; tensor-valued differences are
    reduced with the Euclidean norm of the flattened difference.  With
    ``batch=True`` the callables receive the full (N, n1, ..., nd) sample array
    at once and must return (N,) or (N, n1, ..., nd).
    """
    if not (1 <= p < math.inf):
        raise ValueError("p must lie in [1, inf)")
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    samples = domain.sample(rng, n_samples)
    fv = _eval_samples(f, samples, batch, domain.dims)
    gv = _eval_samples(g, samples, batch, domain.dims)
    diff = fv - gv
    if diff.ndim > 1:
        diff = np.linalg.norm(diff.reshape(n_samples, -1), axis=1)
    vals = np.abs(diff) ** p
    if not np.all(np.isfinite(vals)):
        raise NonfiniteSampleError("nonfinite integrand sample in lp_norm_mc")
    vol = domain.volume
    integral = float(vol * vals.mean())
    stderr = float(vol * vals.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return LpEstimate(max(integral, 0.0) ** (1.0 / p), integral, stderr, p, n_samples)
