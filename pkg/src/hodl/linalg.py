"""Dense kernels: G-weighted geometry, soft thresholding, spectral norms.

State arrays are numpy float64 arrays whose first axis is the coordinate
axis; any trailing axes (e.g. a batch of samples stored as columns) are
carried along.  A diagonal metric broadcasts over the trailing axes, and
norms sum over every entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POWER_ITERS = 200
POWER_TOL = 1e-10


def _as_float(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _broadcast(diag: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Reshape a coordinate vector so it broadcasts along v's first axis."""
    return diag.reshape(diag.shape + (1,) * (v.ndim - 1))


@dataclass(frozen=True)
class Metric:
    """Diagonal positive-definite metric G with spectral bounds.

    ``lower_bound`` and ``upper_bound`` bracket every diagonal entry; the
    lower bound plays the role of the smallest eigenvalue of G_lb.
    """

    diag: np.ndarray
    lower_bound: float
    upper_bound: float

    def __post_init__(self):
        d = _as_float(self.diag).ravel().copy()
        d.setflags(write=False)
        object.__setattr__(self, "diag", d)
        if d.size == 0:
            raise ValueError("metric must have at least one coordinate")
        if not np.all(np.isfinite(d)):
            raise ValueError("metric diagonal must be finite")
        if not self.lower_bound > 0:
            raise ValueError(f"lower_bound must be positive, got {self.lower_bound}")
        if self.upper_bound < self.lower_bound:
            raise ValueError("upper_bound must be >= lower_bound")
        if d.min() < self.lower_bound or d.max() > self.upper_bound:
            raise ValueError("metric diagonal lies outside [lower_bound, upper_bound]")

    @classmethod
    def identity(cls, dim: int) -> "Metric":
        return cls(np.ones(dim), 1.0, 1.0)

    @classmethod
    def from_diag(cls, diag) -> "Metric":
        d = _as_float(diag).ravel()
        return cls(d, float(d.min()), float(d.max()))

    @property
    def dim(self) -> int:
        return self.diag.size

    def apply(self, v: np.ndarray) -> np.ndarray:
        return _broadcast(self.diag, v) * v

    def solve(self, v: np.ndarray) -> np.ndarray:
        """G^{-1} v."""
        return v / _broadcast(self.diag, v)

    def sqrt_apply(self, v: np.ndarray) -> np.ndarray:
        return _broadcast(np.sqrt(self.diag), v) * v

    def inv_sqrt_apply(self, v: np.ndarray) -> np.ndarray:
        return v / _broadcast(np.sqrt(self.diag), v)

    def lower(self) -> "Metric":
        """G_lb as a metric: lower_bound times the identity."""
        return Metric(np.full(self.dim, self.lower_bound), self.lower_bound, self.lower_bound)

    def same_as(self, other: "Metric") -> bool:
        return (
            self.dim == other.dim
            and np.array_equal(self.diag, other.diag)
            and self.lower_bound == other.lower_bound
            and self.upper_bound == other.upper_bound
        )


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; ``None`` for a side means unbounded."""

    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def __post_init__(self):
        for name in ("lo", "hi"):
            val = getattr(self, name)
            if val is not None:
                arr = _as_float(val).copy()
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        if self.lo is not None and self.hi is not None:
            lo, hi = np.broadcast_arrays(self.lo, self.hi)
            if np.any(lo > hi):
                raise ValueError("box lower bound exceeds upper bound")

    @classmethod
    def unbounded(cls) -> "Box":
        return cls()

    @property
    def is_unbounded(self) -> bool:
        return self.lo is None and self.hi is None

    def _bounds(self, v: np.ndarray):
        lo = -np.inf if self.lo is None else self._fit(self.lo, v)
        hi = np.inf if self.hi is None else self._fit(self.hi, v)
        return lo, hi

    @staticmethod
    def _fit(bound: np.ndarray, v: np.ndarray) -> np.ndarray:
        if bound.ndim == 0:
            return bound
        if bound.shape == v.shape:
            return bound
        if bound.ndim == 1 and bound.shape[0] == v.shape[0]:
            return _broadcast(bound, v)
        raise ValueError(f"box of shape {bound.shape} does not fit state of shape {v.shape}")

    def active_mask(self, v: np.ndarray) -> np.ndarray:
        """True where clamping changes the coordinate."""
        lo, hi = self._bounds(v)
        return (v < lo) | (v > hi)

    def margin(self, v: np.ndarray) -> float:
        """Smallest distance from any coordinate of v to a finite bound."""
        lo, hi = self._bounds(v)
        d = np.minimum(np.abs(v - lo), np.abs(hi - v))
        return float(d.min()) if d.size else np.inf

    def as_dict(self) -> dict:
        out = {}
        if self.lo is not None:
            out["lo"] = self.lo.tolist()
        if self.hi is not None:
            out["hi"] = self.hi.tolist()
        return out


def _check_metric_dims(v: np.ndarray, g: Metric):
    if v.shape[0] != g.dim:
        raise ValueError(f"dimension mismatch: state has {v.shape[0]} coordinates, metric has {g.dim}")


def g_norm(v, g: Metric) -> float:
    """Norm induced by G: sqrt(<v, G v>)."""
    v = _as_float(v)
    _check_metric_dims(v, g)
    return float(np.sqrt(np.sum(g.apply(v) * v)))


def soft_threshold(v, tau) -> np.ndarray:
    """Proximal map of the weighted l1 norm: sign(v) * max(|v| - tau, 0)."""
    v = _as_float(v)
    tau = _as_float(tau)
    if np.any(tau < 0):
        raise ValueError("soft-threshold weights must be nonnegative")
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def power_iteration_norm(m, iters: int = POWER_ITERS, tol: float = POWER_TOL) -> float:
    """Largest singular value of ``m`` by power iteration on m^T m.

    Starts from the normalized all-ones vector so the result is
    reproducible.  If that start lies in the null space of a nonzero
    matrix, restarts from the basis vector of the largest column.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not tol > 0:
        raise ValueError("tol must be positive")
    m = _as_float(m)
    if m.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    if not np.any(m):
        return 0.0
    v = np.ones(m.shape[1]) / np.sqrt(m.shape[1])
    if not np.any(m @ v):
        v = np.zeros(m.shape[1])
        v[np.argmax(np.sum(m * m, axis=0))] = 1.0
    est = 0.0
    for _ in range(iters):
        mv = m @ v
        new = float(np.linalg.norm(mv))
        w = m.T @ mv
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return max(est, new)
        v = w / nw
        if abs(new - est) <= tol * max(new, 1.0):
            est = max(est, new)
            break
        est = max(est, new)
    return est


def project_box_g(v, box: Box, g: Metric) -> np.ndarray:
    """G-metric projection onto an axis-aligned box.

    With a diagonal G the projection separates per coordinate, so it is
    the plain clamp whatever the weights are.
    """
    v = _as_float(v)
    _check_metric_dims(v, g)
    if box.is_unbounded:
        return v.copy()
    lo, hi = box._bounds(v)
    return np.clip(v, lo, hi)
