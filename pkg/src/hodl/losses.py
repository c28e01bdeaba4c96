"""Upper-level losses l(u, w).

A loss provides its value, the partial gradients in u and w, and the
cotangent product of its u-gradient (a Hessian-vector product), which the
aggregated inner step needs for reverse-mode differentiation.
``smoothness`` is the Lipschitz constant of grad_u, or ``None`` when l does
not depend on u.
"""

from __future__ import annotations

import numpy as np

from .params import ParamLayout

EMPTY = ParamLayout([])


class LossFunction:
    kind = "loss"
    smoothness: float | None = None
    layout: ParamLayout = EMPTY

    def value(self, u, w) -> float:
        raise NotImplementedError

    def grad_u(self, u, w) -> np.ndarray:
        raise NotImplementedError

    def grad_w(self, u, w) -> dict:
        return {}

    def grad_u_vjp(self, u, w, cot):
        """Cotangents of the map (u, w) -> grad_u l(u, w)."""
        raise NotImplementedError


class MSELoss(LossFunction):
    """Mean squared error between a block of rows of u and a target."""

    kind = "mse"

    def __init__(self, target, rows: int | None = None):
        self.target = np.asarray(target, dtype=np.float64)
        self.rows = self.target.shape[0] if rows is None else int(rows)
        if self.rows != self.target.shape[0]:
            raise ValueError("row count does not match target")
        self.smoothness = 2.0 / self.target.size

    def _resid(self, u):
        return np.asarray(u, dtype=np.float64)[: self.rows] - self.target

    def value(self, u, w):
        r = self._resid(u)
        return float(np.mean(r * r))

    def grad_u(self, u, w):
        u = np.asarray(u, dtype=np.float64)
        g = np.zeros_like(u)
        g[: self.rows] = self.smoothness * self._resid(u)
        return g

    def grad_u_vjp(self, u, w, cot):
        c = np.zeros_like(np.asarray(cot, dtype=np.float64))
        c[: self.rows] = self.smoothness * np.asarray(cot)[: self.rows]
        return c, {}


class HalfSquaredLoss(LossFunction):
    """1/2 ||u - c||^2."""

    kind = "half_squared"
    smoothness = 1.0

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    def value(self, u, w):
        r = np.asarray(u, dtype=np.float64) - self.target
        return float(0.5 * np.sum(r * r))

    def grad_u(self, u, w):
        return np.asarray(u, dtype=np.float64) - self.target

    def grad_u_vjp(self, u, w, cot):
        return np.array(cot, dtype=np.float64), {}


class ValidationMSE(LossFunction):
    """Mean squared prediction error of a linear model u on held-out data."""

    kind = "validation_mse"

    def __init__(self, X, y):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        n = self.X.shape[0]
        self.smoothness = 2.0 * float(np.linalg.eigvalsh(self.X.T @ self.X).max()) / n

    def value(self, u, w):
        r = self.X @ u - self.y
        return float(np.mean(r * r))

    def grad_u(self, u, w):
        return (2.0 / self.X.shape[0]) * self.X.T @ (self.X @ u - self.y)

    def grad_u_vjp(self, u, w, cot):
        return (2.0 / self.X.shape[0]) * self.X.T @ (self.X @ cot), {}


class ParamNormLoss(LossFunction):
    """1/2 ||w[name]||^2: depends on the learning variables only."""

    kind = "param_norm"
    smoothness = None

    def __init__(self, name: str, shape: tuple):
        self.name = name
        self.layout = ParamLayout([(name, shape)])

    def value(self, u, w):
        v = w[self.name]
        return float(0.5 * np.sum(v * v))

    def grad_u(self, u, w):
        return np.zeros_like(np.asarray(u, dtype=np.float64))

    def grad_w(self, u, w):
        return {self.name: np.array(w[self.name])}

    def grad_u_vjp(self, u, w, cot):
        return np.zeros_like(np.asarray(cot, dtype=np.float64)), {}
