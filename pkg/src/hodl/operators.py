"""Parameterized fixed-point operators D(u, w) and their cotangent products.

Every operator exposes

* ``apply(u, w, pre)``: forward evaluation;
* ``vjp(u, w, cot, pre)``: returns ``(cot_u, cot_w)`` where ``cot_w`` maps
  parameter names to arrays shaped like the parameters;
* ``precompute(w)``: derived constants (spectral-norm scales, ...) that are
  fixed for one parameter value and treated as constants by ``vjp``;
* ``kink_margin(u, w, pre)``: distance of the evaluation point to the
  nearest point where the map is not differentiable.

``pre`` may be omitted, in which case it is computed from ``w``.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .linalg import Metric, g_norm, power_iteration_norm, soft_threshold
from .params import ParamLayout, ParamVector

EMPTY_LAYOUT = ParamLayout([])


class MissingCotangentError(NotImplementedError):
    pass


def add_cotangents(*parts: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for part in parts:
        for name, val in part.items():
            if name in out:
                out[name] = out[name] + val
            else:
                out[name] = np.asarray(val, dtype=np.float64)
    return out


def _col(v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Broadcast a coordinate vector against a (possibly batched) state."""
    return v.reshape(v.shape + (1,) * (u.ndim - 1))


def _sum_trailing(a: np.ndarray, ndim: int) -> np.ndarray:
    while a.ndim > ndim:
        a = a.sum(axis=-1)
    return a


class ParamOperator:
    """Base class for D(u, w).

    ``rho_bar`` is the advertised Lipschitz factor in the metric (1.0 for a
    non-expansive map, < 1 for a contraction, ``None`` when no bound is
    certified).  ``state_shape`` is the shape of u when the operator carries
    data that fixes it, otherwise ``None``; ``columnwise`` operators act on
    each column of a batched state independently.
    """

    kind = "operator"
    rho_bar: float | None = 1.0
    columnwise = False
    state_shape: tuple | None = None

    def __init__(self, metric: Metric, layout: ParamLayout = EMPTY_LAYOUT):
        self.metric = metric
        self.layout = layout

    @property
    def dim(self) -> int:
        return self.metric.dim

    def precompute(self, w: ParamVector) -> object:
        return None

    def _pre(self, w, pre):
        return self.precompute(w) if pre is None else pre

    def apply(self, u, w: ParamVector, pre=None) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, u, w: ParamVector, cot, pre=None):
        raise MissingCotangentError(f"operator {self.kind!r} provides no cotangent product")

    def kink_margin(self, u, w: ParamVector, pre=None) -> float:
        return np.inf

    def __call__(self, u, w: ParamVector, pre=None) -> np.ndarray:
        return self.apply(u, w, pre)

    def _check(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.shape[0] != self.dim:
            raise ValueError(
                f"{self.kind}: state has {u.shape[0]} coordinates, operator expects {self.dim}"
            )
        return u


class Identity(ParamOperator):
    kind = "identity"
    columnwise = True

    def __init__(self, metric: Metric):
        super().__init__(metric)

    def apply(self, u, w, pre=None):
        return self._check(u).copy()

    def vjp(self, u, w, cot, pre=None):
        return np.array(cot, dtype=np.float64), {}


class Scaling(ParamOperator):
    """u -> factor * u."""

    kind = "scaling"
    columnwise = True

    def __init__(self, factor: float, metric: Metric):
        super().__init__(metric)
        self.factor = float(factor)
        self.rho_bar = abs(self.factor)

    def apply(self, u, w, pre=None):
        return self.factor * self._check(u)

    def vjp(self, u, w, cot, pre=None):
        return self.factor * np.asarray(cot, dtype=np.float64), {}


class Constant(ParamOperator):
    """u -> c, a constant map whose unique fixed point is c."""

    kind = "constant"
    rho_bar = 0.0

    def __init__(self, value, metric: Metric):
        super().__init__(metric)
        self.value = np.array(value, dtype=np.float64)
        self.state_shape = self.value.shape

    def apply(self, u, w, pre=None):
        self._check(u)
        return self.value.copy()

    def vjp(self, u, w, cot, pre=None):
        return np.zeros_like(np.asarray(u, dtype=np.float64)), {}


class SubspaceProjection(ParamOperator):
    """Orthogonal projection onto the span of the first ``keep`` coordinates.

    Non-expansive with a whole subspace of fixed points.
    """

    kind = "subspace_projection"
    columnwise = True

    def __init__(self, keep: int, metric: Metric):
        super().__init__(metric)
        if not 1 <= keep < metric.dim:
            raise ValueError("keep must satisfy 1 <= keep < dim")
        self.keep = int(keep)

    def apply(self, u, w, pre=None):
        out = self._check(u).copy()
        out[self.keep:] = 0.0
        return out

    def vjp(self, u, w, cot, pre=None):
        c = np.array(cot, dtype=np.float64)
        c[self.keep:] = 0.0
        return c, {}


class PGOperator(ParamOperator):
    """Proximal-gradient step for 1/2 ||Q u - b||^2 + kappa ||u||_1.

    Solves argmin_v <grad f(u), v - u> + kappa ||v||_1 + 1/(2 step) ||v - u||_G^2
    in closed form: ST(u - step G^{-1} Q^T (Q u - b), step kappa / G).
    Columns of a batched u are independent problems with the matching
    columns of b.
    """

    kind = "pg"

    def __init__(self, Q, b, metric: Metric, prefix: str = "pg"):
        Q = np.asarray(Q, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if Q.shape[1] != metric.dim:
            raise ValueError("dictionary width does not match metric dimension")
        if b.shape[0] != Q.shape[0]:
            raise ValueError("observation length does not match dictionary height")
        self.kappa_name = f"{prefix}.kappa"
        self.step_name = f"{prefix}.step"
        super().__init__(metric, ParamLayout([(self.kappa_name, ()), (self.step_name, ())]))
        self.Q = Q
        self.b = b
        self.gram = Q.T @ Q
        self.state_shape = (Q.shape[1],) + b.shape[1:]

    def lipschitz_of_gradient(self) -> float:
        """Largest eigenvalue of G^{-1/2} Q^T Q G^{-1/2}."""
        s = 1.0 / np.sqrt(self.metric.diag)
        return power_iteration_norm(self.Q * s[None, :]) ** 2

    def with_observations(self, b) -> "PGOperator":
        return PGOperator(self.Q, b, self.metric, prefix=self.kappa_name.rsplit(".", 1)[0])

    def _coeffs(self, w):
        kappa = float(w[self.kappa_name])
        step = float(w[self.step_name])
        if not step > 0:
            raise ValueError(f"pg step must be positive, got {step}")
        if kappa < 0:
            raise ValueError(f"pg kappa must be nonnegative, got {kappa}")
        return kappa, step

    def _pre_threshold(self, u, w):
        kappa, step = self._coeffs(w)
        ginv = _col(1.0 / self.metric.diag, u)
        resid = self.Q.T @ (self.Q @ u - self.b)
        z = u - step * ginv * resid
        tau = step * kappa * ginv
        return z, tau, resid, ginv, kappa, step

    def apply(self, u, w, pre=None):
        u = self._check(u)
        z, tau, *_ = self._pre_threshold(u, w)
        return soft_threshold(z, np.broadcast_to(tau, z.shape))

    def vjp(self, u, w, cot, pre=None):
        u = self._check(u)
        cot = np.asarray(cot, dtype=np.float64)
        z, tau, resid, ginv, kappa, step = self._pre_threshold(u, w)
        active = np.abs(z) > tau
        c_z = np.where(active, cot, 0.0)
        c_tau = -np.sign(z) * c_z
        c_kappa = np.sum(c_tau * step * ginv)
        c_step = np.sum(c_tau * kappa * ginv) - np.sum(c_z * ginv * resid)
        c_u = c_z - step * (self.gram @ (ginv * c_z))
        return c_u, {self.kappa_name: np.asarray(c_kappa), self.step_name: np.asarray(c_step)}

    def kink_margin(self, u, w, pre=None):
        z, tau, *_ = self._pre_threshold(self._check(u), w)
        return float(np.min(np.abs(np.abs(z) - tau)))


class LALMOperator(ParamOperator):
    """Linearized augmented-Lagrangian step for

        min kappa ||u||_1 + ||u_n||_1   s.t.  Q u + u_n = b.

    State rows are stacked as (u [n], u_n [m], lam [m]).  With A = [Q I]
    and the proximal metric sigma I - beta A^T A the primal subproblem is a
    soft threshold:

        x+   = ST(x - (A^T lam + beta A^T (A x - b)) / sigma, tau / sigma)
        lam+ = lam + beta (A x+ - b)

    with tau = kappa on the u block and 1 on the u_n block.
    """

    kind = "lalm"
    rho_bar = None

    def __init__(self, Q, b, beta: float, sigma: float | None = None, prefix: str = "alm",
                 sigma_margin: float = 1.01):
        Q = np.asarray(Q, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        m, n = Q.shape
        if b.shape[0] != m:
            raise ValueError("observation length does not match dictionary height")
        if not beta > 0:
            raise ValueError("beta must be positive")
        A = np.hstack([Q, np.eye(m)])
        a_norm2 = power_iteration_norm(A) ** 2
        if sigma is None:
            sigma = sigma_margin * beta * a_norm2
        if not sigma > beta * a_norm2:
            raise ValueError(
                f"sigma={sigma} must exceed beta*||A||^2={beta * a_norm2} for a positive-definite metric"
            )
        self.n, self.m = n, m
        self.Q, self.b, self.A = Q, b, A
        self.beta, self.sigma = float(beta), float(sigma)
        self.kappa_name = f"{prefix}.kappa"
        diag = np.concatenate([np.full(n + m, self.sigma), np.full(m, 1.0 / self.beta)])
        super().__init__(Metric.from_diag(diag), ParamLayout([(self.kappa_name, ())]))
        self.state_shape = (n + 2 * m,) + b.shape[1:]

    def with_observations(self, b) -> "LALMOperator":
        return LALMOperator(self.Q, b, self.beta, self.sigma, prefix=self.kappa_name.rsplit(".", 1)[0])

    def implicit_metric(self) -> np.ndarray:
        """Dense block-diagonal metric diag(sigma I - beta A^T A, I / beta) in
        which the step is a proximal-point map."""
        nx = self.n + self.m
        H = np.zeros((nx + self.m, nx + self.m))
        H[:nx, :nx] = self.sigma * np.eye(nx) - self.beta * self.A.T @ self.A
        H[nx:, nx:] = np.eye(self.m) / self.beta
        return H

    def split(self, z):
        nx = self.n + self.m
        return z[:nx], z[nx:]

    def _kappa(self, w):
        kappa = float(w[self.kappa_name])
        if kappa < 0:
            raise ValueError(f"alm kappa must be nonnegative, got {kappa}")
        return kappa

    def _tau(self, kappa, x):
        tau = np.concatenate([np.full(self.n, kappa), np.ones(self.m)]) / self.sigma
        return _col(tau, x)

    def _pre_threshold(self, z, w):
        x, lam = self.split(z)
        kappa = self._kappa(w)
        p = x - (self.A.T @ (lam + self.beta * (self.A @ x - self.b))) / self.sigma
        return x, lam, p, self._tau(kappa, x)

    def apply(self, u, w, pre=None):
        z = self._check(u)
        x, lam, p, tau = self._pre_threshold(z, w)
        x_new = soft_threshold(p, np.broadcast_to(tau, p.shape))
        lam_new = lam + self.beta * (self.A @ x_new - self.b)
        return np.concatenate([x_new, lam_new], axis=0)

    def vjp(self, u, w, cot, pre=None):
        z = self._check(u)
        cot = np.asarray(cot, dtype=np.float64)
        c_x_new, c_lam_new = self.split(cot)
        x, lam, p, tau = self._pre_threshold(z, w)
        c_x_total = c_x_new + self.beta * (self.A.T @ c_lam_new)
        active = np.abs(p) > tau
        c_p = np.where(active, c_x_total, 0.0)
        c_tau = -np.sign(p) * c_p
        c_kappa = np.sum(c_tau[: self.n]) / self.sigma
        AcP = self.A @ c_p
        c_x = c_p - (self.beta / self.sigma) * (self.A.T @ AcP)
        c_lam = c_lam_new - AcP / self.sigma
        return np.concatenate([c_x, c_lam], axis=0), {self.kappa_name: np.asarray(c_kappa)}

    def kink_margin(self, u, w, pre=None):
        _, _, p, tau = self._pre_threshold(self._check(u), w)
        return float(np.min(np.abs(np.abs(p) - tau)))


class GDQuadratic(ParamOperator):
    """Gradient step u - eta (H u - w) on f(u; w) = 1/2 u^T H u - w^T u."""

    kind = "gd_quadratic"
    columnwise = False

    def __init__(self, H, eta: float, metric: Metric | None = None, name: str = "omega"):
        H = np.asarray(H, dtype=np.float64)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValueError("H must be square")
        if not eta > 0:
            raise ValueError(f"step length eta must be positive, got {eta}")
        dim = H.shape[0]
        self.name = name
        super().__init__(metric or Metric.identity(dim), ParamLayout([(name, (dim,))]))
        self.H = H
        self.eta = float(eta)
        self.state_shape = (dim,)
        self.rho_bar = self.contraction_factor()

    def contraction_factor(self) -> float:
        lam = np.linalg.eigvalsh(0.5 * (self.H + self.H.T))
        return float(np.max(np.abs(1.0 - self.eta * lam)))

    def value(self, u, w) -> float:
        u = np.asarray(u, dtype=np.float64)
        return float(0.5 * u @ self.H @ u - w[self.name] @ u)

    def gradient(self, u, w) -> np.ndarray:
        return self.H @ np.asarray(u, dtype=np.float64) - w[self.name]

    def apply(self, u, w, pre=None):
        u = self._check(u)
        return u - self.eta * (self.H @ u - w[self.name])

    def vjp(self, u, w, cot, pre=None):
        cot = np.asarray(cot, dtype=np.float64)
        return cot - self.eta * (self.H.T @ cot), {self.name: self.eta * cot}


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


class GDWeightedLS(ParamOperator):
    """Gradient step on the per-sample weighted ridge objective

        f(u; w) = (1/n) sum_i sigmoid(w_i) (x_i^T u - y_i)^2 + ridge ||u||^2.

    ``eta`` defaults to 1 / L with L = 2 lambda_max(X^T X) / n + 2 ridge,
    which bounds the Hessian for every weight vector.
    """

    kind = "gd_weighted_ls"

    def __init__(self, X, y, ridge: float, eta: float | None = None, name: str = "logits"):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if not ridge > 0:
            raise ValueError("ridge must be positive for a contractive step")
        n, d = X.shape
        self.X, self.y, self.ridge, self.name = X, y, float(ridge), name
        self.n = n
        L = 2.0 * power_iteration_norm(X) ** 2 / n + 2.0 * ridge
        self.smoothness = L
        self.eta = 1.0 / L if eta is None else float(eta)
        if not 0 < self.eta < 2.0 / L:
            raise ValueError("eta must lie in (0, 2/L)")
        super().__init__(Metric.identity(d), ParamLayout([(name, (n,))]))
        self.state_shape = (d,)
        # contraction certified by the ridge term alone
        self.rho_bar = max(abs(1.0 - 2.0 * self.eta * ridge), abs(1.0 - self.eta * L))

    def value(self, u, w) -> float:
        r = self.X @ u - self.y
        return float(np.mean(sigmoid(w[self.name]) * r * r) + self.ridge * u @ u)

    def gradient(self, u, w) -> np.ndarray:
        r = self.X @ u - self.y
        return (2.0 / self.n) * self.X.T @ (sigmoid(w[self.name]) * r) + 2.0 * self.ridge * u

    def apply(self, u, w, pre=None):
        u = self._check(u)
        return u - self.eta * self.gradient(u, w)

    def vjp(self, u, w, cot, pre=None):
        u = self._check(u)
        cot = np.asarray(cot, dtype=np.float64)
        sw = sigmoid(w[self.name])
        Xc = self.X @ cot
        r = self.X @ u - self.y
        c_u = cot - self.eta * ((2.0 / self.n) * self.X.T @ (sw * Xc) + 2.0 * self.ridge * cot)
        c_w = -self.eta * (2.0 / self.n) * sw * (1.0 - sw) * r * Xc
        return c_u, {self.name: c_w}


class NetOperator(ParamOperator):
    """Fully connected ReLU network conjugated by the metric:

        u -> G^{-1/2} net(G^{1/2} u),
        net = relu(W_L h + b_L) o ... o relu(W_1 h + b_1).

    Each weight matrix is divided by max(1, sigma_hat) where sigma_hat is a
    power-iteration estimate of its spectral norm, so every layer and hence
    the conjugated map are 1-Lipschitz in the G-norm.  The scales are
    computed in ``precompute`` and held constant by ``vjp``.
    """

    kind = "net"
    columnwise = True

    def __init__(self, metric: Metric, n_layers: int = 2, normalize: bool = True, prefix: str = "net"):
        if n_layers < 1:
            raise ValueError("need at least one layer")
        dim = metric.dim
        self.n_layers = n_layers
        self.normalize = normalize
        self.w_names = [f"{prefix}.W{i}" for i in range(n_layers)]
        self.b_names = [f"{prefix}.b{i}" for i in range(n_layers)]
        entries = []
        for wn, bn in zip(self.w_names, self.b_names):
            entries += [(wn, (dim, dim)), (bn, (dim,))]
        super().__init__(metric, ParamLayout(entries))
        self.rho_bar = 1.0 if normalize else None

    def precompute(self, w):
        scales = []
        for wn in self.w_names:
            W = np.asarray(w[wn])
            if W.shape != (self.dim, self.dim):
                raise ValueError(f"{wn} has shape {W.shape}, expected {(self.dim, self.dim)}")
            scales.append(max(1.0, power_iteration_norm(W)) if self.normalize else 1.0)
        return tuple(scales)

    def _forward(self, u, w, scales):
        h = self.metric.sqrt_apply(u)
        hs, pres = [], []
        for wn, bn, s in zip(self.w_names, self.b_names, scales):
            a = (w[wn] / s) @ h + _col(np.asarray(w[bn]), h)
            hs.append(h)
            pres.append(a)
            h = np.maximum(a, 0.0)
        return h, hs, pres

    def apply(self, u, w, pre=None):
        u = self._check(u)
        scales = self._pre(w, pre)
        h, _, _ = self._forward(u, w, scales)
        return self.metric.inv_sqrt_apply(h)

    def vjp(self, u, w, cot, pre=None):
        u = self._check(u)
        scales = self._pre(w, pre)
        _, hs, pres = self._forward(u, w, scales)
        c = self.metric.inv_sqrt_apply(np.asarray(cot, dtype=np.float64))
        grads = {}
        for i in reversed(range(self.n_layers)):
            c_a = np.where(pres[i] > 0, c, 0.0)
            h = hs[i]
            if h.ndim == 1:
                grads[self.w_names[i]] = np.outer(c_a, h) / scales[i]
                grads[self.b_names[i]] = c_a
            else:
                flat_c = c_a.reshape(self.dim, -1)
                flat_h = h.reshape(self.dim, -1)
                grads[self.w_names[i]] = flat_c @ flat_h.T / scales[i]
                grads[self.b_names[i]] = flat_c.sum(axis=1)
            c = (w[self.w_names[i]] / scales[i]).T @ c_a
        return self.metric.sqrt_apply(c), grads

    def kink_margin(self, u, w, pre=None):
        _, _, pres = self._forward(self._check(u), w, self._pre(w, pre))
        return float(min(np.min(np.abs(a)) for a in pres))


class Composition(ParamOperator):
    """outer o inner: the inner operator is applied first."""

    kind = "composition"

    def __init__(self, outer: ParamOperator, inner: ParamOperator):
        if not outer.metric.same_as(inner.metric):
            raise ValueError("composed operators must share the same metric")
        super().__init__(outer.metric, outer.layout.merge(inner.layout))
        self.outer, self.inner = outer, inner
        self.kind = f"{outer.kind}o{inner.kind}"
        self.columnwise = outer.columnwise and inner.columnwise
        self.state_shape = outer.state_shape or inner.state_shape
        if outer.rho_bar is None or inner.rho_bar is None:
            self.rho_bar = None
        else:
            self.rho_bar = outer.rho_bar * inner.rho_bar

    def precompute(self, w):
        return (self.outer.precompute(w), self.inner.precompute(w))

    def apply(self, u, w, pre=None):
        po, pi = self._pre(w, pre)
        return self.outer.apply(self.inner.apply(u, w, pi), w, po)

    def vjp(self, u, w, cot, pre=None):
        po, pi = self._pre(w, pre)
        v = self.inner.apply(u, w, pi)
        c_v, g_outer = self.outer.vjp(v, w, cot, po)
        c_u, g_inner = self.inner.vjp(u, w, c_v, pi)
        return c_u, add_cotangents(g_outer, g_inner)

    def kink_margin(self, u, w, pre=None):
        po, pi = self._pre(w, pre)
        v = self.inner.apply(u, w, pi)
        return min(self.inner.kink_margin(u, w, pi), self.outer.kink_margin(v, w, po))


class KmOperator:
    """Krasnoselskii-Mann averaging T(u, w) = u + alpha (D(u, w) - u)."""

    def __init__(self, inner: ParamOperator, alpha: float = 0.5):
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must lie strictly inside (0, 1), got {alpha}")
        self.inner = inner
        self.alpha = float(alpha)

    @property
    def metric(self) -> Metric:
        return self.inner.metric

    @property
    def layout(self) -> ParamLayout:
        return self.inner.layout

    @property
    def kind(self) -> str:
        return f"km[{self.inner.kind}]"

    def with_alpha(self, alpha: float) -> "KmOperator":
        return KmOperator(self.inner, alpha)

    def precompute(self, w):
        return self.inner.precompute(w)

    def apply(self, u, w, pre=None):
        u = np.asarray(u, dtype=np.float64)
        d = self.inner.apply(u, w, pre)
        return (1.0 - self.alpha) * u + self.alpha * d

    __call__ = apply

    def vjp(self, u, w, cot, pre=None):
        cot = np.asarray(cot, dtype=np.float64)
        c_u, c_w = self.inner.vjp(u, w, cot, pre)
        return (1.0 - self.alpha) * cot + self.alpha * c_u, {k: self.alpha * v for k, v in c_w.items()}

    def kink_margin(self, u, w, pre=None):
        return self.inner.kink_margin(u, w, pre)


def km_apply(t: KmOperator, u, w: ParamVector, pre=None) -> np.ndarray:
    return t.apply(u, w, pre)


def compose_apply(outer: ParamOperator, inner: ParamOperator, u, w: ParamVector) -> np.ndarray:
    return Composition(outer, inner).apply(u, w)


def estimate_lipschitz(op, w: ParamVector, samples: int = 1000, seed: int = 0,
                       scale: float = 1.0, state_shape: tuple | None = None) -> float:
    """Largest observed ratio ||op(u1) - op(u2)||_G / ||u1 - u2||_G.

    Pairs are u1 ~ N(0, scale^2) and u2 = u1 + delta N(0, 1) with delta
    log-uniform in [1e-3, 1] * scale, so both distant and nearby pairs are
    probed.  Deterministic given ``seed``.
    """
    if samples < 2:
        raise ValueError("need at least 2 sample pairs")
    inner = op.inner if isinstance(op, KmOperator) else op
    metric = op.metric
    shape = state_shape or inner.state_shape or (metric.dim,)
    rng = np.random.default_rng(seed)
    pre = op.precompute(w)
    diag = metric.diag

    if inner.columnwise and len(shape) == 1:
        best = 0.0
        chunk = 2048
        done = 0
        while done < samples:
            cnt = min(chunk, samples - done)
            u1 = scale * rng.standard_normal((shape[0], cnt))
            delta = scale * 10.0 ** rng.uniform(-3.0, 0.0, size=cnt)
            u2 = u1 + delta * rng.standard_normal((shape[0], cnt))
            d_out = op.apply(u1, w, pre) - op.apply(u2, w, pre)
            d_in = u1 - u2
            num = np.sqrt(np.sum(diag[:, None] * d_out * d_out, axis=0))
            den = np.sqrt(np.sum(diag[:, None] * d_in * d_in, axis=0))
            best = max(best, float(np.max(num / den)))
            done += cnt
        return best

    best = 0.0
    for _ in range(samples):
        u1 = scale * rng.standard_normal(shape)
        delta = scale * 10.0 ** rng.uniform(-3.0, 0.0)
        u2 = u1 + delta * rng.standard_normal(shape)
        num = g_norm(op.apply(u1, w, pre) - op.apply(u2, w, pre), metric)
        den = g_norm(u1 - u2, metric)
        best = max(best, num / den)
    return best
