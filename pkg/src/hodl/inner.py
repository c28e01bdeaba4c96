"""Inner iterations on the optimization variables u.

Aggregated mode combines the lower-level direction v_l = T(u, w) with a
G-preconditioned, diminishing-step gradient direction of the upper loss,

    v_u = u - s_k G^{-1} grad_u l(u, w),    s_k = s / (k + 1),
    u+  = Proj_U(mu v_u + (1 - mu) v_l),

while simplified mode keeps only u+ = Proj_U(v_l).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import Box, Metric, g_norm, project_box_g
from .losses import LossFunction
from .operators import KmOperator
from .params import ParamVector

AGGREGATED = "aggregated"
SIMPLIFIED = "simplified"
PROJECTED_GD = "projected_gd"
ADAPTIVE_MOMENTS = "adaptive_moments"


class NonFiniteError(FloatingPointError):
    """Raised when an iterate or objective stops being finite."""

    def __init__(self, what: str, step: int):
        super().__init__(f"non-finite {what} at step {step}")
        self.what = what
        self.step = step


@dataclass(frozen=True)
class SolverConfig:
    mode: str = AGGREGATED
    alpha: float = 0.5
    mu: float = 0.1
    s: float | None = None  # None: half of the largest admissible value
    K: int = 50
    gamma: float = 0.01
    T: int = 200
    outer_update: str = PROJECTED_GD
    u_box: Box = field(default_factory=Box)
    omega_box: Box | None = None  # None: the problem's default box
    seed: int = 1126
    strict_step_bound: bool = True

    def __post_init__(self):
        if self.mode not in (AGGREGATED, SIMPLIFIED):
            raise ValueError(f"mode must be {AGGREGATED!r} or {SIMPLIFIED!r}, got {self.mode!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 <= self.mu < 1.0:
            raise ValueError(f"mu must lie in [0, 1), got {self.mu}")
        if self.s is not None and not self.s > 0:
            raise ValueError(f"s must be positive, got {self.s}")
        if int(self.K) != self.K or self.K < 0:
            raise ValueError(f"K must be a nonnegative integer, got {self.K}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        if int(self.T) != self.T or self.T < 0:
            raise ValueError(f"T must be a nonnegative integer, got {self.T}")
        if self.outer_update not in (PROJECTED_GD, ADAPTIVE_MOMENTS):
            raise ValueError(f"unknown outer_update {self.outer_update!r}")

    @property
    def effective_mu(self) -> float:
        return 0.0 if self.mode == SIMPLIFIED else self.mu

    def with_(self, **changes) -> "SolverConfig":
        return replace(self, **changes)


def step_size(k: int, s: float) -> float:
    """Diminishing step s / (k + 1)."""
    if k < 1:
        raise ValueError(f"step index must be >= 1, got {k}")
    return s / (k + 1)


def resolve_s(cfg: SolverConfig, loss: LossFunction, metric: Metric) -> float:
    """Base step s, checked against s < lambda_min(G_lb) / L_l when enforced."""
    bound = None if not loss.smoothness else metric.lower_bound / loss.smoothness
    if cfg.s is None:
        return 0.5 * (bound if bound is not None else metric.lower_bound)
    if cfg.strict_step_bound and bound is not None and not cfg.s < bound:
        raise ValueError(f"s={cfg.s} violates s < lambda_min(G_lb)/L_l = {bound}")
    return float(cfg.s)


@dataclass
class InnerTrace:
    iterates: list
    residuals: list
    loss_values: list

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]


def inner_step(t: KmOperator, loss: LossFunction, w: ParamVector, u_prev: np.ndarray,
               k: int, mu: float, s: float, box: Box, pre=None):
    """One inner update.  Returns (u_k, pre_projection_point, s_k).

    With mu == 0 the gradient direction is skipped entirely, so aggregated
    mode at mu = 0 reproduces simplified mode bit for bit.
    """
    v_l = t.apply(u_prev, w, pre)
    if mu == 0.0:
        z = v_l
        s_k = 0.0
    else:
        s_k = step_size(k, s)
        v_u = u_prev - s_k * t.metric.solve(loss.grad_u(u_prev, w))
        z = mu * v_u + (1.0 - mu) * v_l
    u_k = z if box.is_unbounded else project_box_g(z, box, t.metric)
    return u_k, z, s_k


def fixed_point_residual(t: KmOperator, u, w: ParamVector, g_lb: Metric | None = None,
                         pre=None) -> float:
    """||u - T(u, w)||_{G_lb}."""
    g_lb = t.metric.lower() if g_lb is None else g_lb
    u = np.asarray(u, dtype=np.float64)
    return g_norm(u - t.apply(u, w, pre), g_lb)


def inner_loop(t: KmOperator, loss: LossFunction, w: ParamVector, u0, cfg: SolverConfig,
               pre=None, record: bool = True) -> InnerTrace:
    """Run K inner steps from u0, recording iterates, residuals and losses."""
    mu = cfg.effective_mu
    s = resolve_s(cfg, loss, t.metric) if mu > 0 else 0.0
    pre = t.precompute(w) if pre is None else pre
    g_lb = t.metric.lower()
    u = np.array(u0, dtype=np.float64)
    iterates = [u]
    residuals = [fixed_point_residual(t, u, w, g_lb, pre)] if record else []
    losses = [loss.value(u, w)] if record else []
    for k in range(1, cfg.K + 1):
        u, _, _ = inner_step(t, loss, w, u, k, mu, s, cfg.u_box, pre)
        if not np.all(np.isfinite(u)):
            raise NonFiniteError("inner iterate", k)
        if record:
            iterates.append(u)
            residuals.append(fixed_point_residual(t, u, w, g_lb, pre))
            losses.append(loss.value(u, w))
    if not record:
        iterates = [iterates[0], u]
    return InnerTrace(iterates, residuals, losses)


def envelope(k) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    return np.sqrt((1.0 + np.log1p(k)) / k ** 0.25)


def envelope_check(residuals) -> tuple[float, bool]:
    """Fit C on the first half of squared residuals (indexed from k = 1) and
    test residual_k^2 <= 2 C envelope(k) on the second half."""
    r = np.asarray(residuals, dtype=np.float64)
    if r.size < 8:
        raise ValueError(f"envelope_check needs at least 8 residuals, got {r.size}")
    k = np.arange(1, r.size + 1)
    env = envelope(k)
    sq = r * r
    half = r.size // 2
    C = float(np.max(sq[:half] / env[:half]))
    ok = bool(np.all(sq[half:] <= 2.0 * C * env[half:]))
    return C, ok


def contraction_bound(alpha: float, rho: float) -> float:
    """Lipschitz factor of the averaged map when D has factor rho."""
    return (1.0 - alpha) + alpha * rho
