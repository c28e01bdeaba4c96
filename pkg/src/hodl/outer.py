"""Outer learning loop: projected (or adaptive-moment) descent on phi_K."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .hypergrad import hypergradient
from .inner import ADAPTIVE_MOMENTS, NonFiniteError, SolverConfig, fixed_point_residual
from .linalg import Box
from .params import ParamVector

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class OuterRow:
    outer_iter: int
    phi_K: float
    hypergrad_g_norm: float
    fp_residual_g_lb: float
    inner_K: int
    wall_ms: float


@dataclass
class OuterTrace:
    rows: list = field(default_factory=list)
    omegas: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    inner_residuals: list = field(default_factory=list)

    @property
    def final_omega(self) -> ParamVector:
        return self.omegas[-1]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])


def project_omega(flat: np.ndarray, box: Box | None) -> np.ndarray:
    if box is None or box.is_unbounded:
        return flat
    lo, hi = box._bounds(flat)
    return np.clip(flat, lo, hi)


def stationarity(flat: np.ndarray, grad: np.ndarray, box: Box | None) -> float:
    """Norm of the projected-gradient map w - Proj_Omega(w - grad)."""
    return float(np.linalg.norm(flat - project_omega(flat - grad, box)))


def outer_loop(problem, cfg: SolverConfig, timing: bool = True,
               record_inner_residuals: bool = False) -> OuterTrace:
    """Run T outer steps on ``problem``, re-initializing u from the problem's
    u_init at every step."""
    t = problem.operator.with_alpha(cfg.alpha)
    loss = problem.loss
    box = cfg.omega_box if cfg.omega_box is not None else problem.omega_box
    w = problem.omega_init.replace(project_omega(problem.omega_init.flat.copy(), box))
    trace = OuterTrace(omegas=[w])
    m = np.zeros(w.flat.size)
    v = np.zeros(w.flat.size)
    g_lb = t.metric.lower()
    for step in range(1, cfg.T + 1):
        start = time.perf_counter()
        hg = hypergradient(t, loss, w, problem.u_init, cfg, keep_tape=True)
        if not np.isfinite(hg.phi_value):
            raise NonFiniteError("phi_K", step)
        grad = hg.wrt_omega
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError("hypergradient", step)
        tape = hg.tape
        residual = fixed_point_residual(t, tape.final, w, g_lb, tape.pre)
        if record_inner_residuals:
            us = [r.u_prev for r in tape.records] + [tape.final]
            trace.inner_residuals.append([fixed_point_residual(t, u, w, g_lb, tape.pre) for u in us])
        eps_k = stationarity(w.flat, grad, box)

        if cfg.outer_update == ADAPTIVE_MOMENTS:
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad
            m_hat = m / (1.0 - ADAM_BETA1 ** step)
            v_hat = v / (1.0 - ADAM_BETA2 ** step)
            flat = w.flat - cfg.gamma * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        else:
            flat = w.flat - cfg.gamma * grad
        w = w.replace(project_omega(flat, box))
        wall = (time.perf_counter() - start) * 1e3 if timing else 0.0
        trace.rows.append(OuterRow(step, hg.phi_value, eps_k, residual, cfg.K, wall))
        trace.omegas.append(w)
    return trace
