"""Reverse-mode hypergradients through the unrolled inner loop.

phi_K(w) = l(u^K(w), w).  The forward pass records every inner step on an
``UnrollTape``; the backward pass walks the tape in reverse, pulling the
cotangent of u^K back through the box projection, the averaged operator,
and (aggregated mode) the preconditioned loss-gradient step, while
accumulating cotangents for the learning variables.

Conventions at nondifferentiable points: clamped coordinates of a box
projection get zero cotangent; soft thresholds and ReLUs have zero
derivative at the kink; spectral-norm scales are constants of the forward
pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inner import NonFiniteError, SolverConfig, inner_step, resolve_s
from .linalg import Box
from .losses import LossFunction
from .operators import KmOperator, MissingCotangentError, add_cotangents
from .params import ParamVector


@dataclass
class TapeRecord:
    step: int
    u_prev: np.ndarray
    z: np.ndarray  # point before the projection onto U
    s_k: float


@dataclass
class UnrollTape:
    t: KmOperator
    loss: LossFunction
    w: ParamVector
    u0: np.ndarray
    mu: float
    s: float
    box: Box
    pre: object
    records: list = field(default_factory=list)
    final: np.ndarray | None = None

    def replay(self) -> np.ndarray:
        u = np.array(self.u0, dtype=np.float64)
        for rec in self.records:
            u, _, _ = inner_step(self.t, self.loss, self.w, u, rec.step, self.mu, self.s, self.box, self.pre)
        return u


@dataclass
class Hypergradient:
    wrt_omega: np.ndarray
    phi_value: float
    kink_margin: float = np.inf
    tape: UnrollTape | None = None


def record_unroll(t: KmOperator, loss: LossFunction, w: ParamVector, u0, cfg: SolverConfig,
                  pre=None, track_kinks: bool = False) -> tuple[UnrollTape, float]:
    """Forward pass storing every step.  Also returns the smallest distance
    to a kink seen along the way (inf unless ``track_kinks``)."""
    mu = cfg.effective_mu
    s = resolve_s(cfg, loss, t.metric) if mu > 0 else 0.0
    pre = t.precompute(w) if pre is None else pre
    tape = UnrollTape(t, loss, w, np.array(u0, dtype=np.float64), mu, s, cfg.u_box, pre)
    margin = np.inf
    u = tape.u0
    for k in range(1, cfg.K + 1):
        if track_kinks:
            margin = min(margin, t.kink_margin(u, w, pre))
        u_new, z, s_k = inner_step(t, loss, w, u, k, mu, s, cfg.u_box, pre)
        if not np.all(np.isfinite(u_new)):
            raise NonFiniteError("inner iterate", k)
        if track_kinks and not cfg.u_box.is_unbounded:
            margin = min(margin, cfg.u_box.margin(z))
        tape.records.append(TapeRecord(k, u, z, s_k))
        u = u_new
    tape.final = u
    return tape, margin


def _vjp(obj, method: str, *args):
    try:
        return getattr(obj, method)(*args)
    except MissingCotangentError:
        raise
    except NotImplementedError:
        raise MissingCotangentError(f"{obj.kind!r} provides no cotangent product ({method})") from None


def backward(tape: UnrollTape) -> np.ndarray:
    """Gradient of l(u^K, w) with respect to the flat learning variables."""
    t, loss, w = tape.t, tape.loss, tape.w
    u_bar = _vjp(loss, "grad_u", tape.final, w)
    w_bar = dict(loss.grad_w(tape.final, w))
    metric = t.metric
    for rec in reversed(tape.records):
        c_z = u_bar
        if not tape.box.is_unbounded:
            c_z = np.where(tape.box.active_mask(rec.z), 0.0, u_bar)
        if tape.mu == 0.0:
            c_u, g_w = _vjp(t, "vjp", rec.u_prev, w, c_z, tape.pre)
        else:
            c_vl = (1.0 - tape.mu) * c_z
            c_vu = tape.mu * c_z
            c_u, g_w = _vjp(t, "vjp", rec.u_prev, w, c_vl, tape.pre)
            h_u, h_w = _vjp(loss, "grad_u_vjp", rec.u_prev, w, metric.solve(c_vu))
            c_u = c_u + c_vu - rec.s_k * h_u
            g_w = add_cotangents(g_w, {k: -rec.s_k * v for k, v in h_w.items()})
        w_bar = add_cotangents(w_bar, g_w)
        u_bar = c_u
    unknown = set(w_bar) - set(w.layout.names)
    if unknown:
        raise KeyError(f"cotangents for parameters outside the layout: {sorted(unknown)}")
    return w.layout.flatten(w_bar)


def hypergradient(t: KmOperator, loss: LossFunction, w: ParamVector, u0, cfg: SolverConfig,
                  pre=None, track_kinks: bool = False, keep_tape: bool = False) -> Hypergradient:
    """phi_K(w) and its exact reverse-mode gradient."""
    tape, margin = record_unroll(t, loss, w, u0, cfg, pre, track_kinks)
    phi = loss.value(tape.final, w)
    if not np.isfinite(phi):
        raise NonFiniteError("phi_K", cfg.K)
    grad = backward(tape)
    return Hypergradient(grad, phi, margin, tape if keep_tape else None)


def phi_k(t: KmOperator, loss: LossFunction, w: ParamVector, u0, cfg: SolverConfig, pre=None) -> float:
    tape, _ = record_unroll(t, loss, w, u0, cfg, pre)
    return loss.value(tape.final, w)


def fd_hypergradient(t: KmOperator, loss: LossFunction, w: ParamVector, u0, cfg: SolverConfig,
                     h: float = 1e-5, freeze_precompute: bool = True) -> np.ndarray:
    """Central differences of phi_K with per-coordinate step h (1 + |w_i|).

    With ``freeze_precompute`` the operator's derived constants (spectral
    scales) are computed once at w and reused for every perturbed point,
    matching what the reverse pass differentiates.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    pre = t.precompute(w) if freeze_precompute else None
    base = w.flat
    grad = np.zeros(base.size)
    for i in range(base.size):
        hi = h * (1.0 + abs(base[i]))
        plus = base.copy()
        plus[i] += hi
        minus = base.copy()
        minus[i] -= hi
        f_plus = phi_k(t, loss, w.replace(plus), u0, cfg, pre)
        f_minus = phi_k(t, loss, w.replace(minus), u0, cfg, pre)
        grad[i] = (f_plus - f_minus) / (2.0 * hi)
    return grad


def gradient_check(ad, fd, tol: float) -> tuple[float, bool]:
    """Relative error ||ad - fd|| / max(||ad||, ||fd||, 1e-12)."""
    ad = np.asarray(ad, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    if ad.shape != fd.shape:
        raise ValueError(f"length mismatch: {ad.shape} vs {fd.shape}")
    denom = max(np.linalg.norm(ad), np.linalg.norm(fd), 1e-12)
    rel = float(np.linalg.norm(ad - fd) / denom)
    return rel, rel <= tol


@dataclass
class GradCheckResult:
    rel_error: float
    passed: bool
    resamples: int
    kink_margin: float


def check_at_generic_point(t: KmOperator, loss: LossFunction, w: ParamVector, u0, cfg: SolverConfig,
                           h: float = 1e-5, tol: float = 1e-4, kink_tol: float = 1e-6,
                           seed: int = 0, jitter: float = 1e-3, max_resample: int = 20,
                           omega_box: Box | None = None) -> GradCheckResult:
    """Compare reverse-mode and finite-difference hypergradients.

    If the forward pass comes within ``kink_tol`` of a soft-threshold,
    ReLU or box kink, w is jittered (and clamped back into ``omega_box``)
    and the check is redone.
    """
    rng = np.random.default_rng(seed)
    for attempt in range(max_resample + 1):
        hg = hypergradient(t, loss, w, u0, cfg, track_kinks=True)
        if hg.kink_margin >= kink_tol:
            break
        flat = w.flat + jitter * (1.0 + np.abs(w.flat)) * rng.standard_normal(w.flat.size)
        if omega_box is not None and not omega_box.is_unbounded:
            lo, hi = omega_box._bounds(flat)
            flat = np.clip(flat, lo, hi)
        w = w.replace(flat)
    fd = fd_hypergradient(t, loss, w, u0, cfg, h)
    rel, ok = gradient_check(hg.wrt_omega, fd, tol)
    return GradCheckResult(rel, ok, attempt, hg.kink_margin)
