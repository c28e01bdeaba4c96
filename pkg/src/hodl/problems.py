"""Seeded bilevel task generators and their analytic oracles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import Box, Metric
from .losses import HalfSquaredLoss, LossFunction, MSELoss, ValidationMSE
from .operators import (
    Composition,
    GDQuadratic,
    GDWeightedLS,
    KmOperator,
    LALMOperator,
    NetOperator,
    PGOperator,
    SubspaceProjection,
)
from .params import ParamVector

REGULARIZED = "regularized"
CONSTRAINED = "constrained"
DEFAULT_SEED = 1126


@dataclass
class ProblemInstance:
    kind: str
    operator: KmOperator
    loss: LossFunction
    omega_init: ParamVector
    u_init: np.ndarray
    omega_box: Box = field(default_factory=Box)
    ground_truth: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def with_operator(self, operator: KmOperator) -> "ProblemInstance":
        return ProblemInstance(self.kind, operator, self.loss, self.omega_init, self.u_init,
                               self.omega_box, self.ground_truth, self.metadata, self.extras)


def _layout_and_box(op, loss, init: dict, bounds: dict, trainable=None):
    layout = op.layout.merge(loss.layout)
    w = ParamVector.from_values(layout, init)
    lo = np.full(layout.size, -np.inf)
    hi = np.full(layout.size, np.inf)
    for slot in layout.slots:
        sl = slice(slot.offset, slot.offset + slot.length)
        if slot.name in bounds:
            lo[sl], hi[sl] = bounds[slot.name]
        if trainable is not None and slot.name not in trainable:
            lo[sl] = hi[sl] = w.flat[sl]
    return w, Box(lo, hi)


def _sparse_codes(rng, n, count, density):
    support = rng.random((n, count)) < density
    return np.where(support, rng.standard_normal((n, count)), 0.0)


def gen_sparse_coding(m: int = 500, n: int = 250, density: float = 0.1, noise: float = 0.01,
                      n_samples: int = 1, variant: str = REGULARIZED, seed: int = DEFAULT_SEED,
                      n_test: int = 0, kappa: float | None = None, alpha: float = 0.5,
                      with_net: bool = False, net_layers: int = 2, normalize: bool = True,
                      net_init: str = "identity", net_scale: float = 1.0, beta: float = 1.0,
                      trainable=None) -> ProblemInstance:
    """Synthetic sparse coding b = Q u + noise with a unit-column Gaussian
    dictionary and Bernoulli-Gaussian codes stored as columns.

    ``regularized`` solves min 1/2||Qu - b||^2 + kappa||u||_1 by proximal
    gradient (optionally composed after a spectrally normalized ReLU net);
    ``constrained`` solves min kappa||u||_1 + ||u_n||_1 s.t. Qu + u_n = b by
    linearized ALM on the stacked state (u, u_n, lam).  The loss is the MSE
    between the recovered and the true codes.
    """
    if min(m, n, n_samples) < 1:
        raise ValueError("m, n and n_samples must be >= 1")
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    if noise < 0:
        raise ValueError(f"noise must be nonnegative, got {noise}")
    if variant not in (REGULARIZED, CONSTRAINED):
        raise ValueError(f"unknown variant {variant!r}")

    rng = np.random.default_rng(seed)
    Q = rng.standard_normal((m, n))
    Q /= np.linalg.norm(Q, axis=0, keepdims=True)
    U = _sparse_codes(rng, n, n_samples, density)
    B = Q @ U + noise * rng.standard_normal((m, n_samples))
    if n_test:
        U_test = _sparse_codes(rng, n, n_test, density)
        B_test = Q @ U_test + noise * rng.standard_normal((m, n_test))
    net_rng = np.random.default_rng([seed, 1])

    meta = dict(m=m, n=n, density=density, noise=noise, n_samples=n_samples, variant=variant,
                seed=seed, n_test=n_test)

    def build(b, codes):
        if variant == REGULARIZED:
            metric = Metric.identity(n)
            op = PGOperator(Q, b, metric)
            L = op.lipschitz_of_gradient()
            init = {op.kappa_name: 0.1 if kappa is None else kappa, op.step_name: 1.0 / L}
            bounds = {op.kappa_name: (0.0, 10.0), op.step_name: (1e-3 / L, 1.99 / L)}
            if with_net:
                net = NetOperator(metric, net_layers, normalize=normalize)
                for wn, bn in zip(net.w_names, net.b_names):
                    if net_init == "identity":
                        W = np.eye(n)
                    else:
                        W = net_rng.standard_normal((n, n)) / np.sqrt(n)
                    init[wn] = net_scale * W
                    init[bn] = np.zeros(n)
                    bounds[wn] = (-10.0, 10.0)
                    bounds[bn] = (-10.0, 10.0)
                op = Composition(op, net)
            u0 = np.zeros((n,) + b.shape[1:])
            loss = MSELoss(codes)
        else:
            op = LALMOperator(Q, b, beta)
            init = {op.kappa_name: 1.0 if kappa is None else kappa}
            bounds = {op.kappa_name: (0.0, 10.0)}
            u0 = np.zeros(op.state_shape)
            loss = MSELoss(codes, rows=n)
        t = KmOperator(op, alpha)
        w, box = _layout_and_box(op, loss, init, bounds, trainable)
        return ProblemInstance(f"sparse_coding_{variant}", t, loss, w, u0, box,
                               ground_truth={"codes": codes}, metadata=dict(meta),
                               extras={"Q": Q, "b": b})

    inst = build(B, U)
    if n_test:
        test = build(B_test, U_test)
        inst.extras["test"] = test
    return inst


def _diag_dominant_spd(rng, dim: int) -> np.ndarray:
    off = rng.uniform(-1.0, 1.0, (dim, dim)) / max(dim, 1)
    off = 0.5 * (off + off.T)
    np.fill_diagonal(off, 0.0)
    diag = np.abs(off).sum(axis=1) + rng.uniform(1.0, 2.0, dim)
    return off + np.diag(diag)


class QuadraticOracle:
    """Closed forms for f(u; w) = 1/2 u^T H u - w^T u and l(u) = 1/2||u - c||^2."""

    def __init__(self, H, c):
        self.H = np.asarray(H, dtype=np.float64)
        self.c = np.asarray(c, dtype=np.float64)
        self.Hinv = np.linalg.inv(self.H)
        eig = np.linalg.eigvalsh(self.H)
        self.lam_min, self.lam_max = float(eig[0]), float(eig[-1])

    def u_star(self, omega):
        return self.Hinv @ np.asarray(omega, dtype=np.float64)

    def phi(self, omega) -> float:
        r = self.u_star(omega) - self.c
        return float(0.5 * r @ r)

    def grad_phi(self, omega) -> np.ndarray:
        return self.Hinv.T @ (self.u_star(omega) - self.c)

    @property
    def omega_star(self) -> np.ndarray:
        return self.H @ self.c

    @property
    def safe_step(self) -> float:
        """1 / Lipschitz constant of grad phi (= lambda_min(H)^2)."""
        return self.lam_min ** 2


def quadratic_oracle(dim: int = 10, seed: int = DEFAULT_SEED, H=None, c=None,
                     eta: float | None = None, alpha: float = 0.5, omega_init=None) -> ProblemInstance:
    """Contractive gradient-descent lower level with a closed-form bilevel solution."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    if H is None:
        H = _diag_dominant_spd(rng, dim)
    H = np.asarray(H, dtype=np.float64)
    dim = H.shape[0]
    if c is None:
        c = rng.standard_normal(dim)
    oracle = QuadraticOracle(H, c)
    eta = 1.0 / oracle.lam_max if eta is None else eta
    op = GDQuadratic(H, eta)
    loss = HalfSquaredLoss(oracle.c)
    init = {op.name: np.zeros(dim) if omega_init is None else np.asarray(omega_init, dtype=np.float64)}
    w, box = _layout_and_box(op, loss, init, {op.name: (-1e3, 1e3)})
    return ProblemInstance("quadratic", KmOperator(op, alpha), loss, w, np.zeros(dim), box,
                           ground_truth={"omega_star": oracle.omega_star},
                           metadata=dict(dim=dim, seed=seed, eta=eta),
                           extras={"oracle": oracle, "rho": op.rho_bar})


def subspace_case(dim: int = 2, subspace_dims: int = 1, target=None, u0=None,
                  alpha: float = 0.5) -> ProblemInstance:
    """Projection onto the first coordinates: a non-expansive map whose fixed
    points form a subspace.  The bilevel solution truncates the target."""
    if not 1 <= subspace_dims < dim:
        raise ValueError("need 1 <= subspace_dims < dim")
    target = np.ones(dim) if target is None else np.asarray(target, dtype=np.float64)
    if target.shape != (dim,):
        raise ValueError("target length must equal dim")
    u0 = np.zeros(dim) if u0 is None else np.asarray(u0, dtype=np.float64)
    op = SubspaceProjection(subspace_dims, Metric.identity(dim))
    loss = HalfSquaredLoss(target)
    w, box = _layout_and_box(op, loss, {}, {})

    def truncate(v):
        out = np.array(v, dtype=np.float64)
        out[subspace_dims:] = 0.0
        return out

    return ProblemInstance("subspace", KmOperator(op, alpha), loss, w, u0, box,
                           ground_truth={"solution": truncate(target)},
                           metadata=dict(dim=dim, subspace_dims=subspace_dims),
                           extras={"simplified_limit": truncate(u0), "truncate": truncate})


def gen_hypercleaning(d: int = 5, n_train: int = 100, n_val: int = 50, corrupt_frac: float = 0.3,
                      seed: int = DEFAULT_SEED, noise: float = 0.1, offset: float = 10.0,
                      ridge: float = 0.01, alpha: float = 0.5) -> ProblemInstance:
    """Per-sample weight learning for a planted linear model (first feature
    is an intercept) with a fraction of training labels shifted by offset.  Learning variables are weight
    logits; the lower level is weighted ridge regression solved by gradient
    steps, the upper level is clean validation MSE."""
    if not 0.0 <= corrupt_frac < 1.0:
        raise ValueError(f"corrupt_frac must lie in [0, 1), got {corrupt_frac}")
    if min(d, n_train, n_val) < 1:
        raise ValueError("d, n_train and n_val must be >= 1")
    rng = np.random.default_rng(seed)
    u_true = rng.standard_normal(d)

    def features(count):
        X = rng.standard_normal((count, d))
        X[:, 0] = 1.0  # intercept
        return X

    X = features(n_train)
    y = X @ u_true + noise * rng.standard_normal(n_train)
    n_bad = int(round(corrupt_frac * n_train))
    bad = np.sort(rng.choice(n_train, size=n_bad, replace=False))
    y[bad] += offset
    X_val = features(n_val)
    y_val = X_val @ u_true + noise * rng.standard_normal(n_val)
    mask = np.zeros(n_train, dtype=bool)
    mask[bad] = True

    op = GDWeightedLS(X, y, ridge)
    loss = ValidationMSE(X_val, y_val)
    w, box = _layout_and_box(op, loss, {op.name: np.zeros(n_train)}, {op.name: (-8.0, 8.0)})
    return ProblemInstance("hypercleaning", KmOperator(op, alpha), loss, w, np.zeros(d), box,
                           ground_truth={"u_true": u_true, "corrupted": mask},
                           metadata=dict(d=d, n_train=n_train, n_val=n_val, corrupt_frac=corrupt_frac,
                                         seed=seed, noise=noise, offset=offset, ridge=ridge),
                           extras={"X": X, "y": y, "X_val": X_val, "y_val": y_val})


def clean_ols(problem: ProblemInstance) -> np.ndarray:
    """Least squares on the uncorrupted training samples."""
    keep = ~problem.ground_truth["corrupted"]
    X, y = problem.extras["X"][keep], problem.extras["y"][keep]
    return np.linalg.lstsq(X, y, rcond=None)[0]
