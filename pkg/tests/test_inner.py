import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hodl.inner import (
    AGGREGATED,
    SIMPLIFIED,
    NonFiniteError,
    SolverConfig,
    contraction_bound,
    envelope,
    envelope_check,
    fixed_point_residual,
    inner_loop,
    resolve_s,
    step_size,
)
from hodl.linalg import Box, Metric, g_norm
from hodl.losses import HalfSquaredLoss, MSELoss
from hodl.operators import Constant, Identity, KmOperator, PGOperator, Scaling
from hodl.params import ParamLayout, ParamVector
from hodl.problems import gen_sparse_coding

EMPTY = ParamVector([], ParamLayout([]))


class TestStepSize:
    def test_examples(self):
        assert step_size(1, 0.5) == 0.25
        assert step_size(4, 0.5) == pytest.approx(0.1, abs=1e-16)

    def test_monotone(self):
        vals = [step_size(k, 0.5) for k in range(1, 101)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            step_size(0, 0.5)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(mu=1.0), dict(mu=-0.1), dict(alpha=1.0), dict(mode="x"),
                                     dict(s=0.0), dict(K=-1), dict(outer_update="sgd")])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            SolverConfig(**bad)

    def test_simplified_ignores_mu(self):
        assert SolverConfig(mode=SIMPLIFIED, mu=0.7).effective_mu == 0.0

    def test_s_bound(self):
        loss = HalfSquaredLoss(np.zeros(2))
        g = Metric.from_diag([2.0, 5.0])
        assert resolve_s(SolverConfig(), loss, g) == pytest.approx(1.0)
        assert resolve_s(SolverConfig(s=1.9), loss, g) == 1.9
        with pytest.raises(ValueError, match="lambda_min"):
            resolve_s(SolverConfig(s=2.0), loss, g)
        assert resolve_s(SolverConfig(s=2.0, strict_step_bound=False), loss, g) == 2.0


def _pg_setup(rng, batch=3):
    prob = gen_sparse_coding(m=12, n=8, n_samples=batch, seed=int(rng.integers(1 << 30)))
    return prob.operator, prob.loss, prob.omega_init, prob.u_init


class TestInnerLoop:
    def test_mu_zero_matches_simplified_bitwise(self, rng):
        t, loss, w, u0 = _pg_setup(rng)
        a = inner_loop(t, loss, w, u0, SolverConfig(mode=AGGREGATED, mu=0.0, K=40))
        b = inner_loop(t, loss, w, u0, SolverConfig(mode=SIMPLIFIED, mu=0.3, K=40))
        for x, y in zip(a.iterates, b.iterates):
            assert np.array_equal(x, y)

    def test_trace_lengths(self, rng):
        t, loss, w, u0 = _pg_setup(rng)
        tr = inner_loop(t, loss, w, u0, SolverConfig(K=13))
        assert len(tr.iterates) == len(tr.residuals) == len(tr.loss_values) == 14

    def test_identity_operator_is_diminishing_gradient(self):
        c = np.array([2.0, -1.0])
        d = np.array([1.0, 4.0])
        t = KmOperator(Identity(Metric.from_diag(d)), 0.5)
        loss = HalfSquaredLoss(c)
        mu, s = 0.3, 0.5
        tr = inner_loop(t, loss, EMPTY, np.zeros(2), SolverConfig(mu=mu, s=s, K=60))
        for i in range(2):
            x = 0.0
            for k in range(1, 61):
                x = x - mu * s / (k + 1) / d[i] * (x - c[i])
                assert tr.iterates[k][i] == pytest.approx(x, rel=1e-14, abs=1e-15)
        assert all(b <= a for a, b in zip(tr.loss_values, tr.loss_values[1:]))

    def test_contraction_rate(self, rng):
        g = Metric.from_diag(rng.uniform(0.5, 2.0, 5))
        t = KmOperator(Scaling(0.5, g), 0.5)
        u0 = rng.standard_normal(5)
        tr = inner_loop(t, HalfSquaredLoss(np.zeros(5)), EMPTY, u0, SolverConfig(mode=SIMPLIFIED, K=60))
        rate = contraction_bound(0.5, 0.5)
        assert rate == 0.75
        for k, u in enumerate(tr.iterates):
            assert g_norm(u, g) <= rate ** k * g_norm(u0, g) * (1 + 1e-10)
            assert tr.residuals[k] <= rate ** k * tr.residuals[0] * (1 + 1e-10)

    def test_box_is_respected(self, rng):
        t, loss, w, u0 = _pg_setup(rng)
        box = Box(-0.05, 0.05)
        tr = inner_loop(t, loss, w, u0, SolverConfig(K=20, u_box=box))
        assert all(np.all(np.abs(u) <= 0.05) for u in tr.iterates)

    def test_non_finite_names_step(self):
        t = KmOperator(Scaling(1e200, Metric.identity(1)), 0.5)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NonFiniteError, match="step 1") as exc:
                inner_loop(t, HalfSquaredLoss(np.zeros(1)), EMPTY, np.array([1e200]),
                           SolverConfig(mode=SIMPLIFIED, K=5))
        assert exc.value.step == 1

    def test_aggregated_residual_decreases(self, rng):
        t, loss, w, u0 = _pg_setup(rng)
        tr = inner_loop(t, loss, w, u0, SolverConfig(K=50))
        assert tr.residuals[-1] < tr.residuals[1]


class TestResidual:
    def test_constant_fixed_point(self, rng):
        c = rng.standard_normal(3)
        t = KmOperator(Constant(c, Metric.identity(3)), 0.5)
        assert fixed_point_residual(t, c, EMPTY) == 0.0

    def test_negation(self, rng):
        g = Metric(np.array([1.0, 4.0, 9.0]), 0.5, 9.0)
        t = KmOperator(Scaling(-1.0, g), 0.5)
        u = rng.standard_normal(3)
        assert fixed_point_residual(t, u, EMPTY) == pytest.approx(np.sqrt(0.5) * np.linalg.norm(u), rel=1e-14)

    def test_definition(self, rng):
        t, loss, w, _ = _pg_setup(rng)
        u = rng.standard_normal((8, 3))
        lb = t.metric.lower()
        d = u - t.apply(u, w)
        direct = np.sqrt(np.sum(lb.diag[:, None] * d * d))
        assert fixed_point_residual(t, u, w, lb) == pytest.approx(direct, rel=1e-12)


class TestEnvelope:
    def test_envelope_one(self):
        assert envelope(1) == pytest.approx(np.sqrt(1 + np.log(2)), rel=1e-15)
        assert float(envelope(1)) == pytest.approx(1.3012098910475378, rel=1e-15)

    def test_zero_residuals(self):
        assert envelope_check(np.zeros(20)) == (0.0, True)

    def test_increasing_fails(self):
        assert not envelope_check(np.arange(1, 21, dtype=float))[1]

    def test_too_short(self):
        with pytest.raises(ValueError):
            envelope_check(np.ones(7))

    def test_fit_constant(self):
        k = np.arange(1, 41)
        C, ok = envelope_check(np.sqrt(3.0 * envelope(k)))
        assert ok and C == pytest.approx(3.0, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 10.0), st.floats(0.1, 0.99), st.integers(8, 200))
    def test_geometric_decay_passes(self, scale, rate, n):
        r = scale * rate ** np.arange(1, n + 1)
        assert envelope_check(r)[1]
