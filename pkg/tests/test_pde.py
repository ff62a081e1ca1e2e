import json

import numpy as np
import pytest
from scipy.stats import norm

from mihedge.functionals import Asset, FunctionalSpec, RunningMax, Time, TimeIntegral, Weight, WeightedQV
from mihedge.payoffs import Payoff
from mihedge.pde import (BarrierTimer, Corridor, DomainError, GridField, OutOfHull, ScalarField, Timer,
                         field_eval, halton_samples, lookback_field, operators, polynomial_field,
                         problem_from_dict, problem_to_dict, residual, solve_parabolic)

Q = 0.04
LOG_CLOCK = Weight("inv_square", on=0)
QV_SPEC = FunctionalSpec(("S",), (Asset("S"), WeightedQV("S")))
BICK_SPEC = FunctionalSpec(("S",), (Asset("S"), WeightedQV("S", LOG_CLOCK)))
TVS_SPEC = FunctionalSpec(("S",), (Time(), TimeIntegral("S"), Asset("S")))


def bick_square(q=Q):
    def fn(x):
        return x[..., 0] ** 2 * np.exp(q - x[..., 1])

    def grad(x):
        e = np.exp(q - x[..., 1])
        return np.stack([2 * x[..., 0] * e, -x[..., 0] ** 2 * e], -1)

    def hess(x):
        e = np.exp(q - x[..., 1])
        s = x[..., 0]
        return np.stack([np.stack([2 * e, -2 * s * e], -1), np.stack([-2 * s * e, s * s * e], -1)], -2)

    return ScalarField(fn, 2, grad, hess, None, "bick")


@pytest.fixture(scope="module")
def rng():
    return np.random.default_rng(2024)


@pytest.fixture(scope="module")
def lookback_max():
    return lookback_field(lambda s, m: m + 0 * s, 1.0)


class TestOperators:
    def test_asset_is_martingale(self):
        ov = operators(polynomial_field({(1, 0): 1.0}, 2), QV_SPEC, np.array([1.2, 0.3]))
        assert ov.l_alpha.tolist() == [1.0]
        assert np.all(ov.l_ab == 0)
        assert ov.l_gamma == 0

    def test_qv_component(self):
        ov = operators(polynomial_field({(0, 1): 1.0}, 2), QV_SPEC, np.array([1.2, 0.3]))
        assert ov.l_ab.tolist() == [[1.0]]
        assert ov.l_alpha.tolist() == [0.0]

    def test_bick_square_in_solution_set(self, rng):
        x = np.column_stack([rng.uniform(0.5, 2.0, 100), rng.uniform(0.0, Q, 100)])
        rep = residual(bick_square(), BICK_SPEC, x)
        assert rep.max_abs < 1e-8

    def test_bick_pde_by_hand(self, rng):
        x = np.column_stack([rng.uniform(0.5, 2.0, 100), rng.uniform(0.0, Q, 100)])
        F = bick_square()
        H = F.hessian(x)
        g = F.gradient(x)
        assert np.max(np.abs(2 / x[:, 0] ** 2 * g[:, 1] + H[:, 0, 0])) < 1e-12

    def test_domain_error(self):
        F = polynomial_field({(1, 0): 1.0}, 2, box=[[0.5, 2.0], [0.0, 1.0]])
        with pytest.raises(DomainError):
            operators(F, QV_SPEC, np.array([3.0, 0.5]))


class TestResidual:
    def test_affine_zero(self):
        F = polynomial_field({(1, 0): 3.0, (0, 0): -1.0}, 2)
        assert residual(F, QV_SPEC, halton_samples([[0.5, 2], [0, 1]], 64)).max_abs == 0.0

    def test_tvs_member(self):
        F = polynomial_field({(1, 0, 1): 1.3, (0, 1, 0): -1.3, (0, 0, 1): 0.4, (0, 0, 0): 2.0}, 3)
        rep = residual(F, TVS_SPEC, halton_samples([[0, 1], [0, 1], [0.5, 1.5]], 256))
        assert rep.max_abs < 1e-10

    def test_vs_fails(self):
        F = polynomial_field({(0, 1, 1): 1.0}, 3)
        rep = residual(F, TVS_SPEC, halton_samples([[0, 1], [0, 1], [0.5, 1.5]], 256))
        assert rep.max_abs >= 0.5
        assert rep.to_dict()["n_samples"] == 256

    def test_empty_samples(self):
        with pytest.raises(ValueError):
            residual(bick_square(), BICK_SPEC, np.zeros((0, 2)))

    def test_linearity(self, rng):
        x = np.column_stack([rng.uniform(0.5, 2.0, 40), rng.uniform(0.0, 1.0, 40)])
        F = polynomial_field({(2, 0): 1.0, (1, 1): -0.5}, 2)
        G = polynomial_field({(3, 1): 2.0, (0, 2): 1.0}, 2)
        a, b = 1.7, -0.3
        lhs = operators(F.linear_combination(a, G, b), QV_SPEC, x)
        of, og = operators(F, QV_SPEC, x), operators(G, QV_SPEC, x)
        assert np.max(np.abs(lhs.l_ab - (a * of.l_ab + b * og.l_ab))) < 1e-12
        assert np.max(np.abs(lhs.l_gamma - (a * of.l_gamma + b * og.l_gamma))) < 1e-12

    def test_halton_interior(self):
        x = halton_samples([[0.0, 1.0], [2.0, 3.0]], 100)
        assert x.shape == (100, 2)
        assert np.all((x[:, 0] > 0) & (x[:, 0] < 1) & (x[:, 1] > 2) & (x[:, 1] < 3))


class TestFiniteDifferences:
    def test_analytic_matches_fd(self, rng):
        x = np.column_stack([rng.uniform(0.5, 2.0, 50), rng.uniform(0.0, Q, 50)])
        F = bick_square()
        for analytic, fd in ((F.gradient(x), F.fd_gradient(x)), (F.hessian(x), F.fd_hessian(x))):
            assert np.max(np.abs(analytic - fd) / (np.abs(analytic) + 1e-3)) < 1e-5

    def test_polynomial_derivatives(self, rng):
        F = polynomial_field({(2, 1, 0): 1.0, (0, 3, 1): -2.0, (1, 0, 2): 0.5}, 3)
        x = rng.uniform(0.5, 1.5, (50, 3))
        assert np.allclose(F.gradient(x), F.fd_gradient(x), rtol=1e-5, atol=1e-7)
        assert np.allclose(F.hessian(x), F.fd_hessian(x), rtol=1e-5, atol=1e-6)


class TestSolveParabolic:
    def test_identity_payoff(self):
        g = solve_parabolic(Timer(Payoff.linear(0.0, 1.0), LOG_CLOCK, Q))
        assert np.max(np.abs(g.values - g.axes[0][:, None])) < 1e-10

    def test_square_payoff(self):
        g = solve_parabolic(Timer(Payoff.power(2.0), LOG_CLOCK, Q))
        assert float(g.ev(np.array([1.0, 0.0]))) == pytest.approx(np.exp(Q), abs=1e-4)

    def test_call_is_black_scholes(self):
        g = solve_parabolic(Timer(Payoff.call(1.0), LOG_CLOCK, Q))
        bs = 2 * norm.cdf(0.1) - 1
        assert bs == pytest.approx(0.0797, abs=1e-4)
        assert float(g.ev(np.array([1.0, 0.0]))) == pytest.approx(bs, abs=5e-4)

    def test_maximum_principle(self):
        g = solve_parabolic(Timer(Payoff.call(1.0), LOG_CLOCK, Q, n_space=200, n_clock=50))
        # negatives only at the level of rounding in the far tail
        assert g.values.min() >= -1e-14 * g.values.max()

    def test_refinement_second_order(self):
        errs = []
        for n in (100, 200, 400):
            g = solve_parabolic(Timer(Payoff.power(2.0), LOG_CLOCK, Q, n_space=n, n_clock=n))
            X, T = np.meshgrid(*g.axes, indexing="ij")
            inner = (g.axes[0] > 0.5) & (g.axes[0] < 2.0)
            errs.append(np.abs(g.values - X**2 * np.exp(Q - T))[inner].max())
        assert errs[0] / errs[1] >= 3
        assert errs[1] / errs[2] >= 3

    def test_corridor_expected_clock(self):
        # f(q) = q with w = 1: F = x2 + E[<S> until exit] = x2 + (x1 - l)(u - x1)
        g = solve_parabolic(Corridor(Payoff.linear(0.0, 1.0), Weight("const"), 0.5, 1.5))
        x = np.array([[0.8, 0.1], [1.0, 0.0], [1.3, 0.3]])
        assert np.allclose(g.ev(x), x[:, 1] + (x[:, 0] - 0.5) * (1.5 - x[:, 0]), atol=1e-6)

    def test_barrier_timer_eigenfunction(self):
        # sin(k(x - l)) exp(-k^2 (q - x2) / 2) solves 2 dF/dx2 + d2F/dx1^2 = 0 and vanishes on both barriers
        l, u, q = 0.8, 1.25, 0.05
        k = np.pi / (u - l)
        f = Payoff.custom(lambda x: np.sin(k * (x - l)), lambda x: k * np.cos(k * (x - l)),
                          lambda x: -k * k * np.sin(k * (x - l)))
        g = solve_parabolic(BarrierTimer(f, Weight("const"), q, l, u, n_space=400, n_clock=400))
        assert np.all(g.values[0] == 0) and np.all(g.values[-1] == 0)
        x = np.array([[0.9, 0.0], [1.0, 0.02], [1.2, 0.04]])
        exact = np.sin(k * (x[:, 0] - l)) * np.exp(-0.5 * k * k * (q - x[:, 1]))
        assert np.allclose(g.ev(x), exact, atol=1e-4)

    @pytest.mark.parametrize("make", [
        lambda: Timer(Payoff.call(1.0), LOG_CLOCK, 0.0),
        lambda: Corridor(Payoff.linear(), LOG_CLOCK, 1.5, 0.5),
        lambda: Corridor(Payoff.linear(), LOG_CLOCK, 1.1, 1.5),
        lambda: BarrierTimer(Payoff.call(1.0), LOG_CLOCK, 0.04, 0.5, 1.5),
    ])
    def test_parameter_errors(self, make):
        with pytest.raises(ValueError):
            make()

    def test_problem_json(self):
        p = Corridor(Payoff.linear(0.0, 1.0), LOG_CLOCK, 0.5, 1.5, n_space=50)
        assert problem_from_dict(json.loads(json.dumps(problem_to_dict(p)))) == p


class TestGridField:
    def test_nodal_and_linear_exact(self):
        x1, x2 = np.linspace(0.5, 2, 7), np.linspace(0, 1, 5)
        vals = 2 * x1[:, None] - 3 * x2[None, :] + 1
        for order in (1, 3):
            g = GridField((x1, x2), vals, order)
            assert float(g.ev(np.array([x1[2], x2[3]]))) == pytest.approx(vals[2, 3], abs=1e-13)
            pts = np.array([[0.77, 0.13], [1.91, 0.99]])
            out = field_eval(g, pts)
            assert np.allclose(out["value"], 2 * pts[:, 0] - 3 * pts[:, 1] + 1, atol=1e-12)
            assert np.allclose(out["gradient"], [[2, -3], [2, -3]], atol=1e-10)

    def test_bicubic_accuracy(self, rng):
        x1, x2 = np.linspace(0.5, 2.0, 400), np.linspace(0.0, Q, 400)
        g = GridField((x1, x2), x1[:, None] ** 2 * np.exp(Q - x2[None, :]), 3)
        pts = np.column_stack([rng.uniform(0.5, 2.0, 200), rng.uniform(0, Q, 200)])
        exact = pts[:, 0] ** 2 * np.exp(Q - pts[:, 1])
        assert np.max(np.abs(g.ev(pts) / exact - 1)) < 1e-5

    def test_out_of_hull(self):
        g = GridField((np.linspace(0, 1, 4), np.linspace(0, 1, 4)), np.zeros((4, 4)), 1)
        with pytest.raises(OutOfHull, match="nearest grid point"):
            g.ev(np.array([1.5, 0.5]))

    def test_csv_round_trip(self):
        g = solve_parabolic(Timer(Payoff.call(1.0), LOG_CLOCK, Q, n_space=40, n_clock=10))
        back = GridField.from_csv(g.to_csv())
        assert np.array_equal(back.values, g.values)
        assert all(np.array_equal(a, b) for a, b in zip(back.axes, g.axes))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            GridField((np.arange(3.0), np.arange(3.0)), np.full((3, 3), np.nan))


class TestLookback:
    def test_terminal_payoff(self):
        F = lookback_field(lambda s, m: s + 0 * m, 1.0)
        x = np.array([[0.0, 0.0, 0.0], [-0.3, 0.2, 0.5], [0.1, 0.1, 0.9]])
        assert np.allclose(F.value(x), x[:, 0], atol=1e-10)

    def test_constant_payoff(self):
        F = lookback_field(lambda s, m: 1.0 + 0 * s, 1.0)
        assert np.allclose(F.value(np.array([[0.0, 0.0, 0.0], [-0.5, 0.5, 0.2]])), 1.0, atol=1e-10)

    def test_expected_maximum(self, lookback_max):
        assert float(lookback_max.value(np.zeros(3))) == pytest.approx(np.sqrt(2 / np.pi), abs=1e-4)

    def test_matches_reflection_formula(self, lookback_max):
        # E max(x2, x1 + M_t) = x2 + E (M_t - c)^+ with P(M_t > y) = 2(1 - Phi(y/sqrt t))
        x1, x2, x3 = -0.2, 0.3, 0.4
        t = 1.0 - x3
        c = x2 - x1
        tail = 2 * (np.sqrt(t) * norm.pdf(c / np.sqrt(t)) - c * (1 - norm.cdf(c / np.sqrt(t))))
        assert float(lookback_max.value(np.array([x1, x2, x3]))) == pytest.approx(x2 + tail, abs=1e-8)

    def test_heat_equation(self, lookback_max):
        spec = FunctionalSpec(("S",), (Asset("S"), RunningMax("S"), WeightedQV("S")))
        u = halton_samples(np.array([[-1.0, 1.0], [0.05, 1.0], [0.0, 0.8]]), 50)
        x = np.stack([u[:, 0] - u[:, 1], u[:, 0], u[:, 2]], -1)
        rep = residual(lookback_max, spec, x, allow_extrema=True)
        assert rep.max_abs < 1e-6

    def test_mixed_boundary(self, lookback_max):
        h = 1e-4
        for s, x3 in [(0.0, 0.0), (0.4, 0.3), (-0.7, 0.6)]:
            f = [float(lookback_max.value(np.array([s, s + j * h, x3]))) for j in range(3)]
            assert abs((-3 * f[0] + 4 * f[1] - f[2]) / (2 * h)) < 1e-6

    def test_domain(self, lookback_max):
        with pytest.raises(DomainError):
            lookback_max.value(np.array([0.0, 0.0, 1.5]))
        with pytest.raises(DomainError):
            lookback_max.value(np.array([0.5, 0.0, 0.1]))
        with pytest.raises(ValueError):
            lookback_field(lambda s, m: m, 0.0)
