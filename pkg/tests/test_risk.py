import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskmpc import risk
from riskmpc.errors import DegenerateLinearizationError, InsufficientDataError


def random_coeffs(rng, n=40, spread=1.0):
    grads = rng.normal(0.0, spread, (n, 3)) + rng.normal(0.0, 2.0, 3)
    offsets = rng.normal(0.0, spread, n) + 0.4 * grads[:, 0] + rng.normal()
    return [risk.LinearizedAvoidance(grad=g, offset=float(b)) for g, b in zip(grads, offsets)]


def margin(coeff, p):
    return float(coeff.grad @ p + coeff.offset)


C_EYE = np.eye(3)


class TestLinearize:
    def test_axis_aligned(self):
        out = risk.linearize_avoidance(
            x_bar=np.array([2.0, 0.0, 0.0]), y_hat=np.zeros(3), r_bar=1.0, C=C_EYE
        )
        np.testing.assert_allclose(out.grad, [-2.0, 0.0, 0.0])
        assert out.offset == pytest.approx(2.0)
        assert margin(out, np.array([2.0, 0.0, 0.0])) == pytest.approx(-2.0)

    def test_boundary_point_sits_on_zero(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            y = rng.normal(size=3)
            e = rng.normal(size=3)
            e /= np.linalg.norm(e)
            r = rng.uniform(0.2, 3.0)
            x_bar = y + r * e
            out = risk.linearize_avoidance(x_bar, y, r, C_EYE)
            assert margin(out, x_bar) == pytest.approx(0.0, abs=1e-10)

    def test_halfspace_outside_sphere(self):
        rng = np.random.default_rng(3)
        checked = 0
        for _ in range(100):
            x_bar = rng.normal(0, 3, 3)
            y = rng.normal(0, 3, 3)
            r = rng.uniform(0.1, 2.0)
            if np.linalg.norm(x_bar - y) < 1e-6:
                continue
            out = risk.linearize_avoidance(x_bar, y, r, C_EYE)
            for _ in range(20):
                p = rng.normal(0, 5, 3)
                if margin(out, p) <= 0.0:
                    assert np.linalg.norm(p - y) >= r
                    checked += 1
        assert checked > 100

    def test_coincident_point_rejected(self):
        with pytest.raises(DegenerateLinearizationError):
            risk.linearize_avoidance(np.zeros(3), np.zeros(3), 1.0, C_EYE)

    def test_output_map_applied(self):
        C = np.zeros((3, 8))
        C[:, [0, 2, 4]] = np.eye(3)
        x = np.zeros(8)
        x[0] = 5.0
        out = risk.linearize_avoidance(x, np.zeros(3), 1.0, C)
        np.testing.assert_allclose(out.grad, [-5.0, 0.0, 0.0])


class TestMoments:
    def test_identical_coefficients(self):
        coeffs = [risk.LinearizedAvoidance(grad=np.array([1.0, 2.0, 3.0]), offset=4.0)] * 5
        m = risk.ensemble_moments(coeffs)
        assert m.null_dim == 3
        np.testing.assert_allclose(m.cov_grad, 0.0, atol=1e-15)
        np.testing.assert_allclose(m.reg_cov, np.eye(3), atol=1e-12)
        c = risk.conditional_stats(m)
        np.testing.assert_allclose(c.shift, 0.0, atol=1e-12)
        assert c.resid_var == 0.0

    def test_single_axis_variation(self):
        rng = np.random.default_rng(4)
        coeffs = [
            risk.LinearizedAvoidance(grad=np.array([v, 0.0, 0.0]), offset=1.0)
            for v in rng.normal(size=12)
        ]
        assert risk.ensemble_moments(coeffs).null_dim == 2

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(8)
        coeffs = random_coeffs(rng, 40)
        m = risk.ensemble_moments(coeffs)
        G = np.stack([c.grad for c in coeffs])
        b = np.array([c.offset for c in coeffs])
        mg = G.sum(axis=0) / 40
        mb = b.sum() / 40
        cov = sum(np.outer(g - mg, g - mg) for g in G) / 39
        cgo = sum((g - mg) * (bb - mb) for g, bb in zip(G, b)) / 39
        vb = sum((bb - mb) ** 2 for bb in b) / 39
        np.testing.assert_allclose(m.mean_grad, mg, atol=1e-12)
        assert m.mean_offset == pytest.approx(mb, abs=1e-12)
        np.testing.assert_allclose(m.cov_grad, cov, atol=1e-12)
        np.testing.assert_allclose(m.cov_grad_offset, cgo, atol=1e-12)
        assert m.var_offset == pytest.approx(vb, abs=1e-12)

    def test_sqrt_reproduces_regularized_cov(self):
        rng = np.random.default_rng(15)
        m = risk.ensemble_moments(random_coeffs(rng, 25))
        np.testing.assert_allclose(m.reg_cov_sqrt @ m.reg_cov_sqrt.T, m.reg_cov, atol=1e-8)

    def test_rejects_tiny_ensembles(self):
        with pytest.raises(InsufficientDataError):
            risk.ensemble_moments([risk.LinearizedAvoidance(grad=np.ones(3), offset=0.0)])


class TestConstraintStd:
    def test_zero_variance(self):
        coeffs = [risk.LinearizedAvoidance(grad=np.ones(3), offset=2.0)] * 4
        assert risk.constraint_std(np.array([1.0, 2.0, 3.0]), risk.ensemble_moments(coeffs)) == 0.0

    def test_origin_reduces_to_offset_std(self):
        rng = np.random.default_rng(21)
        coeffs = random_coeffs(rng, 30)
        m = risk.ensemble_moments(coeffs)
        assert risk.constraint_std(np.zeros(3), m) == pytest.approx(np.sqrt(m.var_offset))

    def test_equals_direct_sample_std(self):
        rng = np.random.default_rng(33)
        for _ in range(50):
            coeffs = random_coeffs(rng, int(rng.integers(2, 60)))
            m = risk.ensemble_moments(coeffs)
            p = rng.normal(0, 4, 3)
            zs = np.array([margin(c, p) for c in coeffs])
            assert risk.constraint_std(p, m) == pytest.approx(zs.std(ddof=1), abs=1e-10)


class TestConditionalStats:
    def test_uncorrelated(self):
        rng = np.random.default_rng(6)
        grads = rng.normal(size=(30, 3))
        coeffs = [risk.LinearizedAvoidance(grad=g, offset=5.0) for g in grads]
        m = risk.ensemble_moments(coeffs)
        c = risk.conditional_stats(m)
        np.testing.assert_allclose(c.shift, 0.0, atol=1e-12)
        assert c.resid_var == pytest.approx(m.var_offset, abs=1e-12)

    def test_schur_oracle_on_joint_covariance(self):
        rng = np.random.default_rng(44)
        for _ in range(30):
            coeffs = random_coeffs(rng, 40)
            m = risk.ensemble_moments(coeffs)
            c = risk.conditional_stats(m)
            assert c.resid_var >= 0.0
            if m.null_dim == 0:
                joint = np.zeros((4, 4))
                joint[:3, :3] = m.cov_grad
                joint[:3, 3] = m.cov_grad_offset
                joint[3, :3] = m.cov_grad_offset
                joint[3, 3] = m.var_offset
                schur = joint[3, 3] - joint[3, :3] @ np.linalg.solve(joint[:3, :3], joint[:3, 3])
                assert c.resid_var == pytest.approx(schur, abs=1e-9)


class TestStdUpperBound:
    def test_zero_variance_reduces_to_l1(self):
        coeffs = [risk.LinearizedAvoidance(grad=np.ones(3), offset=0.5)] * 6
        m = risk.ensemble_moments(coeffs)
        c = risk.conditional_stats(m)
        p = np.array([1.0, -2.0, 0.5])
        assert risk.std_upper_bound(p, m, c) == pytest.approx(np.sum(np.abs(p)))
        assert risk.std_upper_bound(p, m, c) >= risk.constraint_std(p, m)

    def test_vanishes_at_shift_point(self):
        coeffs = [risk.LinearizedAvoidance(grad=np.ones(3), offset=0.0)] * 6
        m = risk.ensemble_moments(coeffs)
        c = risk.conditional_stats(m)
        assert risk.std_upper_bound(c.shift, m, c) == pytest.approx(0.0, abs=1e-12)
        assert risk.constraint_std(c.shift, m) == 0.0

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=200, deadline=None)
    def test_dominates_std(self, seed):
        rng = np.random.default_rng(seed)
        coeffs = random_coeffs(rng, int(rng.integers(2, 50)), spread=float(rng.uniform(0.01, 5)))
        m = risk.ensemble_moments(coeffs)
        c = risk.conditional_stats(m)
        p = rng.normal(0, 5, 3)
        assert risk.constraint_std(p, m) <= risk.std_upper_bound(p, m, c) + 1e-9


class TestRiskRows:
    def test_full_budget_drops_std_term(self):
        rng = np.random.default_rng(9)
        m = risk.ensemble_moments(random_coeffs(rng, 20))
        c = risk.conditional_stats(m)
        rows = risk.build_risk_rows(m, c, epsilon=1.0, n_obs=1, C=C_EYE)
        assert rows.nu == 0.0
        np.testing.assert_allclose(rows.matrix[0, :3], m.mean_grad, atol=1e-12)
        np.testing.assert_allclose(rows.matrix[0, 3:], 0.0)
        assert rows.rhs[0] == pytest.approx(-m.mean_offset)

    def test_half_budget_unit_multiplier(self):
        rng = np.random.default_rng(10)
        m = risk.ensemble_moments(random_coeffs(rng, 20))
        c = risk.conditional_stats(m)
        rows = risk.build_risk_rows(m, c, epsilon=0.5, n_obs=1, C=C_EYE)
        assert rows.nu == pytest.approx(1.0)
        assert rows.epsilon_n == pytest.approx(0.5)

    def test_eight_state_block_shape(self):
        rng = np.random.default_rng(11)
        m = risk.ensemble_moments(random_coeffs(rng, 20))
        c = risk.conditional_stats(m)
        C = np.zeros((3, 8))
        C[:, :3] = np.eye(3)
        rows = risk.build_risk_rows(m, c, epsilon=0.25, n_obs=1, C=C)
        assert rows.matrix.shape == (7, 11)
        assert rows.rhs.shape == (7,)

    def test_rejects_bad_budget(self):
        rng = np.random.default_rng(12)
        m = risk.ensemble_moments(random_coeffs(rng, 10))
        c = risk.conditional_stats(m)
        for eps in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                risk.build_risk_rows(m, c, epsilon=eps, n_obs=1, C=C_EYE)

    def test_feasible_point_transfers_to_std_bound(self):
        # Any [x; s] satisfying the rows also satisfies mean + nu*bound <= 0,
        # hence mean + nu*std <= 0.
        rng = np.random.default_rng(13)
        for _ in range(40):
            m = risk.ensemble_moments(random_coeffs(rng, 30))
            c = risk.conditional_stats(m)
            eps = float(rng.uniform(0.05, 1.0))
            rows = risk.build_risk_rows(m, c, eps, n_obs=1, C=C_EYE)
            x = rng.normal(0, 5, 3)
            s = np.abs(m.reg_cov_sqrt @ (x - c.shift)) + rng.uniform(0, 1, 3)
            v = np.concatenate([x, s])
            if np.all(rows.matrix @ v <= rows.rhs + 1e-12):
                mean_z = float(m.mean_grad @ x + m.mean_offset)
                assert mean_z + rows.nu * risk.std_upper_bound(x, m, c) <= 1e-7
                assert mean_z + rows.nu * risk.constraint_std(x, m) <= 1e-7


class TestCantelliCoverage:
    @pytest.mark.parametrize("eps_n", [0.05, 0.25, 0.5])
    def test_worst_case_tail_bound(self, eps_n):
        rng = np.random.default_rng(101)
        nu = np.sqrt((1 - eps_n) / eps_n)
        n = 10**5
        sigma = 0.7
        mean = -nu * sigma  # boundary of the deterministic reformulation
        binom_sigma = np.sqrt(eps_n * (1 - eps_n) / n)
        draws = {
            "gaussian": rng.normal(mean, sigma, n),
            "uniform": rng.uniform(mean - sigma * np.sqrt(3), mean + sigma * np.sqrt(3), n),
            "two_point": np.where(
                rng.uniform(size=n) < eps_n,
                mean + sigma * nu,
                mean - sigma / nu,
            ),
        }
        for name, z in draws.items():
            assert z.mean() == pytest.approx(mean, abs=5 * sigma / np.sqrt(n))
            rate = np.mean(z >= 0.0)
            assert rate <= eps_n + 3 * binom_sigma, name
