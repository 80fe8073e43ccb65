"""Tests for the H-infinity norm-bounded parametrization."""

import numpy as np
import pytest

from discolift.lti import hinf_norm, spectral_radius
from discolift.normbounded import (
    CertificationError,
    CertificationResult,
    NormBoundedTheta,
    SystemDims,
    cayley,
    certify,
    contraction_M,
    realize,
    realize_graph,
    require_certified,
    strip_feedthrough,
    theta_from_parameters,
)
from discolift.numkernel import grad_check

SHRINK = 0.998001998


@pytest.fixture
def rng():
    return np.random.default_rng(3)


class TestSystemDims:
    def test_derived_sizes(self):
        """Test n_bar and n_tilde for more inputs than outputs."""
        dims = SystemDims(n_x=10, n_u=3, n_y=2)
        assert dims.n_bar == 12
        assert dims.n_tilde == 1
        assert dims.shapes()["Z"] == (1, 12)

    def test_non_positive_refused(self):
        """Test zero dimensions are refused."""
        with pytest.raises(ValueError):
            SystemDims(n_x=0, n_u=1, n_y=1)


class TestCayley:
    def test_zero_is_identity(self):
        """Test V = 0 maps to the identity."""
        np.testing.assert_allclose(cayley(np.zeros((3, 3))), np.eye(3), atol=1e-15)

    def test_scalar_is_one(self):
        """Test any scalar V maps to 1."""
        np.testing.assert_allclose(cayley([[4.2]]), [[1.0]])

    def test_orthogonal(self, rng):
        """Test the transform of a random matrix is orthogonal."""
        Q = cayley(rng.standard_normal((5, 5)))
        assert np.linalg.norm(Q.T @ Q - np.eye(5)) < 1e-10


class TestContraction:
    def test_zero_blocks(self):
        """Test X = Y = Z = 0 gives (1 - eps) / (1 + eps) times the identity."""
        dims = SystemDims(1, 1, 1)
        M = contraction_M(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((0, 2)), 1e-3, dims)
        np.testing.assert_allclose(M, SHRINK * np.eye(2), atol=1e-9)

    @pytest.mark.parametrize("dims", [(4, 2, 3), (3, 4, 2), (2, 2, 2)])
    def test_random_draws_contract(self, rng, dims):
        """Test sigma_max(M) < 1 for random blocks in both branches."""
        dims = SystemDims(*dims)
        shapes = dims.shapes()
        for _ in range(20):
            X, Y, Z = (rng.standard_normal(shapes[name]) for name in ("X", "Y", "Z"))
            M = contraction_M(X, Y, Z, 1e-3, dims)
            assert M.shape == (dims.n_x + dims.n_y, dims.n_x + dims.n_u)
            assert np.linalg.norm(M, 2) < 1.0

    def test_pendulum_shape(self, rng):
        """Test the pendulum perturbation dims give a 12x13 M."""
        dims = SystemDims(n_x=10, n_u=3, n_y=2)
        theta = NormBoundedTheta.random(dims, rng)
        M = contraction_M(theta.X, theta.Y, theta.Z, 1e-3, dims)
        assert M.shape == (12, 13)

    def test_epsilon_must_be_positive(self):
        """Test a zero margin is refused."""
        dims = SystemDims(1, 1, 1)
        with pytest.raises(ValueError):
            contraction_M(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((0, 2)), 0.0, dims)


class TestRealize:
    def test_zero_parameters(self):
        """Test hand-evaluated blocks for all-zero scalar parameters."""
        rs = realize(NormBoundedTheta.zeros(SystemDims(1, 1, 1)))
        assert rs.gamma == pytest.approx(1.0)
        np.testing.assert_allclose(rs.A, [[SHRINK]], atol=1e-9)
        np.testing.assert_allclose(rs.B, [[0.0]], atol=1e-15)
        np.testing.assert_allclose(rs.C, [[0.0]], atol=1e-15)
        np.testing.assert_allclose(rs.D, [[SHRINK]], atol=1e-9)
        assert hinf_norm(rs.state_space()) == pytest.approx(SHRINK, abs=1e-8)

    def test_shapes(self, rng):
        """Test realized blocks have the requested dimensions."""
        dims = SystemDims(n_x=5, n_u=3, n_y=2)
        rs = realize(NormBoundedTheta.random(dims, rng))
        assert rs.A.shape == (5, 5)
        assert rs.B.shape == (5, 3)
        assert rs.C.shape == (2, 5)
        assert rs.D.shape == (2, 3)

    def test_gamma_bounds_norm(self, rng):
        """Test large alpha scales the bound and the realized norm stays under it."""
        dims = SystemDims(3, 2, 2)
        theta = NormBoundedTheta.random(dims, rng, std=1.0, alpha=1.5)
        rs = realize(theta)
        assert rs.gamma == pytest.approx(np.exp(1.5))
        assert spectral_radius(rs.A) < 1.0
        assert hinf_norm(rs.state_space()) <= rs.gamma * (1.0 + 1e-6)

    def test_gradients_through_realization(self, rng):
        """Test tape gradients of a realization-based loss against finite differences."""
        dims = SystemDims(2, 2, 1)
        theta = NormBoundedTheta.random(dims, rng, std=0.5, alpha=0.2)

        def fn(tape, p):
            rs = realize_graph(tape, p, theta.epsilon, dims)
            return tape.mse(rs.A) + tape.frobenius(rs.B) + tape.sum(rs.C @ rs.B) + tape.sum(rs.D)

        assert grad_check(fn, theta.parameters()) < 1e-4


class TestStripFeedthrough:
    def test_zero_parameters_have_zero_output(self):
        """Test the stripped zero-parameter system has C = 0 and D removed."""
        stripped = strip_feedthrough(realize(NormBoundedTheta.zeros(SystemDims(2, 3, 2))))
        assert not stripped.C.any()
        assert not stripped.state_space().D.any()

    def test_audit_bound_without_feedthrough(self, rng):
        """Test the audit bound equals gamma when D is zero."""
        dims = SystemDims(2, 1, 1)
        rs = realize(NormBoundedTheta.random(dims, rng, alpha=0.3))
        stripped = strip_feedthrough(rs)
        zeroed = type(stripped)(stripped.A, stripped.B, stripped.C, 0.0 * stripped.D, rs.gamma)
        assert zeroed.audit_bound() == pytest.approx(rs.gamma)

    def test_stripped_norm_within_audit_bound(self, rng):
        """Test the stripped system respects gamma + ||D||_2."""
        dims = SystemDims(4, 3, 2)
        stripped = strip_feedthrough(realize(NormBoundedTheta.random(dims, rng, std=1.0)))
        assert hinf_norm(stripped.state_space()) <= stripped.audit_bound() * (1.0 + 1e-6)


class TestParameters:
    def test_alpha_is_a_matrix(self):
        """Test parameters() exposes alpha as a 1x1 block."""
        params = NormBoundedTheta.zeros(SystemDims(1, 1, 1)).parameters()
        assert params["alpha"].shape == (1, 1)
        assert set(params) == {"d", "V", "X", "Y", "Z", "alpha"}

    def test_with_parameters(self, rng):
        """Test replacing blocks keeps dims and converts alpha back to a float."""
        theta = NormBoundedTheta.random(SystemDims(2, 1, 1), rng)
        updated = theta.with_parameters({"alpha": np.array([[0.5]]), "d": np.ones((2, 1))})
        assert updated.alpha == 0.5
        np.testing.assert_array_equal(updated.d, np.ones((2, 1)))
        np.testing.assert_array_equal(updated.V, theta.V)

    def test_from_parameters(self, rng):
        """Test a theta rebuilt from its own parameters realizes identically."""
        theta = NormBoundedTheta.random(SystemDims(3, 2, 2), rng, alpha=-0.4)
        rebuilt = theta_from_parameters(theta.parameters(), theta.dims, theta.epsilon)
        np.testing.assert_array_equal(realize(rebuilt).A, realize(theta).A)

    def test_missing_block(self):
        """Test a missing block is reported."""
        params = NormBoundedTheta.zeros(SystemDims(1, 1, 1)).parameters()
        del params["V"]
        with pytest.raises(KeyError):
            theta_from_parameters(params, SystemDims(1, 1, 1))


class TestCertify:
    def test_random_draws_pass(self):
        """Test 100 random draws of dims (4, 2, 3) satisfy the certificate."""
        result = certify(100, SystemDims(4, 2, 3), seed=7)
        assert result.passed
        assert result.max_spectral_radius < 1.0
        assert result.max_ratio <= 1.0 + 1e-6

    def test_same_seed_same_result(self):
        """Test the sweep is deterministic for a seed."""
        first = certify(5, SystemDims(2, 2, 2), seed=11)
        second = certify(5, SystemDims(2, 2, 2), seed=11)
        assert first == second

    def test_require_certified_raises_on_failure(self):
        """Test a failing result raises CertificationError."""
        failed = CertificationResult(
            draws=3,
            dims=SystemDims(1, 1, 1),
            max_ratio=1.5,
            max_spectral_radius=0.5,
            max_stripped_excess=0.0,
            failures=1,
        )
        with pytest.raises(CertificationError):
            require_certified(failed)
