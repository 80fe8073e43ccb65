"""Tests for the benchmark plants and the adaptive integrator."""

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from discolift.numkernel import ShapeMismatchError
from discolift.plants import (
    IntegrationError,
    Plant,
    eval_dynamics,
    finite_difference_jacobians,
    from_deviation,
    integrate,
    integrate_rhs,
    linearize,
    nominal_model,
    plant_trim,
    to_deviation,
    uas_trim,
)


@pytest.fixture
def uas():
    return Plant.from_name("uas")


class TestPlant:
    def test_dimensions(self):
        """Test state and input sizes of every plant."""
        assert (Plant.from_name("pendulum").n, Plant.from_name("pendulum").m) == (2, 1)
        assert (Plant.from_name("vdp").n, Plant.from_name("vdp").m) == (2, 1)
        assert (Plant.from_name("uas").n, Plant.from_name("uas").m) == (6, 3)

    def test_unknown_plant(self):
        """Test an unknown plant name is refused."""
        with pytest.raises(ValueError, match="Unknown plant"):
            Plant.from_name("cartpole")


class TestDynamics:
    def test_vdp_point(self):
        """Test the Van der Pol field at (1, 1) with zero input."""
        xdot = eval_dynamics(Plant.from_name("vdp"), [1.0, 1.0], [0.0])
        np.testing.assert_allclose(xdot, [1.0, -1.0])

    def test_pendulum_origin(self):
        """Test the pendulum origin is an equilibrium."""
        np.testing.assert_array_equal(
            eval_dynamics(Plant.from_name("pendulum"), [0.0, 0.0], [0.0]), [0.0, 0.0]
        )

    def test_pendulum_input_enters_velocity(self):
        """Test the torque input drives the second state only."""
        xdot = eval_dynamics(Plant.from_name("pendulum"), [0.0, 0.0], [2.0])
        np.testing.assert_allclose(xdot, [0.0, 2.0])

    def test_uas_level_flight(self, uas):
        """Test level flight keeps every channel constant except the ramping position."""
        x = [0.0, 15.0, 0.0, 0.0, 0.0, 100.0]
        u = [0.0, -56.0151, 0.0]
        np.testing.assert_allclose(
            eval_dynamics(uas, x, u), [0.0, 0.0, 0.0, 0.0, 15.0, 0.0], atol=1e-12
        )

    def test_wrong_dimensions(self, uas):
        """Test mismatched state or input lengths are refused."""
        with pytest.raises(ShapeMismatchError):
            eval_dynamics(uas, np.zeros(5), np.zeros(3))
        with pytest.raises(ShapeMismatchError):
            eval_dynamics(uas, np.zeros(6), np.zeros(2))


class TestTrim:
    def test_uas_trim_force(self, uas):
        """Test the trim vertical force balances gravity."""
        trim = uas_trim()
        assert trim.input[1] == pytest.approx(-5.71 * 9.81)
        assert trim.state[1] == 15.0
        np.testing.assert_allclose(
            eval_dynamics(uas, trim.state, trim.input), [0.0, 0.0, 0.0, 0.0, 15.0, 0.0], atol=1e-12
        )

    def test_uas_position_ramps(self):
        """Test x_c of the trim grows with airspeed * t."""
        states = uas_trim().state_at([0.0, 1.0, 2.0])
        np.testing.assert_allclose(states[:, 4], [0.0, 15.0, 30.0])
        np.testing.assert_allclose(states[:, 1], 15.0)

    def test_non_positive_airspeed(self):
        """Test a zero airspeed is refused."""
        with pytest.raises(ValueError):
            uas_trim(0.0)

    def test_autonomous_trims_are_zero(self):
        """Test the pendulum and Van der Pol trims sit at the origin."""
        for kind in ("pendulum", "vdp"):
            trim = plant_trim(Plant.from_name(kind))
            assert not np.any(trim.state)
            assert not np.any(trim.input)
            assert trim.airspeed == 0.0
        assert plant_trim(Plant.from_name("uas")).airspeed > 0.0

    def test_deviation_inverse(self, uas):
        """Test from_deviation undoes to_deviation along a time-varying trim."""
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 6))
        u = rng.standard_normal((4, 3))
        trim = uas_trim()
        x_dev, u_dev = to_deviation(trim, x, u, dt=0.02)
        x_back, u_back = from_deviation(trim, x_dev, u_dev, dt=0.02)
        np.testing.assert_allclose(x_back, x)
        np.testing.assert_allclose(u_back, u)


class TestLinearize:
    def test_pendulum_origin(self):
        """Test the pendulum Jacobian at the origin."""
        Ac, Bc = linearize(Plant.from_name("pendulum"), [0.0, 0.0], [0.0])
        np.testing.assert_allclose(Ac, [[0.0, 1.0], [-1.0, 0.01]])
        np.testing.assert_allclose(Bc, [[0.0], [1.0]])

    def test_vdp_origin(self):
        """Test the Van der Pol Jacobian at the origin."""
        Ac, _ = linearize(Plant.from_name("vdp"), [0.0, 0.0], [0.0])
        np.testing.assert_allclose(Ac, [[0.0, 1.0], [-1.0, 1.0]])

    def test_uas_structure(self, uas):
        """Test the UAS Jacobian at trim: gravity coupling and a zero position column."""
        trim = uas_trim()
        Ac, Bc = linearize(uas, trim.state, trim.input)
        assert Ac[1, 3] == pytest.approx(-9.81)
        np.testing.assert_array_equal(Ac[:, 4], np.zeros(6))
        assert Ac[4, 1] == pytest.approx(1.0)
        assert Bc[0, 2] == pytest.approx(1.0 / 1.57)

    @pytest.mark.parametrize("kind", ["pendulum", "vdp", "uas"])
    def test_matches_finite_differences(self, kind):
        """Test analytic Jacobians at a random point against central differences."""
        plant = Plant.from_name(kind)
        rng = np.random.default_rng(5)
        x = rng.standard_normal(plant.n)
        u = rng.standard_normal(plant.m)
        Ac, Bc = linearize(plant, x, u)
        Ac_fd, Bc_fd = finite_difference_jacobians(plant, x, u)
        np.testing.assert_allclose(Ac, Ac_fd, atol=1e-6)
        np.testing.assert_allclose(Bc, Bc_fd, atol=1e-6)

    def test_nominal_model(self):
        """Test the nominal model has identity output and no feedthrough."""
        model = nominal_model(Plant.from_name("uas"), 0.02)
        assert model.A.shape == (6, 6)
        assert model.B.shape == (6, 3)
        np.testing.assert_array_equal(model.C, np.eye(6))
        np.testing.assert_array_equal(model.D, np.zeros((6, 3)))
        assert model.dt == 0.02


class TestIntegrate:
    def test_exponential_decay(self):
        """Test x' = -x over one interval of 0.1."""
        states = integrate_rhs(lambda x, u: -x, [1.0], np.zeros((2, 1)), 0.1)
        assert states.shape == (2, 1)
        assert states[0, 0] == 1.0
        assert states[1, 0] == pytest.approx(0.904837418, abs=1e-4)

    def test_tight_tolerance(self):
        """Test tighter tolerances reach the exact decay closely."""
        states = integrate_rhs(lambda x, u: -x, [1.0], np.zeros((2, 1)), 0.1, rtol=1e-9, atol=1e-12)
        assert states[1, 0] == pytest.approx(np.exp(-0.1), abs=1e-8)

    def test_matches_reference_solver(self):
        """Test a Van der Pol trajectory against a tightly-toleranced reference."""
        plant = Plant.from_name("vdp")
        dt, steps = 0.05, 40
        u_seq = np.zeros((steps + 1, 1))
        states = integrate(plant, [1.0, 0.5], u_seq, dt, rtol=1e-7, atol=1e-10)

        reference = solve_ivp(
            lambda t, x: eval_dynamics(plant, x, [0.0]),
            (0.0, dt * steps),
            [1.0, 0.5],
            t_eval=dt * np.arange(steps + 1),
            rtol=1e-11,
            atol=1e-12,
        )
        np.testing.assert_allclose(states, reference.y.T, atol=1e-5)

    def test_zero_order_hold_input(self):
        """Test inputs are held piecewise constant across each interval."""
        states = integrate_rhs(lambda x, u: u, [0.0], [[1.0], [3.0], [0.0]], 0.5)
        np.testing.assert_allclose(states[:, 0], [0.0, 0.5, 2.0], atol=1e-12)

    def test_empty_input(self):
        """Test an empty input sequence yields no states."""
        assert integrate_rhs(lambda x, u: -x, [1.0], np.zeros((0, 1)), 0.1).shape == (0, 1)

    def test_non_finite_state(self):
        """Test a non-finite vector field raises IntegrationError."""
        with pytest.raises(IntegrationError):
            integrate_rhs(lambda x, u: np.full_like(x, np.nan), [1.0], np.zeros((2, 1)), 0.1)

    def test_non_positive_dt(self):
        """Test a zero sample time is refused."""
        with pytest.raises(ValueError):
            integrate_rhs(lambda x, u: -x, [1.0], np.zeros((2, 1)), 0.0)
