import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deltaiss.dynamics import Box, Trajectory, make_dc_motor, pairwise_gap, simulate
from deltaiss.errors import BoxViolation, DomainError


def test_box_rejects_bad_bounds():
    with pytest.raises(ValueError):
        Box([1.0], [0.0])
    with pytest.raises(ValueError):
        Box([0.0, 0.0], [1.0])
    with pytest.raises(ValueError):
        Box([], [])


def test_box_diameter():
    assert Box([0, 0], [0.2, 0.2]).diameter == pytest.approx(0.2 * np.sqrt(2))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25)
def test_box_samples_inside(seed):
    box = Box([-1.0, 0.0, 3.0], [1.0, 0.5, 3.0])
    pts = box.sample(np.random.default_rng(seed), 100)
    assert box.contains(pts).all()


class TestScalarDecay:
    def test_step_without_input(self, scalar):
        assert scalar.step([0.25], [0.0]) == pytest.approx([0.245], abs=1e-15)

    def test_origin_fixed(self, scalar):
        assert scalar.step([0.0], [0.0])[0] == 0.0

    def test_input_cancels_decay(self, scalar):
        # 0.25 + 0.01 * (-0.5 + 0.5)
        assert scalar.step([0.25], [0.5]) == pytest.approx([0.25], abs=1e-15)

    def test_negative_state_is_domain_error(self, scalar):
        with pytest.raises(DomainError):
            scalar.step([-1e-6], [0.0], check=False)

    def test_roundoff_negative_clamped(self, scalar):
        out = scalar.step([-1e-17], [0.0], check=False)
        assert np.isfinite(out).all()

    def test_out_of_box_rejected(self, scalar):
        with pytest.raises(BoxViolation):
            scalar.step([0.6], [0.0])
        with pytest.raises(BoxViolation):
            scalar.step([0.1], [0.7])

    def test_rejects_nonpositive_tau(self):
        from deltaiss.dynamics import make_scalar_decay
        with pytest.raises(ValueError):
            make_scalar_decay(tau=0.0)

    def test_batched_matches_single(self, scalar):
        X = np.linspace(0, 0.5, 7)[:, None]
        U = np.linspace(0, 0.5, 7)[:, None]
        batch = scalar.step(X, U)
        for x, u, y in zip(X, U, batch):
            assert scalar.step(x, u) == pytest.approx(y, abs=0)


class TestDCMotor:
    def test_from_rest(self, motor):
        assert motor.step([0.0, 0.0], [0.17]) == pytest.approx([0.017, 0.0], abs=1e-15)

    def test_origin_equilibrium(self, motor):
        assert np.array_equal(motor.step([0.0, 0.0], [0.0], check=False), [0.0, 0.0])

    def test_hand_evaluation(self, motor):
        assert motor.step([0.1, 0.1], [0.17]) == pytest.approx([0.1069, 0.0901], abs=1e-15)

    def test_rejects_nonpositive_constants(self):
        with pytest.raises(ValueError):
            make_dc_motor(La=0.0)


@pytest.mark.parametrize("name", ["scalar", "motor"])
def test_forward_invariance_grid(name, request):
    sys = request.getfixturevalue(name)
    axes = [np.linspace(lo, hi, 50) for lo, hi in zip(sys.state_box.lower, sys.state_box.upper)]
    axes += [np.linspace(lo, hi, 50) for lo, hi in zip(sys.input_box.lower, sys.input_box.upper)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    nxt = sys.step(grid[:, :sys.state_dim], grid[:, sys.state_dim:])
    assert sys.state_box.contains(nxt).all()


class TestSimulate:
    def test_zero(self, scalar):
        t = simulate(scalar, [0.0], [[0.0]] * 3)
        assert len(t) == 4
        assert np.all(t.states == 0.0)

    def test_converges_to_fixed_point(self, scalar):
        # sqrt(x*) = 0.43; linearised rate 1 - tau/(2*0.43) needs ~1e3 steps for 1e-6
        t = simulate(scalar, [0.5], [[0.43]] * 2000)
        assert t.states[-1, 0] == pytest.approx(0.43**2, abs=1e-6)

    def test_trajectories_approach_each_other(self, scalar):
        a = simulate(scalar, [0.5], [[0.43]] * 2000)
        b = simulate(scalar, [0.1], [[0.45]] * 2000)
        gap = pairwise_gap(a, b)
        assert gap[0] == pytest.approx(0.4)
        assert gap[-1] < 0.05
        assert gap[-1] == pytest.approx(0.45**2 - 0.43**2, abs=1e-4)

    def test_deterministic(self, motor):
        U = np.full((300, 1), 0.175)
        a = simulate(motor, [0.2, 0.1], U)
        b = simulate(motor, [0.2, 0.1], U)
        assert np.array_equal(a.states, b.states)

    def test_states_follow_oracle(self, motor):
        t = simulate(motor, [0.05, 0.15], np.full((20, 1), 0.18))
        for k in range(20):
            assert np.array_equal(t.states[k + 1], motor.step(t.states[k], t.inputs[k]))

    def test_reports_exit_index(self, scalar):
        # x - tau*sqrt(x) < 0 for x < 1e-4
        with pytest.raises(BoxViolation) as info:
            simulate(scalar, [2.5e-5], [[0.0]] * 5)
        assert info.value.index == 1

    def test_rejects_bad_initial_state(self, scalar):
        with pytest.raises(BoxViolation):
            simulate(scalar, [0.7], [[0.0]])

    def test_horizon_zero(self, scalar):
        t = simulate(scalar, [0.3], np.zeros((0, 1)))
        assert t.states.shape == (1, 1)


class TestGap:
    def test_identical(self, scalar):
        t = simulate(scalar, [0.3], [[0.2]] * 10)
        assert np.all(pairwise_gap(t, t) == 0)

    def test_length_mismatch(self, scalar):
        with pytest.raises(ValueError):
            pairwise_gap(simulate(scalar, [0.3], [[0.2]] * 3), simulate(scalar, [0.3], [[0.2]] * 4))

    def test_scalar_gap_non_increasing(self, scalar):
        U = [[0.43]] * 500
        gap = pairwise_gap(simulate(scalar, [0.5], U), simulate(scalar, [0.1], U))
        assert np.all(np.diff(gap) <= 0)
        assert gap[-1] < gap[0]

    def test_motor_input_offset(self, motor):
        a = simulate(motor, [0.2, 0.2], np.full((3000, 1), 0.17))
        b = simulate(motor, [0.0, 0.0], np.full((3000, 1), 0.18))
        gap = pairwise_gap(a, b)
        # steady state of x1 is V/(Ra + kb^2/B) per volt
        assert gap[-1] > 1e-3
        assert gap[-1] == pytest.approx(0.01 / (1 + 1e-4), rel=1e-3)


def test_trajectory_csv_roundtrip(tmp_path, motor):
    t = simulate(motor, [0.1, 0.1], np.full((4, 1), 0.17))
    path = tmp_path / "t.csv"
    t.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "k,x1,x2,u1"
    assert lines[-1].endswith(",")
    back = Trajectory.from_csv(path)
    assert np.array_equal(back.states, t.states)
    assert np.array_equal(back.inputs, t.inputs)


def test_trajectory_length_invariant():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 1)), np.zeros((3, 1)))
