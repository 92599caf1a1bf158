import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import abs_gap_net, linear_system
from deltaiss.dynamics import Box, DiscreteSystem
from deltaiss.errors import InfeasibleBudget
from deltaiss.lipschitz import KTemplate
from deltaiss.network import LyapunovNet, forward
from deltaiss.sampling import SampleSet, build_epsilon_net
from deltaiss.verify import (certify, falsify_delta_iss, grid_oracle, pair_values, replay_witness, scp_residual,
                             validity_check)


def brute_residual(net, X, U, sys, templates):
    a1, a2, a3, su = templates
    lo = up = dec = -np.inf
    for xq, xr in itertools.product(X, X):
        d = np.linalg.norm(xq - xr)
        v = forward(net, xq, xr)
        lo, up = max(lo, -v + a1(d)), max(up, v - a2(d))
        for uq, ur in itertools.product(U, U):
            vf = forward(net, sys.step(xq, uq), sys.step(xr, ur))
            dec = max(dec, vf - v + a3(d) - su(np.linalg.norm(uq - ur)))
    return lo, up, dec


@pytest.mark.parametrize("eta,L,eps,margin,ok", [(-0.0008, 4.264, 0.000177, -4.5272e-5, True),
                                                 (-0.01, 1.4962, 0.004, -0.0040152, True),
                                                 (0.0, 4.264, 0.000177, 4.264 * 0.000177, False)])
def test_validity_examples(eta, L, eps, margin, ok):
    m, c = validity_check(eta, L, eps)
    assert m == pytest.approx(margin, rel=1e-9, abs=1e-15)
    assert c is ok
    assert validity_check(eta, L, eps, psd_ok=False)[1] is False


def test_validity_boundary_is_certified():
    assert validity_check(-1.0, 2.0, 0.5) == (0.0, True)


def test_constant_net_residual(scalar_templates):
    sys = linear_system()
    net = LyapunovNet([np.zeros((2, 2)), np.zeros((1, 2))], [np.zeros(2), [0.0]], [np.ones(2)], 1.0)
    X = build_epsilon_net(sys.state_box, 0.1)
    U = build_epsilon_net(sys.input_box, 0.1)
    eta, wit, _ = scp_residual(net, X, U, sys, scalar_templates)
    Dmax = X.points.max() - X.points.min()
    assert wit["lower"].residual == pytest.approx(1e-5 * Dmax, rel=1e-12)
    assert wit["upper"].residual == 0.0  # diagonal pairs
    assert eta == pytest.approx(wit["decrease"].residual)


def test_singleton_sets(scalar_templates):
    sys = linear_system()
    net = LyapunovNet.initialize(1, [4], 1.5, seed=2)
    X = SampleSet([[0.3]], 1.0, sys.state_box)
    U = SampleSet([[0.1]], 1.0, sys.input_box)
    eta, wit, info = scp_residual(net, X, U, sys, scalar_templates)
    v = forward(net, [0.3], [0.3])
    fv = forward(net, sys.step([0.3], [0.1]), sys.step([0.3], [0.1]))
    assert info["evaluations"] == 3
    assert eta == pytest.approx(max(-v, v, fv - v), abs=1e-15)


@given(st.integers(0, 1000), st.integers(1, 2))
@settings(max_examples=15, deadline=None)
def test_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    sys = DiscreteSystem(Box(-np.ones(n), np.ones(n)), Box(-np.ones(1), np.ones(1)),
                         lambda X, U: 0.6 * np.tanh(X) + 0.2 * U, name="toy")
    X = SampleSet(rng.uniform(-1, 1, (5, n)), 0.5, sys.state_box)
    U = SampleSet(rng.uniform(-1, 1, (3, 1)), 0.5, sys.input_box)
    net = LyapunovNet.initialize(n, [5, 3], 1.5, seed=seed, scale=1.5)
    t = (KTemplate(0.1), KTemplate(2.0, 2.0), KTemplate(0.05), KTemplate(0.3))
    eta, wit, _ = scp_residual(net, X, U, sys, t)
    lo, up, dec = brute_residual(net, X.points, U.points, sys, t)
    assert wit["lower"].residual == pytest.approx(lo, abs=1e-12)
    assert wit["upper"].residual == pytest.approx(up, abs=1e-12)
    assert wit["decrease"].residual == pytest.approx(dec, abs=1e-12)
    assert eta == max(wit[f].residual for f in wit)


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_diagonal_forces_nonnegative_residual(seed):
    sys = linear_system()
    net = LyapunovNet.initialize(1, [6], 1.5, seed=seed, scale=2.0)
    X = build_epsilon_net(sys.state_box, 0.2)
    eta, _, _ = scp_residual(net, X, X, sys, (KTemplate(1e-5), KTemplate(1.0), KTemplate(1e-4), KTemplate(1e-4)))
    assert eta >= 0.0


def test_witness_replay_is_exact(motor):
    net = LyapunovNet.initialize(2, [8], 1.0, seed=5, scale=1.0)
    X = build_epsilon_net(motor.state_box, 0.02)
    U = build_epsilon_net(motor.input_box, 0.004)
    t = (KTemplate(1e-5), KTemplate(0.04), KTemplate(1e-4), KTemplate(1e-4))
    _, wit, _ = scp_residual(net, X, U, motor, t)
    for w in wit.values():
        assert replay_witness(net, motor, t, w) == w.residual


def test_pair_values_match_batched_forward():
    net = LyapunovNet.initialize(2, [7, 4], 1.0, seed=1)
    rng = np.random.default_rng(0)
    A, B = rng.uniform(-1, 1, (30, 2)), rng.uniform(-1, 1, (30, 2))
    assert np.allclose(pair_values(net, A, B), net.value(A, B), rtol=0, atol=1e-13)


def test_coarsening_is_sound(scalar_templates):
    sys = linear_system()
    net = LyapunovNet.initialize(1, [6], 1.5, seed=3, scale=1.5)
    X = build_epsilon_net(sys.state_box, 0.05)
    U = build_epsilon_net(sys.input_box, 0.05)
    full, _, info_full = scp_residual(net, X, U, sys, scalar_templates, budget=10**9)
    L = 10.0
    coarse, _, info = scp_residual(net, X, U, sys, scalar_templates, budget=5_000, L=L)
    assert not info_full["coarsened"] and info["coarsened"]
    assert coarse >= full
    with pytest.raises(InfeasibleBudget):
        scp_residual(net, X, U, sys, scalar_templates, budget=5_000, allow_coarsen=False)
    with pytest.raises(InfeasibleBudget):
        scp_residual(net, X, U, sys, scalar_templates, budget=5_000)  # no L to inflate with


def test_certify_wiring(scalar_templates):
    sys = linear_system()
    X = build_epsilon_net(sys.state_box, 0.1)
    good = LyapunovNet.initialize(1, [4], 1.5, seed=0)
    rep = certify(good, sys, X, X, scalar_templates, L=4.0)
    assert rep.eps == X.radius and rep.psd_ok
    assert rep.margin == pytest.approx(rep.eta_star + 4.0 * X.radius)
    assert rep.verdict == ("certified" if rep.margin <= 0 else "not-certified")
    back = json.loads(rep.to_json())
    assert back["eta_star"] == rep.eta_star and set(back["witnesses"]) == {"lower", "upper", "decrease"}
    bad = LyapunovNet([np.array([[5.0, 0.0]]), np.array([[3.0]])], [[0.0], [0.0]], [[1.0]], 0.1)
    rep = certify(bad, sys, X, X, scalar_templates, L=4.0)
    assert not rep.psd_ok and not rep.certified
    assert "verdict" in rep.summary()


def test_grid_oracle_on_exact_certificate():
    sys = linear_system(0.5, 0.1)
    t = (KTemplate(0.5), KTemplate(1.0), KTemplate(0.5), KTemplate(0.1))
    res = grid_oracle(abs_gap_net(), sys, t, refine=3)
    assert res["worst"] <= 1e-12
    assert res["n_states"] == 48


def test_grid_oracle_catches_bad_net():
    sys = linear_system(0.5, 0.1)
    t = (KTemplate(0.5), KTemplate(1.0), KTemplate(0.5), KTemplate(0.1))
    net = abs_gap_net()
    net.weights[-1] = -net.weights[-1]  # V = -|x - xhat|
    assert grid_oracle(net, sys, t, refine=3)["lower"] > 0.1
    with pytest.raises(ValueError):
        grid_oracle(net, sys, t, refine=1)
    with pytest.raises(InfeasibleBudget):
        grid_oracle(net, sys, t, refine=3, budget=100)


def test_falsifier_contraction(contraction):
    res = falsify_delta_iss(contraction, n_trials=50, horizon=50, seed=1)
    assert not res.violated and res.contraction_ok
    assert res.input_gain > 0


def test_falsifier_scalar_benchmark(scalar):
    res = falsify_delta_iss(scalar, n_trials=40, horizon=100, seed=0)
    assert not res.violated


def test_falsifier_expanding_system():
    sys = DiscreteSystem(Box([0.0], [1.0]), Box([0.0], [0.1]),
                         lambda X, U: np.clip(0.5 + 1.1 * (X - 0.5) + 0.0 * U, 0.0, 1.0), name="repeller")
    res = falsify_delta_iss(sys, n_trials=40, horizon=60, seed=0)
    assert res.violated and not res.contraction_ok
