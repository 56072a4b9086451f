import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from diluted_perceptron.errors import CapacityError, ParameterError
from diluted_perceptron.fixed_point import (
    PopulationMeasure, TreeSample, apply_T, cavity_ratio, continuity_bound, contraction_test,
    mixture_weight, sample_tree, sample_trees, solve_fixed_point,
)
from diluted_perceptron.model import BoundedPotential
from diluted_perceptron.streams import substream
from diluted_perceptron.transport import w1_sorted

import oracle

TANH = BoundedPotential.scaled_tanh(0.2, 1.0)


def _tree(tau, rng):
    tau = np.asarray(tau, dtype=np.int64)
    rows = [rng.standard_normal(t) for t in tau]
    return TreeSample(len(tau), tau, rows, rng.standard_normal(len(tau)))


def test_theta_zero_gives_zero():
    tree = TreeSample(0, np.zeros(0, dtype=np.int64), [], np.zeros(0))
    assert cavity_ratio(tree, TANH, []) == 0.0


def test_single_constraint_without_spins_hand_formula():
    tree = TreeSample(1, np.array([0]), [np.zeros(0)], np.array([0.61]))
    up, down = math.exp(0.2 * math.tanh(0.61)), math.exp(0.2 * math.tanh(-0.61))
    assert cavity_ratio(tree, TANH, []) == pytest.approx((up - down) / (up + down), abs=1e-15)


def test_constant_potential_gives_zero_ratio():
    rng = np.random.default_rng(0)
    tree = _tree([2, 1, 3], rng)
    assert abs(cavity_ratio(tree, BoundedPotential.constant(0.9), rng.uniform(-1, 1, 6))) < 1e-15


@pytest.mark.parametrize("u", [TANH, BoundedPotential.gaussian_bump(1.3, 0.7),
                               BoundedPotential.smooth_step(-2.0, 1.5)],
                         ids=lambda u: u.descriptor)
def test_ratio_matches_oracle(u):
    kind, a, b = u.descriptor.split(":")
    ref_u = oracle.potential(kind, float(a), float(b))
    rng = np.random.default_rng(4)
    for _ in range(40):
        tau = rng.poisson(1.2, size=rng.integers(1, 4))
        tree = _tree(tau, rng)
        x = rng.uniform(-1, 1, int(tau.sum()))
        got = cavity_ratio(tree, u, x)
        ref = oracle.cavity_ratio(list(tau), tree.spin_weights, tree.cavity_weights, x, ref_u)
        assert got == pytest.approx(ref, abs=1e-13)


@given(seed=st.integers(0, 2**32 - 1), a=st.floats(-4, 4), b=st.floats(0.1, 5),
       kind=st.sampled_from(["tanh", "bump", "step"]))
def test_ratio_range(seed, a, b, kind):
    u = BoundedPotential.parse(f"{kind}:{a!r}:{b!r}")
    rng = np.random.default_rng(seed)
    tau = rng.poisson(1.5, size=rng.integers(0, 4))
    tree = _tree(tau, rng)
    x = rng.choice([-1.0, 1.0, 0.3, -0.9], size=int(tau.sum()))
    r = cavity_ratio(tree, u, x)
    assert -1.0 <= r <= 1.0


def test_even_potential_odd_symmetry():
    u = BoundedPotential.gaussian_bump(0.9, 1.2)
    rng = np.random.default_rng(5)
    for _ in range(30):
        tree = _tree(rng.poisson(1.0, size=rng.integers(1, 4)), rng)
        x = rng.uniform(-1, 1, tree.total_spins)
        flipped = TreeSample(tree.theta, tree.tau, tree.spin_weights, -tree.cavity_weights)
        assert cavity_ratio(flipped, u, x) == pytest.approx(-cavity_ratio(tree, u, x), abs=1e-12)


def test_ratio_validation():
    rng = np.random.default_rng(1)
    tree = _tree([2], rng)
    with pytest.raises(ParameterError):
        cavity_ratio(tree, TANH, [0.1])
    with pytest.raises(ParameterError):
        cavity_ratio(tree, TANH, [0.1, 1.5])
    big = _tree([13, 12], rng)
    with pytest.raises(CapacityError):
        cavity_ratio(big, TANH, np.zeros(25))


def test_tree_sampling_moments():
    theta, tau, _, _, totals = sample_trees(0.25, 2.0, substream(3, "trees"), 100_000)
    assert abs(theta.mean() - 0.5) < 3 * math.sqrt(0.5 / theta.size)
    se_t = totals.std(ddof=1) / math.sqrt(totals.size)
    assert abs(totals.mean() - 1.0) < 3 * se_t
    theta0, *_ = sample_trees(0.5, 0.0, substream(3, "trees"), 1000)
    assert not theta0.any()


def test_sample_tree_structure():
    tree = sample_tree(0.9, 2.0, substream(8, "one"))
    assert len(tree.tau) == tree.theta == len(tree.cavity_weights)
    assert [len(r) for r in tree.spin_weights] == list(tree.tau)


def test_mixture_weights_match_truncated_mass():
    alpha, gamma, cap = 0.3, 0.9, 8
    total = 0.0
    for theta in range(5):
        for tau in np.ndindex(*([cap] * theta)):
            total += mixture_weight(alpha, gamma, tau)
    lam = alpha * gamma
    inside = sum(math.exp(-gamma) * gamma**t / math.factorial(t) for t in range(cap))
    ref = sum(math.exp(-lam) * lam**th / math.factorial(th) * inside**th for th in range(5))
    assert total == pytest.approx(ref, abs=1e-14)


def test_apply_T_degenerate_cases():
    pop = PopulationMeasure(np.random.default_rng(2).uniform(-1, 1, 500), 0.1, 1.0)
    assert not apply_T(pop, 0.1, 1.0, BoundedPotential.constant(0.4), 1000, 1).values.any()
    assert not apply_T(pop, 0.1, 0.0, TANH, 1000, 1).values.any()


def test_apply_T_worker_independence():
    pop = PopulationMeasure(np.random.default_rng(2).uniform(-1, 1, 5000), 0.3, 1.5)
    a = apply_T(pop, 0.3, 1.5, TANH, 20_000, 9, chunk_size=3000, workers=1)
    b = apply_T(pop, 0.3, 1.5, TANH, 20_000, 9, chunk_size=3000, workers=4)
    assert np.array_equal(a.values, b.values)


def test_apply_T_on_zero_population_matches_brute_force():
    alpha, gamma = 0.1, 1.0
    pop = PopulationMeasure(np.zeros(1000), alpha, gamma)
    out = apply_T(pop, alpha, gamma, TANH, 400_000, 13).values
    rng = np.random.default_rng(99)
    ref_u = oracle.potential("tanh", 0.2, 1.0)
    ref = np.zeros(40_000)
    for s in range(ref.size):
        theta = rng.poisson(alpha * gamma)
        if theta == 0:
            continue
        tau = [int(rng.poisson(gamma)) for _ in range(theta)]
        if sum(tau) > 10:
            continue
        rows = [rng.standard_normal(t) for t in tau]
        ref[s] = oracle.cavity_ratio(tau, rows, rng.standard_normal(theta), np.zeros(sum(tau)), ref_u)
    for f in (lambda v: v, lambda v: v * v, np.abs):
        a, b = f(out), f(ref)
        se = math.hypot(a.std(ddof=1) / math.sqrt(a.size), b.std(ddof=1) / math.sqrt(b.size))
        assert abs(a.mean() - b.mean()) < 3 * se


def test_solver_trivial_potentials():
    pop, rep = solve_fixed_point(0.1, 1.0, BoundedPotential.constant(0.5), 2000, seed=1)
    assert rep.iterations == 1 and rep.converged and not pop.values.any()
    assert rep.final_step_w1 == rep.trajectory[-1] == 0.0


def test_solver_warns_outside_contraction():
    with pytest.warns(UserWarning, match="contraction"):
        _, rep = solve_fixed_point(0.9, 2.0, BoundedPotential.scaled_tanh(2.0, 1.0), 2000,
                                   max_iter=3, seed=1)
    assert not rep.conditions_ok
    assert all(d >= 0 for d in rep.trajectory)


def test_tighter_tolerance_stays_at_the_floor():
    a, ra = solve_fixed_point(0.1, 1.0, TANH, 50_000, tol=1e-3, seed=3)
    b, rb = solve_fixed_point(0.1, 1.0, TANH, 50_000, tol=5e-4, seed=3, max_iter=12)
    assert w1_sorted(a.values, b.values) < 5e-3


def test_contraction_examples():
    rng = np.random.default_rng(0)
    pop = PopulationMeasure(rng.uniform(-1, 1, 2000), 0.1, 1.0)
    same = contraction_test(pop, pop, 0.1, 1.0, TANH, 10_000, substream(1, "c"))
    assert same.coupled_w1_image == 0.0
    other = PopulationMeasure(rng.uniform(-1, 1, 2000), 0.1, 1.0)
    zero = contraction_test(pop, other, 0.1, 1.0, BoundedPotential.zero(), 10_000, 2)
    assert zero.coupled_w1_image == 0.0 and zero.bound == 0.0
    plus = PopulationMeasure(np.full(2000, 0.5), 0.1, 1.0)
    minus = PopulationMeasure(np.full(2000, -0.5), 0.1, 1.0)
    res = contraction_test(plus, minus, 0.1, 1.0, TANH, 200_000, substream(1, "pm"))
    assert res.coupled_w1_image <= res.bound + 3 * res.std_error


def test_continuity_bound():
    assert continuity_bound(0.1, 1.0, 0.1, 1.0) == 0.0
    b = continuity_bound(0.1, 1.0, 0.1, 1.1)
    ref = 4 * (0.1 * 0.1 * 1.1 * math.exp(0.1) + abs(0.1 - 0.11) * math.exp(0.01))
    assert b == pytest.approx(ref, rel=1e-14)
    p1, _ = solve_fixed_point(0.1, 1.0, TANH, 50_000, seed=1)
    p1b, _ = solve_fixed_point(0.1, 1.0, TANH, 50_000, seed=2)
    p2, _ = solve_fixed_point(0.1, 1.1, TANH, 50_000, seed=1)
    floor = 2 * w1_sorted(p1.values, p1b.values)
    assert w1_sorted(p1.values, p2.values) <= b + floor


def test_population_serialization(tmp_path):
    values = np.random.default_rng(3).uniform(-1, 1, 777)
    pop = PopulationMeasure(values, 0.1, 1.0, "tanh:0.2:1", 42)
    pop.save(tmp_path / "p.bin")
    back = PopulationMeasure.load(tmp_path / "p.bin")
    assert back.values.tobytes() == pop.values.tobytes()
    assert (back.alpha, back.gamma, back.potential, back.seed) == (0.1, 1.0, "tanh:0.2:1", 42)
    pop.to_csv(tmp_path / "p.csv")
    loaded = np.loadtxt(tmp_path / "p.csv", skiprows=1)
    assert np.array_equal(loaded, values)
    with pytest.raises(ParameterError):
        PopulationMeasure(np.array([0.0, 1.5]), 0.1, 1.0)
