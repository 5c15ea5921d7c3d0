from __future__ import annotations

import itertools

import numpy as np
import pytest

from ehsaging.aging import AgingBounds, build_costs, illustrative_constants
from ehsaging.cmdp import Policy, evaluate_policy, solve_cmdp
from ehsaging.markov import BurstParams, EmissionDist, FiniteChain, build_burst_chain, burst_emissions
from ehsaging.sim import (
    WalkParams,
    batch_means_se,
    make_rng,
    rollout,
    simulate,
    simulate_runs,
    validate_walk,
    walk_displacements,
    warmup_slots,
)
from ehsaging.system import HarvestingSystem, Source, SystemConfig

BATTERY = illustrative_constants(q_nom=3.0)


def burst(phi, b):
    return Source(build_burst_chain(BurstParams(phi, b)), burst_emissions())


@pytest.fixture(scope="module")
def small():
    system = HarvestingSystem(SystemConfig(q_max=3, w_max=3, theta=0.3, y_levels=4), burst(0.6, 2), burst(0.5, 2))
    costs = build_costs(system.kernel(), system.harvest, 3.0)
    return system, costs


def test_frozen_system_constant_traces():
    still = Source(FiniteChain(np.eye(1)), EmissionDist.point_masses([0]))
    system = HarvestingSystem(SystemConfig(q_max=4, w_max=4, theta=0.5, y_levels=5), still, still)
    start = system.space.index((0, 2, 0, 0, 0, 0))
    idle = Policy.constant(system.space.size, (0, 1))
    st, trace = simulate(idle, system, 5000, seed=1, constants=BATTERY, initial=start, keep_trace=True)
    assert st.charge_std == 0.0 and st.backlog_std == 0.0 and st.saturation == 0.0
    assert st.charge_mean == 2.0
    assert np.all(trace.q == 2) and np.all(trace.w == 0)


def test_same_seed_identical(small):
    system, _ = small
    pol = Policy(np.full((system.space.size, 2), 0.5), (0, 1))
    a, ta = simulate(pol, system, 3000, seed=7, constants=BATTERY, keep_trace=True)
    b, tb = simulate(pol, system, 3000, seed=7, constants=BATTERY, keep_trace=True)
    c, _ = simulate(pol, system, 3000, seed=8, constants=BATTERY)
    assert a == b
    for k, v in ta.columns().items():
        np.testing.assert_array_equal(v, tb.columns()[k])
    assert a != c


def test_runs_use_distinct_streams(small):
    system, _ = small
    pol = Policy(np.full((system.space.size, 2), 0.5), (0, 1))
    runs = simulate_runs(pol, system, 2000, 3, seed=0, constants=BATTERY)
    assert [r.run for r in runs] == [0, 1, 2]
    assert len({r.charge_mean for r in runs}) == 3
    assert runs[1] == simulate(pol, system, 2000, 0, BATTERY, run=1)[0]


def test_clamps_respected():
    system = HarvestingSystem(SystemConfig(q_max=3, w_max=3, theta=0.3, y_levels=4), burst(0.9, 10), burst(0.9, 10))
    for a_idx in (0, 1):
        pol = Policy.constant(system.space.size, (0, 1), a_idx)
        raw = rollout(pol, system, 20000, make_rng(0))
        q, w = raw[1], raw[2]
        assert q.min() >= 0 and q.max() <= 3
        assert w.min() >= 0 and w.max() <= 3
    # idle under heavy load saturates the buffer
    st, _ = simulate(Policy.constant(system.space.size, (0, 1), 0), system, 5000, 0, BATTERY)
    assert st.saturation > 0.9


def test_errors(small):
    system, _ = small
    with pytest.raises(ValueError):
        simulate(Policy.constant(10, (0, 1)), system, 100, 0, BATTERY)
    with pytest.raises(ValueError):
        simulate(Policy.constant(system.space.size, (0, 1)), system, 0, 0, BATTERY)


def test_warmup():
    assert warmup_slots(10_000) == 1000
    assert warmup_slots(1_000_000) == 10_000


def test_kernel_costs_match_simulation_fixed_policy(small):
    # d3 and d4 are kernel expectations; their averages must match trace averages
    system, costs = small
    pol = Policy(np.tile([0.3, 0.7], (system.space.size, 1)), (0, 1))
    C, D = evaluate_policy(pol, system.kernel(), costs)
    st, _ = simulate(pol, system, 300_000, seed=3, constants=BATTERY)
    for name, analytic in zip(("objective", "mean_charge", "cycle_rate", "step_amplitude", "persistence"), (C, *D)):
        z = (st.cost_mean[name] - analytic) / st.cost_se[name]
        assert abs(z) < 3.5, (name, analytic, st.cost_mean[name], st.cost_se[name])


def test_action_frequencies_follow_policy(small):
    system, costs = small
    res = solve_cmdp(system.kernel(), costs, AgingBounds(mean_charge=1.2, step_amplitude=0.3, persistence=0.1))
    mu = res.policy.mu
    rand = res.policy.randomized_states()
    assert rand.size > 0
    raw = rollout(res.policy, system, 1_000_000, make_rng(11))
    space = system.space
    z = space.indices(raw[0], raw[1], raw[2], raw[3], raw[4], raw[5])
    act = raw[6]
    for s in rand:
        visits = z == s
        n = visits.sum()
        if n < 500:
            continue
        freq = np.mean(act[visits] == 1)
        sd = np.sqrt(mu[s, 1] * (1 - mu[s, 1]) / n)
        assert abs(freq - mu[s, 1]) < 4 * sd


def test_batch_means_se_iid():
    x = np.random.default_rng(0).normal(size=30_000)
    assert batch_means_se(x) == pytest.approx(1 / np.sqrt(30_000), rel=0.35)


def test_walk_symmetric_case():
    params = WalkParams(0.5, 1, 400, 20_000)
    assert params.predicted_variance() == 400.0
    assert params.exact_variance() == pytest.approx(400.0)
    rep = validate_walk(params, seed=2)
    assert abs(rep.empirical_variance - 400.0) < 4 * rep.variance_se


@pytest.mark.parametrize("p,dmax,tau", [(0.8, 1, 50), (0.6, 3, 30), (0.3, 2, 40)])
def test_walk_exact_variance_formula(p, dmax, tau):
    params = WalkParams(p, dmax, tau, 200_000)
    rep = validate_walk(params, seed=5, checkpoints=())
    assert abs(rep.empirical_variance - params.exact_variance()) < 4 * rep.variance_se


def test_walk_exact_variance_by_enumeration():
    # every direction/amplitude path of a 4-step walk, weighted exactly
    p, dmax, tau = 0.7, 2, 4
    params = WalkParams(p, dmax, tau, 2)
    second = 0.0
    for first in (1, -1):
        for keeps in itertools.product((True, False), repeat=tau - 1):
            w_dir = 0.5 * np.prod([p if k else 1 - p for k in keeps])
            dirs = [first]
            for k in keeps:
                dirs.append(dirs[-1] if k else -dirs[-1])
            for amps in itertools.product(range(1, dmax + 1), repeat=tau):
                x = sum(d * a for d, a in zip(dirs, amps))
                second += w_dir * x * x / dmax**tau
    assert params.exact_variance() == pytest.approx(second, rel=1e-12)


def test_walk_checkpoints_and_determinism():
    params = WalkParams(0.7, 3, 200, 1000)
    marks, a = walk_displacements(params, 4, marks=[10, 100])
    _, b = walk_displacements(params, 4, marks=[10, 100])
    assert marks.tolist() == [10, 100, 200]
    np.testing.assert_array_equal(a, b)
    assert np.abs(a[0]).max() <= 30


@pytest.mark.parametrize("kw", [dict(p=0.0), dict(p=1.0), dict(delta_max=0), dict(delta_max=1.5), dict(tau=0)])
def test_walk_params_validation(kw):
    base = dict(p=0.5, delta_max=1, tau=10, samples=10)
    base.update(kw)
    with pytest.raises(ValueError):
        WalkParams(**base)
