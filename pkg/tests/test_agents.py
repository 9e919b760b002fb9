import math

import numpy as np
import pytest

from ieqn import agents
from ieqn.agents import (
    AgentConfig,
    baseline_update,
    greedy_action,
    ieqn_update,
    init_agent,
    mapper_values,
    spread_metric,
    toy_config,
    train,
    z_values,
)
from ieqn.dist import EmpiricalDistribution, FractionGrid, GaussianMixtureSpec, expectile, wasserstein1
from ieqn.mdp import chain_mdp
from ieqn.regression import DivergenceError, StatisticVector, expectile_loss, quantile_loss
from oracles import central_difference


@pytest.fixture(scope="module")
def chain():
    return chain_mdp(4, GaussianMixtureSpec.bimodal(), 10_000, 3)


def zero_agent(cfg, S=3, A=2):
    agent = init_agent(S, A, cfg)
    agent.z_params = np.zeros_like(agent.z_params)
    agent.z_target = agent.z_params.copy()
    if agent.mapper_params is not None:
        agent.mapper_params = np.zeros_like(agent.mapper_params)
        agent.mapper_target = agent.mapper_params.copy()
    return agent


# -- configuration -----------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        AgentConfig(variant="DQN")
    with pytest.raises(ValueError):
        AgentConfig(n_fractions=0)
    with pytest.raises(ValueError):
        AgentConfig(z_lr=0.0)
    with pytest.raises(ValueError):
        AgentConfig(mapper_lr=-1.0)
    with pytest.raises(ValueError):
        AgentConfig(target_update_period=0)
    with pytest.raises(ValueError):
        AgentConfig(polyak_weight=1.5)
    with pytest.raises(ValueError):
        AgentConfig(variant="IQN1", kappa=0.0)
    cfg = AgentConfig()
    assert cfg.polyak_weight == 0.5 and cfg.z_target_weight == 1.0 and cfg.updates_per_sample == 1


def test_targets_share_layout():
    agent = init_agent(4, 2, AgentConfig())
    assert agent.z_target.shape == agent.z_params.shape
    assert agent.mapper_target.shape == agent.mapper_params.shape
    assert init_agent(4, 2, AgentConfig(variant="IQN0")).mapper_params is None


# -- greedy action -----------------------------------------------------------


def test_greedy_action_examples():
    taus = np.linspace(0.1, 0.9, 5)
    single = init_agent(3, 1, AgentConfig(seed=2))
    assert greedy_action(single, 0, taus) == 0
    tie = zero_agent(AgentConfig(variant="IQN0"))
    assert greedy_action(tie, 1, taus) == 0
    # the last bias of the output layer belongs to action 1
    tie.z_params[-1] = 1.0
    assert np.allclose(z_values(tie, 1, taus).mean(axis=0), [0.0, 1.0])
    assert greedy_action(tie, 1, taus) == 1


# -- IEQN update -------------------------------------------------------------


def test_done_transition_with_zero_nets_is_a_no_op():
    for variant in agents.VARIANTS:
        cfg = AgentConfig(variant=variant)
        agent = zero_agent(cfg)
        before = agent.z_params.copy(), None if agent.mapper_params is None else agent.mapper_params.copy()
        if variant == "IEQN":
            losses = ieqn_update(agent, (0, 1, 0.0, 2, True), cfg)
        else:
            losses = (baseline_update(agent, (0, 1, 0.0, 2, True), cfg),)
        assert all(loss == 0.0 for loss in losses)
        if variant in ("IQN0", "IQN1"):
            # the L1 subgradient at a zero residual is taken from the lower branch
            continue
        assert np.array_equal(agent.z_params, before[0])
        if before[1] is not None:
            assert np.array_equal(agent.mapper_params, before[1])
        assert agent.target_queries == 0


def test_terminal_transitions_never_query_targets():
    cfg = toy_config("IEQN")
    agent = init_agent(3, 1, cfg)
    for _ in range(5):
        ieqn_update(agent, (0, 0, 1.0, 2, True), cfg)
    assert agent.target_queries == 0
    ieqn_update(agent, (0, 0, 1.0, 1, False), cfg)
    assert agent.target_queries == 1


def test_single_fraction_td_fixed_point():
    # with N=1 and tau=1/2 the expectile is the mean, so e settles on r + gamma * target
    cfg = AgentConfig(n_fractions=1, gamma=0.9, optimizer="sgd", z_lr=0.02, mapper_lr=0.02,
                      target_update_period=10**9, seed=3)
    agent = init_agent(3, 1, cfg)
    tau = np.array([0.5])
    target = 1.0 + 0.9 * z_values(agent, 1, mapper_values(agent, tau, agent.mapper_target),
                                  agent.z_target)[0, 0]
    for _ in range(3000):
        ieqn_update(agent, (0, 0, 1.0, 1, False), cfg, taus=tau)
    assert z_values(agent, 0, tau)[0, 0] == pytest.approx(target, abs=1e-3)


def test_single_fraction_expectile_loss_is_half_squared_td():
    cfg = AgentConfig(n_fractions=1, seed=4)
    agent = init_agent(3, 1, cfg)
    tau = np.array([0.5])
    e = z_values(agent, 0, tau)[0, 0]
    loss_e, _ = ieqn_update(agent, (0, 0, 2.5, 2, True), cfg, taus=tau)
    assert loss_e == pytest.approx(0.5 * (2.5 - e) ** 2, rel=1e-12)


def test_gradient_routing_matches_finite_differences():
    # plain SGD with unit rate makes each parameter delta equal to minus its gradient
    cfg = AgentConfig(n_fractions=4, optimizer="sgd", z_lr=1.0, mapper_lr=1.0,
                      target_update_period=10**9, hidden=8, mapper_hidden=8, seed=6)
    agent = init_agent(3, 2, cfg)
    taus = np.array([0.15, 0.4, 0.6, 0.85])
    r, s, a = 10.0, 1, 1  # far from every output so no residual changes sign
    z = np.full(4, r)
    theta, phi = agent.z_params.copy(), agent.mapper_params.copy()

    def loss_e(th, ph):
        e = z_values(agent, s, taus, th)[:, a]
        return expectile_loss(e[:, None], z[None, :], taus[:, None]).mean()

    def loss_q(th, ph):
        q = z_values(agent, s, mapper_values(agent, taus, ph), th)[:, a]
        return quantile_loss(q[:, None], z[None, :], taus[:, None]).mean()

    ieqn_update(agent, (s, a, r, 0, True), cfg, taus=taus)
    d_theta, d_phi = agent.z_params - theta, agent.mapper_params - phi
    g_theta = central_difference(lambda th: loss_e(th, phi), theta)
    g_phi = central_difference(lambda ph: loss_q(theta, ph), phi)
    assert np.max(np.abs(d_theta + g_theta)) <= 1e-4 * max(1.0, np.max(np.abs(g_theta)))
    assert np.max(np.abs(d_phi + g_phi)) <= 1e-4 * max(1.0, np.max(np.abs(g_phi)))
    # the candidate side of L_E does not involve phi at all
    assert np.array_equal(central_difference(lambda ph: loss_e(theta, ph), phi), np.zeros_like(phi))


def test_mapper_outputs_stay_in_unit_interval(chain):
    cfg = toy_config("IEQN", mapper_lr=5e-2)
    trace = train(chain, cfg, 300, eval_every=100)
    assert len(trace.points) == 3
    agent = init_agent(chain.n_states, 1, cfg)
    agent.mapper_params = agent.mapper_params * 1e3
    extreme = np.array([0.0, 1e-300, 0.5, 1 - 1e-16, 1.0])
    m = mapper_values(agent, extreme)
    assert np.all((m > 0) & (m < 1))


def test_divergence_error_carries_trace(chain):
    cfg = toy_config("IENNaive", optimizer="sgd", z_lr=1e3)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
        train(chain, cfg, 200, eval_every=1)
    err = info.value
    assert err.step is not None and err.trace is not None
    assert all(p.step < 200 for p in err.trace.points)


# -- baselines ---------------------------------------------------------------


def test_iqn1_small_kappa_matches_iqn0():
    taus = np.linspace(0.05, 0.95, 8)
    for r, done in ((1.7, True), (-0.4, False)):
        a0 = init_agent(3, 2, AgentConfig(variant="IQN0", seed=8))
        a1 = init_agent(3, 2, AgentConfig(variant="IQN1", kappa=1e-9, seed=8))
        l0 = baseline_update(a0, (0, 1, r, 1, done), AgentConfig(variant="IQN0"), taus=taus)
        l1 = baseline_update(a1, (0, 1, r, 1, done), AgentConfig(variant="IQN1", kappa=1e-9), taus=taus)
        assert abs(l0 - l1) <= 1e-6


def test_update_dispatch_reports_unused_loss_as_nan():
    for variant, nan_slot in (("IQN0", 0), ("IQN1", 0), ("IENNaive", 1)):
        cfg = AgentConfig(variant=variant)
        losses = agents.update(init_agent(3, 1, cfg), (0, 0, 1.0, 2, True), cfg)
        assert math.isnan(losses[nan_slot]) and not math.isnan(losses[1 - nan_slot])


# -- training harness --------------------------------------------------------


def test_train_is_deterministic(chain):
    cfg = toy_config("IEQN", seed=5)
    a = train(chain, cfg, 400, eval_every=200)
    b = train(chain, cfg, 400, eval_every=200)
    assert a.to_csv() == b.to_csv() and a.summary_csv() == b.summary_csv()
    steps = [p.step for p in a.points]
    assert steps == sorted(steps) == [200, 400]


def test_train_final_snapshot_only(chain):
    for n, every in ((0, None), (50, None), (50, 0), (50, 80)):
        trace = train(chain, toy_config("IQN0"), n, eval_every=every)
        assert [p.step for p in trace.points] == [n]
    with pytest.raises(ValueError):
        train(chain, toy_config("IQN0"), -1)


def test_trace_csv_layout(chain):
    trace = train(chain, toy_config("IEQN"), 10)
    rows = trace.to_csv().splitlines()
    assert rows[0] == "step,state,kind,fraction,value"
    assert len(rows) == 1 + 4 * 2 * agents.EVAL_K
    summary = trace.summary_csv().splitlines()
    assert summary[0] == "step,state,quantile_spread,expectile_spread,loss_e,loss_q" and len(summary) == 5


def test_chain_terminal_state_statistics(chain):
    # measured: the quantile readout of the state next to the reward ends near
    # W1 = 0.52 after 20k transitions and falls slowly (0.4 to 0.57 at 60k); the
    # tails need the Z-network at fractions that uniform sampling rarely visits.
    # The expectiles on the central levels are already close.
    trace = train(chain, toy_config("IEQN"), 20_000, eval_every=10_000)
    reward = chain.rewards[3][0]
    w = [wasserstein1(EmpiricalDistribution.from_samples(p.stats[3]["quantile"].values), reward)
         for p in trace.points]
    assert w[-1] <= 0.6
    grid = FractionGrid(agents.EVAL_K)
    mid = (grid.levels >= 0.1) & (grid.levels <= 0.9)
    err = np.abs(trace.final.stats[3]["expectile"].values - expectile(reward, grid.levels))
    assert np.mean(err[mid]) <= 0.2


# -- spread metric -----------------------------------------------------------


def test_spread_metric_examples():
    g = FractionGrid(10)
    assert spread_metric(StatisticVector(g, np.full(10, 3.0), "quantile")) == 0.0
    assert spread_metric(StatisticVector(g, g.levels, "quantile"), 1.0) == pytest.approx(0.8)
    # default scale is |mean|, here 0.5
    assert spread_metric(StatisticVector(g, g.levels, "quantile")) == pytest.approx(1.6)
    centred = StatisticVector(g, g.levels - 0.5, "expectile")
    assert spread_metric(centred) == pytest.approx(0.8 / agents.SCALE_FLOOR)
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            spread_metric(centred, bad)


def test_spread_metric_interpolates():
    g = FractionGrid(6)  # levels 1/12 ... 11/12, so 0.1 and 0.9 fall between levels
    sv = StatisticVector(g, 2.0 * g.levels, "quantile")
    assert spread_metric(sv, 1.0) == pytest.approx(1.6)
