"""TD agents on top of :mod:`ieqn.approx`: IQN-0, IQN-1, IEN-Naive and IEQN.

All four share one Z-network ``Z(s, tau) -> R^{|A|}`` whose input is the
one-hot state followed by the raw fraction. IEQN adds a mapper network
``m(tau) -> (0, 1)`` shared across states; the Z-network only ever sees
the expectile loss and the mapper only the quantile loss.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from . import approx
from .approx import NetworkSpec, OptimizerState
from .dist import FractionGrid
from .mdp import TabularMDP
from .regression import (
    DivergenceError,
    StatisticVector,
    expectile_loss,
    expectile_loss_grad,
    huber_quantile_loss,
    huber_quantile_loss_grad,
    quantile_loss,
    quantile_loss_grad,
)

Variant = Literal["IQN0", "IQN1", "IENNaive", "IEQN"]
VARIANTS: tuple[str, ...] = ("IQN0", "IQN1", "IENNaive", "IEQN")
EVAL_K = 51
SCALE_FLOOR = 1e-3
# mapper inputs are logits of fractions clipped this far from 0 and 1
_TAU_CLIP = 1e-6


@dataclass(frozen=True)
class AgentConfig:
    """Defaults follow the Z-function / mapper hyperparameter tables where
    they make sense at toy scale (Adam, lr 1e-4 and 7e-5, full Z-target
    copies, Polyak weight 0.5 for the mapper target)."""

    variant: Variant = "IEQN"
    kappa: float = 1.0
    n_fractions: int = 32
    z_lr: float = 1e-4
    mapper_lr: float = 7e-5
    target_update_period: int = 100
    z_target_weight: float = 1.0
    polyak_weight: float = 0.5
    gamma: float = 1.0
    seed: int = 0
    hidden: int = 64
    mapper_hidden: int = 64
    optimizer: str = "adam"
    updates_per_sample: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_fractions < 1:
            raise ValueError("n_fractions must be at least 1")
        if not (self.z_lr > 0 and self.mapper_lr > 0):
            raise ValueError("learning rates must be positive")
        if self.target_update_period < 1:
            raise ValueError("target_update_period must be at least 1")
        for w in (self.polyak_weight, self.z_target_weight):
            if not 0.0 <= w <= 1.0:
                raise ValueError("target update weights must lie in [0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.variant == "IQN1" and not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.updates_per_sample < 1:
            raise ValueError("updates_per_sample must be at least 1")

    @property
    def uses_mapper(self) -> bool:
        return self.variant == "IEQN"


@dataclass
class AgentState:
    z_spec: NetworkSpec
    z_params: np.ndarray
    z_target: np.ndarray
    z_opt: OptimizerState
    n_states: int
    n_actions: int
    rng: np.random.Generator
    mapper_spec: NetworkSpec | None = None
    mapper_params: np.ndarray | None = None
    mapper_target: np.ndarray | None = None
    mapper_opt: OptimizerState | None = None
    step: int = 0
    # counts target-network evaluations; lets tests check terminal handling
    target_queries: int = 0


def z_network_spec(n_states: int, n_actions: int, hidden: int = 64) -> NetworkSpec:
    return approx.mlp((n_states + 1, hidden, hidden, n_actions), hidden="relu")


def mapper_network_spec(hidden: int = 64) -> NetworkSpec:
    """Two hidden layers (ReLU then Tanh), skip paths, sigmoid output."""
    return NetworkSpec((1, hidden, hidden, 1), ("relu", "tanh", "identity"),
                       residual=True, output_squash="unit")


def init_agent(n_states: int, n_actions: int, cfg: AgentConfig) -> AgentState:
    ss = np.random.SeedSequence(cfg.seed)
    z_seed, m_seed, rng_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    z_spec = z_network_spec(n_states, n_actions, cfg.hidden)
    z = approx.init_params(z_spec, z_seed)
    st = AgentState(
        z_spec=z_spec, z_params=z, z_target=z.copy(),
        z_opt=OptimizerState.create(cfg.optimizer, cfg.z_lr, z_spec.n_params),
        n_states=n_states, n_actions=n_actions,
        rng=np.random.Generator(np.random.PCG64(rng_seed)),
    )
    if cfg.uses_mapper:
        m_spec = mapper_network_spec(cfg.mapper_hidden)
        # small last layer: the mapper starts close to the identity on fractions
        m = approx.init_params(m_spec, m_seed, last_scale=0.01)
        st.mapper_spec, st.mapper_params, st.mapper_target = m_spec, m, m.copy()
        st.mapper_opt = OptimizerState.create(cfg.optimizer, cfg.mapper_lr, m_spec.n_params)
    return st


# ---------------------------------------------------------------------------
# network queries


def _z_inputs(n_states: int, s: int, taus: np.ndarray) -> np.ndarray:
    x = np.zeros((taus.size, n_states + 1))
    x[:, s] = 1.0
    x[:, -1] = taus
    return x


def _mapper_inputs(taus: np.ndarray) -> np.ndarray:
    t = np.clip(taus, _TAU_CLIP, 1.0 - _TAU_CLIP)
    return np.log(t / (1.0 - t))[:, None]


def z_values(agent: AgentState, s: int, taus, params: np.ndarray | None = None) -> np.ndarray:
    """``(N, |A|)`` outputs of the Z-network at state ``s``."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    p = agent.z_params if params is None else params
    return approx.forward(agent.z_spec, p, _z_inputs(agent.n_states, s, taus))


def mapper_values(agent: AgentState, taus, params: np.ndarray | None = None) -> np.ndarray:
    if agent.mapper_spec is None:
        raise ValueError("this agent has no mapper")
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    p = agent.mapper_params if params is None else params
    return approx.forward(agent.mapper_spec, p, _mapper_inputs(taus))[:, 0]


def greedy_action(agent: AgentState, s: int, fractions) -> int:
    """Argmax over actions of the fraction-averaged Z; lowest index wins ties."""
    return int(np.argmax(z_values(agent, s, fractions).mean(axis=0)))


def _target_samples(agent: AgentState, cfg: AgentConfig, r: float, s2: int, done: bool,
                    taus: np.ndarray) -> np.ndarray:
    if done:
        return np.full(taus.size, float(r))
    a2 = greedy_action(agent, s2, taus)
    agent.target_queries += 1
    if cfg.uses_mapper:
        fr = mapper_values(agent, taus, agent.mapper_target)
    else:
        fr = taus
    nxt = z_values(agent, s2, fr, agent.z_target)[:, a2]
    return r + cfg.gamma * nxt


def _pairwise(fn, pred: np.ndarray, z: np.ndarray, frac: np.ndarray, *extra):
    """Mean over all (i, j) pairs and the gradient with respect to pred_i."""
    P, Z, F = pred[:, None], z[None, :], frac[:, None]
    n2 = pred.size * z.size
    return fn[0](P, Z, F, *extra).sum() / n2, fn[1](P, Z, F, *extra).sum(axis=1) / n2


_L1 = (quantile_loss, quantile_loss_grad)
_L2 = (expectile_loss, expectile_loss_grad)
_HUBER = (huber_quantile_loss, huber_quantile_loss_grad)


def _sample_fractions(agent: AgentState, cfg: AgentConfig) -> np.ndarray:
    return agent.rng.random(cfg.n_fractions)


def _refresh_targets(agent: AgentState, cfg: AgentConfig) -> None:
    if agent.step % cfg.target_update_period:
        return
    agent.z_target = approx.polyak_update(agent.z_target, agent.z_params, cfg.z_target_weight)
    if agent.mapper_params is not None:
        agent.mapper_target = approx.polyak_update(agent.mapper_target, agent.mapper_params,
                                                   cfg.polyak_weight)


def ieqn_update(agent: AgentState, transition: tuple, cfg: AgentConfig,
                taus: np.ndarray | None = None) -> tuple[float, float]:
    """One IEQN step. Returns ``(L_E, L_Q)``; ``agent`` is updated in place.

    theta is moved by the expectile loss only and phi by the quantile loss
    only; inside the quantile loss theta is held fixed and gradients flow
    to phi through dZ/dtau.
    """
    s, a, r, s2, done = transition
    taus = _sample_fractions(agent, cfg) if taus is None else np.asarray(taus, dtype=float)
    z = _target_samples(agent, cfg, r, s2, done, taus)

    tape_e = approx.forward_tape(agent.z_spec, agent.z_params, _z_inputs(agent.n_states, s, taus))
    e = tape_e.y[:, a]
    x_m = _mapper_inputs(taus)
    tape_m = approx.forward_tape(agent.mapper_spec, agent.mapper_params, x_m)
    m = tape_m.y[:, 0]
    tape_q = approx.forward_tape(agent.z_spec, agent.z_params, _z_inputs(agent.n_states, s, m))
    q = tape_q.y[:, a]

    loss_e, de = _pairwise(_L2, e, z, taus)
    loss_q, dq = _pairwise(_L1, q, z, taus)
    if not (math.isfinite(loss_e) and math.isfinite(loss_q)):
        raise DivergenceError("IEQN loss is not finite", step=agent.step)

    up = np.zeros((taus.size, agent.n_actions))
    up[:, a] = de
    g_theta, _ = approx.backward_tape(agent.z_spec, agent.z_params, tape_e, up)

    up[:, a] = dq
    # theta frozen: only the input gradient dZ/dtau is used here
    _, dz_dx = approx.backward_tape(agent.z_spec, agent.z_params, tape_q, up, need_params=False)
    g_phi, _ = approx.backward_tape(agent.mapper_spec, agent.mapper_params, tape_m,
                                    dz_dx[:, -1:])

    agent.z_params = agent.z_opt.step(agent.z_params, g_theta)
    agent.mapper_params = agent.mapper_opt.step(agent.mapper_params, g_phi)
    agent.step += 1
    _refresh_targets(agent, cfg)
    return float(loss_e), float(loss_q)


def baseline_update(agent: AgentState, transition: tuple, cfg: AgentConfig,
                    taus: np.ndarray | None = None) -> float:
    """One IQN-0 / IQN-1 / IEN-Naive step on the single Z-network."""
    s, a, r, s2, done = transition
    taus = _sample_fractions(agent, cfg) if taus is None else np.asarray(taus, dtype=float)
    z = _target_samples(agent, cfg, r, s2, done, taus)
    tape = approx.forward_tape(agent.z_spec, agent.z_params, _z_inputs(agent.n_states, s, taus))
    pred = tape.y[:, a]
    if cfg.variant == "IQN0":
        loss, dpred = _pairwise(_L1, pred, z, taus)
    elif cfg.variant == "IQN1":
        loss, dpred = _pairwise(_HUBER, pred, z, taus, cfg.kappa)
    elif cfg.variant == "IENNaive":
        loss, dpred = _pairwise(_L2, pred, z, taus)
    else:
        raise ValueError("IEQN uses ieqn_update")
    if not math.isfinite(loss):
        raise DivergenceError(f"{cfg.variant} loss is not finite", step=agent.step)
    up = np.zeros((taus.size, agent.n_actions))
    up[:, a] = dpred
    grad, _ = approx.backward_tape(agent.z_spec, agent.z_params, tape, up)
    agent.z_params = agent.z_opt.step(agent.z_params, grad)
    agent.step += 1
    _refresh_targets(agent, cfg)
    return float(loss)


def update(agent: AgentState, transition: tuple, cfg: AgentConfig) -> tuple[float, float]:
    """Variant dispatch. Returns ``(loss_e, loss_q)``; the unused one is NaN."""
    if cfg.uses_mapper:
        return ieqn_update(agent, transition, cfg)
    loss = baseline_update(agent, transition, cfg)
    return (loss, math.nan) if cfg.variant == "IENNaive" else (math.nan, loss)


# ---------------------------------------------------------------------------
# diagnostics


def spread_metric(stats: StatisticVector, scale: float | None = None) -> float:
    """``(stat at 0.9 - stat at 0.1) / scale``, linearly interpolated.

    ``scale`` defaults to ``max(|mean of the statistic values|, 1e-3)``.
    """
    if scale is None:
        scale = max(abs(float(np.mean(stats.values))), SCALE_FLOOR)
    if not scale > 0:
        raise ValueError("scale must be positive")
    return (stats.at(0.9) - stats.at(0.1)) / scale


def statistics_at(agent: AgentState, cfg: AgentConfig, s: int, a: int,
                  grid: FractionGrid) -> dict[str, StatisticVector]:
    """Statistic vectors the agent represents at (s, a) on ``grid``."""
    out: dict[str, StatisticVector] = {}
    direct = z_values(agent, s, grid.levels)[:, a]
    if cfg.variant in ("IQN0", "IQN1"):
        out["quantile"] = StatisticVector(grid, direct, "quantile")
    else:
        out["expectile"] = StatisticVector(grid, direct, "expectile")
    if cfg.uses_mapper:
        q = z_values(agent, s, mapper_values(agent, grid.levels))[:, a]
        out["quantile"] = StatisticVector(grid, q, "quantile")
    return out


# ---------------------------------------------------------------------------
# training harness


@dataclass
class EvalPoint:
    step: int
    stats: dict[int, dict[str, StatisticVector]]
    loss_e: float
    loss_q: float


@dataclass
class TrainTrace:
    variant: str
    seed: int
    points: list[EvalPoint] = field(default_factory=list)

    @property
    def final(self) -> EvalPoint:
        return self.points[-1]

    def spread(self, state: int, kind: str, point: EvalPoint | None = None,
               scale: float | None = 1.0) -> float:
        p = self.final if point is None else point
        return spread_metric(p.stats[state][kind], scale)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        buf.write("step,state,kind,fraction,value\n")
        for p in self.points:
            for s, by_kind in p.stats.items():
                for kind in sorted(by_kind):
                    sv = by_kind[kind]
                    for f, v in zip(sv.grid.levels, sv.values):
                        buf.write(f"{p.step},{s},{kind},{f:.17g},{v:.17g}\n")
        if path is not None:
            Path(path).write_text(buf.getvalue())
        return buf.getvalue()

    def summary_csv(self, path: str | Path | None = None) -> str:
        """Spreads use the default scale, ``max(|mean statistic|, 1e-3)``."""
        buf = io.StringIO()
        buf.write("step,state,quantile_spread,expectile_spread,loss_e,loss_q\n")
        for p in self.points:
            for s, by_kind in p.stats.items():
                qs = spread_metric(by_kind["quantile"]) if "quantile" in by_kind else math.nan
                es = spread_metric(by_kind["expectile"]) if "expectile" in by_kind else math.nan
                buf.write(f"{p.step},{s},{qs:.17g},{es:.17g},{p.loss_e:.17g},{p.loss_q:.17g}\n")
        if path is not None:
            Path(path).write_text(buf.getvalue())
        return buf.getvalue()


def _snapshot(agent: AgentState, cfg: AgentConfig, mdp: TabularMDP, grid: FractionGrid,
              loss_e: float, loss_q: float) -> EvalPoint:
    stats = {}
    for s in range(mdp.n_states):
        if mdp.terminal[s]:
            continue
        a = greedy_action(agent, s, grid.levels)
        stats[s] = statistics_at(agent, cfg, s, a, grid)
    return EvalPoint(agent.step, stats, loss_e, loss_q)


def train(mdp: TabularMDP, cfg: AgentConfig, n_steps: int, eval_every: int | None = None,
          start_state: int = 0, eval_k: int = EVAL_K) -> TrainTrace:
    """Online TD training from ``start_state``; episodes restart on termination.

    ``n_steps`` counts environment transitions. Snapshots are taken every
    ``eval_every`` transitions (if given) and always at the end. A
    DivergenceError raised mid-run carries the partial trace as ``.trace``.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    agent = init_agent(mdp.n_states, mdp.n_actions, cfg)
    env_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    grid = FractionGrid(eval_k)
    trace = TrainTrace(cfg.variant, cfg.seed)
    cum_T = np.cumsum(mdp.transitions, axis=2)
    le_sum = lq_sum = 0.0
    n_le = n_lq = 0
    s = start_state
    try:
        for t in range(1, n_steps + 1):
            a = greedy_action(agent, s, _sample_fractions(agent, cfg)) if mdp.n_actions > 1 else 0
            rd = mdp.rewards[s][a]
            k = min(int(np.searchsorted(rd._cum_weights, env_rng.random(), side="right")), rd.size - 1)
            r = float(rd.atoms[k])
            s2 = min(int(np.searchsorted(cum_T[s, a], env_rng.random(), side="right")),
                     mdp.n_states - 1)
            done = bool(mdp.terminal[s2])
            for _ in range(cfg.updates_per_sample):
                le, lq = update(agent, (s, a, r, s2, done), cfg)
                if not math.isnan(le):
                    le_sum += le
                    n_le += 1
                if not math.isnan(lq):
                    lq_sum += lq
                    n_lq += 1
            s = start_state if done else s2
            if eval_every and t % eval_every == 0 and t != n_steps:
                trace.points.append(_snapshot(agent, cfg, mdp, grid,
                                              le_sum / n_le if n_le else math.nan,
                                              lq_sum / n_lq if n_lq else math.nan))
                le_sum = lq_sum = 0.0
                n_le = n_lq = 0
    except DivergenceError as err:
        err.trace = trace
        raise
    trace.points.append(_snapshot(agent, cfg, mdp, grid,
                                  le_sum / n_le if n_le else math.nan,
                                  lq_sum / n_lq if n_lq else math.nan))
    return trace


def toy_config(variant: Variant, seed: int = 0, **overrides) -> AgentConfig:
    """Settings used for the chain-MDP reproduction (faster rates than Atari)."""
    base = AgentConfig(variant=variant, seed=seed, z_lr=5e-4, mapper_lr=5e-4,
                       target_update_period=100, n_fractions=32, gamma=1.0)
    return replace(base, **overrides)
