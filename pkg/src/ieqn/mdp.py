"""Tabular MDPs, distributional Bellman backups, and a Monte-Carlo return oracle."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dist import EmpiricalDistribution, GaussianMixtureSpec, sample_mixture, wasserstein1
from .projection import project_dual, project_quantile

ROW_SUM_TOL = 1e-12
DEFAULT_MAX_ATOMS = 1000
ORACLE_PRECISION = 1e-6
MAX_UNDISCOUNTED_HORIZON = 100_000


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite MDP with a reward distribution per (state, action).

    ``rewards[s][a]`` is an EmpiricalDistribution, ``transitions[s, a]`` a
    probability vector over next states. Terminal states must self-loop
    with a zero reward on every action.
    """

    rewards: tuple[tuple[EmpiricalDistribution, ...], ...]
    transitions: np.ndarray
    terminal: np.ndarray
    gamma: float

    def __post_init__(self):
        T = np.array(self.transitions, dtype=float)
        if T.ndim != 3 or T.shape[0] != T.shape[2]:
            raise ValueError("transitions must have shape (S, A, S)")
        S, A, _ = T.shape
        if S < 1 or A < 1:
            raise ValueError("need at least one state and one action")
        if np.any(T < 0) or np.any(np.abs(T.sum(axis=2) - 1.0) > ROW_SUM_TOL):
            raise ValueError("transition rows must be probability vectors")
        rewards = tuple(tuple(row) for row in self.rewards)
        if len(rewards) != S or any(len(row) != A for row in rewards):
            raise ValueError("rewards must be indexed [state][action]")
        term = np.array(self.terminal, dtype=bool).reshape(-1)
        if term.shape != (S,):
            raise ValueError("terminal needs one flag per state")
        for s in np.flatnonzero(term):
            for a in range(A):
                if T[s, a, s] != 1.0:
                    raise ValueError(f"terminal state {s} must self-loop")
                r = rewards[s][a]
                if not (r.is_degenerate and r.min == 0.0):
                    raise ValueError(f"terminal state {s} must have zero reward")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        T.flags.writeable = False
        term.flags.writeable = False
        object.__setattr__(self, "transitions", T)
        object.__setattr__(self, "terminal", term)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def max_abs_reward(self) -> float:
        return max(max(abs(r.min), abs(r.max)) for row in self.rewards for r in row)

    def mean_rewards(self) -> np.ndarray:
        return np.array([[r.mean for r in row] for row in self.rewards])


@dataclass(frozen=True, eq=False)
class Policy:
    probs: np.ndarray  # (S, A)

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2 or np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > ROW_SUM_TOL):
            raise ValueError("policy rows must be probability vectors")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, mdp: TabularMDP) -> "Policy":
        return cls(np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions))

    @classmethod
    def deterministic(cls, mdp: TabularMDP, actions: Sequence[int]) -> "Policy":
        p = np.zeros((mdp.n_states, mdp.n_actions))
        p[np.arange(mdp.n_states), np.asarray(actions)] = 1.0
        return cls(p)


class ReturnTable:
    """Per-(state, action) return distributions."""

    def __init__(self, entries: Sequence[Sequence[EmpiricalDistribution]]):
        self.entries = tuple(tuple(row) for row in entries)
        if not self.entries or len({len(r) for r in self.entries}) != 1:
            raise ValueError("return table must be a non-empty rectangular grid")

    @classmethod
    def constant(cls, mdp: TabularMDP, value: float = 0.0) -> "ReturnTable":
        d = EmpiricalDistribution.dirac(value)
        return cls([[d] * mdp.n_actions for _ in range(mdp.n_states)])

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.entries), len(self.entries[0])

    def __getitem__(self, sa: tuple[int, int]) -> EmpiricalDistribution:
        s, a = sa
        return self.entries[s][a]

    def means(self) -> np.ndarray:
        return np.array([[d.mean for d in row] for row in self.entries])

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        buf.write("state,action,atom,weight\n")
        for s, row in enumerate(self.entries):
            for a, d in enumerate(row):
                for z, w in zip(d.atoms, d.weights):
                    buf.write(f"{s},{a},{z:.17g},{w:.17g}\n")
        if path is not None:
            Path(path).write_text(buf.getvalue())
        return buf.getvalue()


def sup_w1(t1: ReturnTable, t2: ReturnTable, states: Sequence[int] | None = None) -> float:
    """Largest per-entry W1 distance, optionally over a subset of states."""
    if t1.shape != t2.shape:
        raise ValueError("tables have different shapes")
    S, A = t1.shape
    rows = range(S) if states is None else states
    return max(wasserstein1(t1[s, a], t2[s, a]) for s in rows for a in range(A))


# ---------------------------------------------------------------------------
# constructors


def chain_mdp(n_states: int = 4,
              terminal_reward: GaussianMixtureSpec | EmpiricalDistribution | None = None,
              n_reward_atoms: int = 10_000, seed: int = 0, gamma: float = 1.0) -> TabularMDP:
    """Deterministic single-action chain ``s_0 -> ... -> s_{n-1} -> end``.

    Every step pays zero except leaving the last chain state, which pays a
    reward drawn from ``terminal_reward`` and ends the episode. The
    absorbing end state is appended as index ``n_states``.
    """
    if n_states < 2:
        raise ValueError("a chain needs at least 2 states")
    if terminal_reward is None:
        terminal_reward = GaussianMixtureSpec.bimodal()
    if isinstance(terminal_reward, GaussianMixtureSpec):
        final = sample_mixture(terminal_reward, n_reward_atoms, seed)
    else:
        final = terminal_reward
    S = n_states + 1
    T = np.zeros((S, 1, S))
    for s in range(n_states):
        T[s, 0, s + 1] = 1.0
    T[n_states, 0, n_states] = 1.0
    zero = EmpiricalDistribution.dirac(0.0)
    rewards = [[zero] for _ in range(S)]
    rewards[n_states - 1] = [final]
    terminal = np.zeros(S, dtype=bool)
    terminal[n_states] = True
    return TabularMDP(tuple(tuple(r) for r in rewards), T, terminal, gamma)


def self_loop_mdp(reward: EmpiricalDistribution, gamma: float) -> TabularMDP:
    """One non-terminal state that loops on itself forever."""
    return TabularMDP(((reward,),), np.ones((1, 1, 1)), np.zeros(1, dtype=bool), gamma)


# ---------------------------------------------------------------------------
# Bellman operators


def _backup(mdp: TabularMDP, pi: Policy, Z: ReturnTable, s: int, a: int) -> EmpiricalDistribution:
    r = mdp.rewards[s][a]
    atoms, weights = [], []
    for s2 in np.flatnonzero(mdp.transitions[s, a]):
        p = mdp.transitions[s, a, s2]
        for a2 in np.flatnonzero(pi.probs[s2]):
            z = Z[s2, a2]
            atoms.append((r.atoms[:, None] + mdp.gamma * z.atoms[None, :]).ravel())
            weights.append((r.weights[:, None] * (p * pi.probs[s2, a2]) * z.weights[None, :]).ravel())
    return EmpiricalDistribution.from_weighted(np.concatenate(atoms), np.concatenate(weights),
                                               merge=True)


def bellman_apply(mdp: TabularMDP, pi: Policy, Z: ReturnTable,
                  max_atoms: int = DEFAULT_MAX_ATOMS) -> ReturnTable:
    """Exact mixture backup, quantile-compressed above ``max_atoms`` atoms."""
    if max_atoms < 1:
        raise ValueError("max_atoms must be at least 1")
    if Z.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("return table does not match the MDP")
    zero = EmpiricalDistribution.dirac(0.0)
    out = []
    for s in range(mdp.n_states):
        row = []
        for a in range(mdp.n_actions):
            if mdp.terminal[s]:
                row.append(zero)
                continue
            d = _backup(mdp, pi, Z, s, a)
            row.append(project_quantile(d, max_atoms) if d.size > max_atoms else d)
        out.append(row)
    return ReturnTable(out)


def dual_bellman_apply(mdp: TabularMDP, pi: Policy, Z: ReturnTable, K: int,
                       max_atoms: int = DEFAULT_MAX_ATOMS) -> ReturnTable:
    """Distributional backup followed by the dual projection onto K atoms."""
    if K < 1:
        raise ValueError("K must be at least 1")
    backed = bellman_apply(mdp, pi, Z, max_atoms)
    return ReturnTable([[project_dual(d, K) for d in row] for row in backed.entries])


@dataclass
class IterationResult:
    table: ReturnTable
    deltas: list[float]  # sup-W1 between successive iterates
    errors: list[float]  # sup-W1 to the reference table, when one is given


def iterate_dual(mdp: TabularMDP, pi: Policy, K: int, n_iter: int,
                 init: ReturnTable | None = None, reference: ReturnTable | None = None,
                 max_atoms: int = DEFAULT_MAX_ATOMS, tol: float = 0.0) -> IterationResult:
    """Repeat the projected dual operator; stop early once an update moves less than ``tol``."""
    Z = init if init is not None else ReturnTable.constant(mdp)
    deltas, errors = [], []
    for _ in range(n_iter):
        nxt = dual_bellman_apply(mdp, pi, Z, K, max_atoms)
        deltas.append(sup_w1(nxt, Z))
        Z = nxt
        if reference is not None:
            errors.append(sup_w1(Z, reference))
        if deltas[-1] <= tol:
            break
    return IterationResult(Z, deltas, errors)


# ---------------------------------------------------------------------------
# Monte-Carlo oracle


def oracle_horizon(mdp: TabularMDP, precision: float = ORACLE_PRECISION) -> int | None:
    """Smallest h with ``gamma**h * max|r| <= precision``; None when gamma == 1."""
    if mdp.gamma >= 1.0:
        return None
    rmax = mdp.max_abs_reward
    if rmax <= precision or mdp.gamma == 0.0:
        return 1
    return max(1, math.ceil(math.log(precision / rmax) / math.log(mdp.gamma)))


def _sample_rows(rng: np.random.Generator, cum_rows: np.ndarray) -> np.ndarray:
    u = rng.random(cum_rows.shape[0])
    return np.minimum((u[:, None] >= cum_rows).sum(axis=1), cum_rows.shape[1] - 1)


def return_distribution_oracle(mdp: TabularMDP, pi: Policy, n_rollouts: int,
                               horizon: int | None = None, seed: int = 0) -> ReturnTable:
    """Empirical discounted returns from seeded rollouts, per (state, action).

    Each (s, a) gets its own stream derived from ``(seed, s, a)``.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be at least 1")
    needed = oracle_horizon(mdp)
    if horizon is None:
        horizon = needed if needed is not None else MAX_UNDISCOUNTED_HORIZON
    elif needed is not None and horizon < needed:
        raise ValueError(f"horizon {horizon} too short; need at least {needed} steps")

    S, A = mdp.n_states, mdp.n_actions
    cumT = np.cumsum(mdp.transitions, axis=2)
    cumPi = np.cumsum(pi.probs, axis=1)
    zero = EmpiricalDistribution.dirac(0.0)
    out = []
    for s in range(S):
        row = []
        for a in range(A):
            if mdp.terminal[s]:
                row.append(zero)
                continue
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, s, a])))
            state = np.full(n_rollouts, s)
            action = np.full(n_rollouts, a)
            ret = np.zeros(n_rollouts)
            disc = 1.0
            alive = np.ones(n_rollouts, dtype=bool)
            for _ in range(horizon):
                idx = np.flatnonzero(alive)
                if idx.size == 0:
                    break
                st, ac = state[idx], action[idx]
                r = np.empty(idx.size)
                pair = st * A + ac
                for p in np.unique(pair):
                    sel = pair == p
                    dist = mdp.rewards[p // A][p % A]
                    k = np.searchsorted(dist._cum_weights, rng.random(int(sel.sum())), side="right")
                    r[sel] = dist.atoms[np.minimum(k, dist.size - 1)]
                ret[idx] += disc * r
                disc *= mdp.gamma
                nxt = _sample_rows(rng, cumT[st, ac])
                state[idx] = nxt
                action[idx] = _sample_rows(rng, cumPi[nxt])
                alive[idx] = ~mdp.terminal[nxt]
            else:
                if mdp.gamma >= 1.0 and np.any(alive):
                    raise ValueError("rollouts did not terminate within the horizon")
            row.append(EmpiricalDistribution.from_samples(ret))
        out.append(row)
    return ReturnTable(out)
