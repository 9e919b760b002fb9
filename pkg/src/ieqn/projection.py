"""Quantile and dual expectile-quantile projections onto K equal-weight atoms."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from .dist import (
    EmpiricalDistribution,
    FractionGrid,
    expectile,
    expectile_inverse,
    quantile,
    wasserstein1,
)

FloorRule = Literal["snap", "lemma"]


def _grid(grid_or_k) -> FractionGrid:
    return grid_or_k if isinstance(grid_or_k, FractionGrid) else FractionGrid(grid_or_k)


def floor_k(grid: FractionGrid, x, rule: FloorRule = "snap"):
    """Snap fraction(s) in [0, 1] onto the grid levels.

    ``rule="snap"`` returns the level of the cell ``[(j-1)/K, j/K)`` that
    contains ``x``, i.e. ``tau_{floor(Kx)+1}``; it is the nearest level and
    is idempotent on the grid. ``rule="lemma"`` returns ``tau_{floor(Kx)}``
    literally. Both clamp the index into ``1..K``.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"fraction must lie in [0, 1], got {x!r}")
    K = grid.K
    # the 1e-9 guard keeps K * tau_j from landing a hair below an integer
    j = np.floor(K * arr + 1e-9).astype(np.int64)
    if rule == "snap":
        j = j + 1
    elif rule != "lemma":
        raise ValueError(f"unknown floor rule {rule!r}")
    j = np.clip(j, 1, K)
    out = (2.0 * j - 1.0) / (2.0 * K)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MapperTable:
    """Exact quantile-to-expectile fraction map sampled on a grid."""

    grid: FractionGrid
    mapped: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapped, dtype=float)
        if m.shape != (self.grid.K,):
            raise ValueError("mapped must hold one value per grid level")
        object.__setattr__(self, "mapped", m)


def exact_mapper(d: EmpiricalDistribution, grid) -> MapperTable:
    """``mapped_k = E^{-1}(F^{-1}(tau_k))`` computed from the distribution itself."""
    grid = _grid(grid)
    q = np.atleast_1d(quantile(d, grid.levels))
    mapped = np.atleast_1d(expectile_inverse(d, q))
    # both maps are monotone; accumulate to remove rounding-level wiggles
    return MapperTable(grid, np.maximum.accumulate(mapped))


def project_quantile(d: EmpiricalDistribution, K: int) -> EmpiricalDistribution:
    grid = FractionGrid(K)
    return EmpiricalDistribution.from_samples(np.atleast_1d(quantile(d, grid.levels)))


def dual_atoms(d: EmpiricalDistribution, K: int, rule: FloorRule = "snap") -> np.ndarray:
    """Atom locations of the dual projection, ascending in k."""
    grid = FractionGrid(K)
    if d.is_degenerate:
        return np.full(K, d.min)
    table = exact_mapper(d, grid)
    snapped = np.atleast_1d(floor_k(grid, table.mapped, rule=rule))
    return np.atleast_1d(expectile(d, snapped))


def project_dual(d: EmpiricalDistribution, K: int, rule: FloorRule = "snap") -> EmpiricalDistribution:
    """Expectiles of ``d`` at grid-snapped mapped fractions, K equal weights."""
    return EmpiricalDistribution.from_samples(dual_atoms(d, K, rule=rule))


@dataclass(frozen=True)
class ConvergenceRow:
    K: int
    w1_dual: float
    w1_quantile: float


def convergence_study(d: EmpiricalDistribution, K_list: Iterable[int],
                      rule: FloorRule = "snap") -> list[ConvergenceRow]:
    Ks = [int(k) for k in K_list]
    if any(k < 1 for k in Ks):
        raise ValueError("every K must be at least 1")
    return [ConvergenceRow(K,
                           wasserstein1(project_dual(d, K, rule=rule), d),
                           wasserstein1(project_quantile(d, K), d))
            for K in Ks]


def convergence_csv(rows: list[ConvergenceRow], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    buf.write("K,w1_dual,w1_quantile\n")
    for r in rows:
        buf.write(f"{r.K},{r.w1_dual:.17g},{r.w1_quantile:.17g}\n")
    if path is not None:
        Path(path).write_text(buf.getvalue())
    return buf.getvalue()


def nonexpansion_check(d1: EmpiricalDistribution, d2: EmpiricalDistribution, K: int,
                       rule: FloorRule = "snap") -> tuple[float, float]:
    """``(W1(P d1, P d2), W1(d1, d2))`` for the dual projection ``P``."""
    lhs = wasserstein1(project_dual(d1, K, rule=rule), project_dual(d2, K, rule=rule))
    return lhs, wasserstein1(d1, d2)
