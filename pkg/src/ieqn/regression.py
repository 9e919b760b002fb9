"""Asymmetric losses and stochastic fitting of quantile/expectile vectors."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .dist import EmpiricalDistribution, FractionGrid, expectile, make_rng, quantile

Kind = Literal["quantile", "expectile"]


class DivergenceError(ArithmeticError):
    """Raised when an iterate stops being finite."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class StatisticVector:
    grid: FractionGrid
    values: np.ndarray
    kind: Kind

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size != self.grid.K:
            raise ValueError(f"expected {self.grid.K} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("statistic values must be finite")
        if self.kind not in ("quantile", "expectile"):
            raise ValueError(f"unknown statistic kind {self.kind!r}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def at(self, fraction: float) -> float:
        """Linear interpolation between levels, flat beyond the end levels."""
        return float(np.interp(fraction, self.grid.levels, self.values))


@dataclass(frozen=True)
class FitConfig:
    learning_rate: float = 1e-4
    steps: int = 1000
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass(frozen=True)
class LossKind:
    name: Literal["L1", "L2", "Huber"]
    kappa: float = 1.0

    def __post_init__(self):
        if self.name not in ("L1", "L2", "Huber"):
            raise ValueError(f"unknown loss {self.name!r}")
        if self.name == "Huber" and not self.kappa > 0:
            raise ValueError("Huber kappa must be positive")

    @property
    def statistic(self) -> Kind:
        return "expectile" if self.name == "L2" else "quantile"

    @classmethod
    def parse(cls, text: str) -> "LossKind":
        """``"L1"``, ``"L2"``, ``"Huber"`` or ``"Huber(0.5)"``."""
        t = text.strip()
        if t.upper() in ("L1", "L2"):
            return cls(t.upper())
        if t.lower().startswith("huber"):
            rest = t[5:].strip()
            if not rest:
                return cls("Huber")
            if rest.startswith("(") and rest.endswith(")"):
                return cls("Huber", float(rest[1:-1]))
        raise ValueError(f"cannot parse loss kind {text!r}")


L1 = LossKind("L1")
L2 = LossKind("L2")


def huber(kappa: float = 1.0) -> LossKind:
    return LossKind("Huber", kappa)


# ---------------------------------------------------------------------------
# pointwise losses; all broadcast over numpy inputs


def _asym_weight(pred, z, frac):
    # z <= pred takes the (1 - frac) branch, including the tie
    return np.where(z > pred, frac, 1.0 - frac)


def quantile_loss(q, z, alpha):
    """Asymmetric absolute loss."""
    q, z = np.asarray(q, dtype=float), np.asarray(z, dtype=float)
    out = _asym_weight(q, z, alpha) * np.abs(z - q)
    return float(out) if out.ndim == 0 else out


def quantile_loss_grad(q, z, alpha):
    """Subgradient in ``q``: ``-alpha`` above, ``1 - alpha`` at or below."""
    return np.where(np.asarray(z) > np.asarray(q), -np.asarray(alpha, dtype=float),
                    1.0 - np.asarray(alpha, dtype=float))


def expectile_loss(e, z, tau):
    """Asymmetric squared loss."""
    e, z = np.asarray(e, dtype=float), np.asarray(z, dtype=float)
    out = _asym_weight(e, z, tau) * (z - e) ** 2
    return float(out) if out.ndim == 0 else out


def expectile_loss_grad(e, z, tau):
    e, z = np.asarray(e, dtype=float), np.asarray(z, dtype=float)
    return -2.0 * _asym_weight(e, z, tau) * (z - e)


def _huber(u, kappa):
    a = np.abs(u)
    return np.where(a <= kappa, 0.5 * u * u, kappa * (a - 0.5 * kappa))


def huber_quantile_loss(q, z, alpha, kappa: float = 1.0):
    """Quantile-Huber loss ``|alpha - 1{z<q}| * H_kappa(z - q) / kappa``."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    q, z = np.asarray(q, dtype=float), np.asarray(z, dtype=float)
    u = z - q
    out = np.abs(alpha - (u < 0)) * _huber(u, kappa) / kappa
    return float(out) if out.ndim == 0 else out


def huber_quantile_loss_grad(q, z, alpha, kappa: float = 1.0):
    q, z = np.asarray(q, dtype=float), np.asarray(z, dtype=float)
    u = z - q
    dh = np.clip(u, -kappa, kappa)  # dH/du
    return -np.abs(alpha - (u < 0)) * dh / kappa


def loss_and_grad(kind: LossKind, pred, z, frac):
    """Elementwise loss and its derivative in ``pred`` for the chosen kind."""
    if kind.name == "L1":
        return quantile_loss(pred, z, frac), quantile_loss_grad(pred, z, frac)
    if kind.name == "L2":
        return expectile_loss(pred, z, frac), expectile_loss_grad(pred, z, frac)
    return (huber_quantile_loss(pred, z, frac, kind.kappa),
            huber_quantile_loss_grad(pred, z, frac, kind.kappa))


# ---------------------------------------------------------------------------
# stochastic fitting


@dataclass(frozen=True)
class FitResult:
    stats: StatisticVector
    mae: np.ndarray  # mae[t] after step t + 1

    def steps_to_reach(self, threshold: float) -> int | None:
        """First 1-based step whose MAE is at or below ``threshold``."""
        hit = np.flatnonzero(self.mae <= threshold)
        return int(hit[0]) + 1 if hit.size else None

    def trace_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        buf.write("step,mae\n")
        for t, m in enumerate(self.mae, start=1):
            buf.write(f"{t},{m:.17g}\n")
        if path is not None:
            Path(path).write_text(buf.getvalue())
        return buf.getvalue()


def _sgd(samples: EmpiricalDistribution, fractions: np.ndarray, kind: LossKind,
         cfg: FitConfig, oracle: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rng = make_rng(cfg.seed)
    cum = samples._cum_weights
    values = np.zeros(fractions.size)
    mae = np.empty(cfg.steps)
    frac = fractions[:, None]
    for t in range(cfg.steps):
        idx = np.minimum(np.searchsorted(cum, rng.random(cfg.batch_size), side="right"),
                         samples.size - 1)
        z = samples.atoms[idx][None, :]
        _, g = loss_and_grad(kind, values[:, None], z, frac)
        values = values - cfg.learning_rate * g.mean(axis=1)
        if not np.all(np.isfinite(values)):
            raise DivergenceError("statistic fit diverged", step=t + 1)
        mae[t] = np.mean(np.abs(values - oracle))
    return values, mae


def fit_statistics(samples: EmpiricalDistribution, grid: FractionGrid, loss_kind: LossKind,
                   cfg: FitConfig = FitConfig()) -> FitResult:
    """Minibatch SGD on the summed per-level loss, starting from zero.

    The MAE trace is measured against the exact statistic of ``samples``:
    quantiles for L1/Huber, expectiles for L2.
    """
    if samples.size == 0:
        raise ValueError("samples must be non-empty")
    levels = grid.levels
    if loss_kind.statistic == "expectile":
        oracle = np.atleast_1d(expectile(samples, levels))
    else:
        oracle = np.atleast_1d(quantile(samples, levels))
    values, mae = _sgd(samples, levels, loss_kind, cfg, oracle)
    return FitResult(StatisticVector(grid, values, loss_kind.statistic), mae)


def fit_mapped_quantiles(samples: EmpiricalDistribution, grid: FractionGrid,
                         cfg: FitConfig = FitConfig()) -> FitResult:
    """Quantile readout through expectile regression and the exact mapper.

    Expectiles are fitted at the fractions ``E^{-1}(F^{-1}(tau_k))``; those
    expectiles coincide with the quantiles at ``tau_k``, so the trace is
    the quantile MAE.
    """
    from .projection import exact_mapper

    mapped = exact_mapper(samples, grid).mapped
    oracle = np.atleast_1d(quantile(samples, grid.levels))
    values, mae = _sgd(samples, mapped, L2, cfg, oracle)
    return FitResult(StatisticVector(grid, values, "quantile"), mae)

