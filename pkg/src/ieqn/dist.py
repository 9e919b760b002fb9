"""Finite-support real distributions.

Everything downstream (losses, projections, Bellman backups, agent
diagnostics) is checked against the exact statistics computed here.

Conventions:
    * quantile(d, a) is the left-continuous generalized inverse
      ``inf{z : F(z) >= a}``, so it always returns one of the atoms.
    * expectile(d, t) is the root of the first-order condition of the
      asymmetric squared loss, found by bisection and then polished with
      the closed-form weighted-mean solution on the bracketing segment.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

WEIGHT_SUM_TOL = 1e-12
EXPECTILE_TOL = 1e-10
EXPECTILE_MAX_ITER = 200
# slack when comparing cumulative weights to a fraction; absorbs cumsum rounding
_CDF_SLACK = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator (numpy's default bit generator, 64-bit state).

    PCG64 streams are fixed by numpy's compatibility policy, so identical
    seeds reproduce identical draws across platforms.
    """
    return np.random.Generator(np.random.PCG64(seed))


def _check_fraction(x: float | np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all((arr > 0.0) & (arr < 1.0)):
        raise ValueError(f"{name} must lie in the open interval (0, 1), got {x!r}")
    return arr


@dataclass(frozen=True, eq=False)
class EmpiricalDistribution:
    """Weighted, ascending atoms. Immutable once built.

    Duplicate atoms are allowed; they are handled through cumulative weight.
    """

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=float).reshape(-1)
        weights = np.array(self.weights, dtype=float).reshape(-1)
        if atoms.size == 0:
            raise ValueError("distribution needs at least one atom")
        if atoms.shape != weights.shape:
            raise ValueError("atoms and weights must have the same length")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite")
        if np.any(np.diff(atoms) < 0):
            raise ValueError("atoms must be sorted ascending")
        if not np.all(weights > 0):
            raise ValueError("weights must be strictly positive")
        if abs(weights.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"weights sum to {weights.sum()!r}, not 1")
        atoms.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    # -- constructors -----------------------------------------------------

    @classmethod
    def from_samples(cls, samples: Iterable[float]) -> "EmpiricalDistribution":
        """Equal-weight distribution over (unsorted) samples."""
        if not isinstance(samples, np.ndarray):
            samples = list(samples)
        z = np.sort(np.asarray(samples, dtype=float).reshape(-1))
        if z.size == 0:
            raise ValueError("need at least one sample")
        return cls(z, np.full(z.size, 1.0 / z.size))

    @classmethod
    def from_weighted(cls, atoms, weights, merge: bool = False) -> "EmpiricalDistribution":
        """Sort arbitrary (atom, weight) pairs, drop zero weights, renormalize."""
        a = np.asarray(atoms, dtype=float).reshape(-1)
        w = np.asarray(weights, dtype=float).reshape(-1)
        if a.shape != w.shape:
            raise ValueError("atoms and weights must have the same length")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        keep = w > 0
        a, w = a[keep], w[keep]
        if a.size == 0:
            raise ValueError("no atom carries positive weight")
        order = np.argsort(a, kind="stable")
        a, w = a[order], w[order]
        if merge:
            a, inv = np.unique(a, return_inverse=True)
            w = np.bincount(inv, weights=w)
        return cls(a, w / w.sum())

    @classmethod
    def dirac(cls, c: float) -> "EmpiricalDistribution":
        return cls(np.array([float(c)]), np.array([1.0]))

    @classmethod
    def uniform(cls, atoms: Sequence[float]) -> "EmpiricalDistribution":
        return cls.from_samples(atoms)

    # -- cached summaries -------------------------------------------------

    @cached_property
    def _cum_weights(self) -> np.ndarray:
        c = np.cumsum(self.weights)
        c[-1] = 1.0
        return c

    @cached_property
    def _cum_moments(self) -> np.ndarray:
        # prefix sums of w*z with a leading zero, so index i covers atoms[:i]
        return np.concatenate(([0.0], np.cumsum(self.weights * self.atoms)))

    @cached_property
    def _cum_weights0(self) -> np.ndarray:
        return np.concatenate(([0.0], self._cum_weights))

    @property
    def size(self) -> int:
        return int(self.atoms.size)

    @property
    def min(self) -> float:
        return float(self.atoms[0])

    @property
    def max(self) -> float:
        return float(self.atoms[-1])

    @cached_property
    def mean(self) -> float:
        return float(self._cum_moments[-1])

    @property
    def is_degenerate(self) -> bool:
        return self.atoms[0] == self.atoms[-1]

    def __len__(self) -> int:
        return self.size

    def __repr__(self) -> str:
        return (f"EmpiricalDistribution(n={self.size}, min={self.min:.6g}, "
                f"mean={self.mean:.6g}, max={self.max:.6g})")

    def equals(self, other: "EmpiricalDistribution") -> bool:
        return (self.atoms.shape == other.atoms.shape
                and np.array_equal(self.atoms, other.atoms)
                and np.array_equal(self.weights, other.weights))

    # -- serialization ----------------------------------------------------

    def to_csv(self, path: str | Path | None = None) -> str:
        """``atom,weight`` CSV with 17 significant digits (round-trips exactly)."""
        buf = io.StringIO()
        buf.write("atom,weight\n")
        for a, w in zip(self.atoms, self.weights):
            buf.write(f"{a:.17g},{w:.17g}\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path) -> "EmpiricalDistribution":
        return cls.parse_csv(Path(path).read_text())

    @classmethod
    def parse_csv(cls, text: str) -> "EmpiricalDistribution":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows or set(rows[0]) != {"atom", "weight"}:
            raise ValueError("expected CSV header 'atom,weight'")
        atoms = [float(r["atom"]) for r in rows]
        weights = [float(r["weight"]) for r in rows]
        return cls(np.array(atoms), np.array(weights))


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Sampling recipe: list of ``(mean, std, weight)`` components."""

    components: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        comps = tuple((float(m), float(s), float(w)) for m, s, w in self.components)
        if not comps:
            raise ValueError("mixture needs at least one component")
        for m, s, w in comps:
            if not (math.isfinite(m) and s > 0 and math.isfinite(s)):
                raise ValueError(f"component std must be positive and finite, got {s}")
            if not w > 0:
                raise ValueError(f"component weight must be positive, got {w}")
        total = sum(w for _, _, w in comps)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"component weights sum to {total}, not 1")
        object.__setattr__(self, "components", comps)

    @classmethod
    def bimodal(cls, loc: float = 2.0, std: float = 1.0) -> "GaussianMixtureSpec":
        """Equal mixture of N(-loc, std^2) and N(+loc, std^2)."""
        return cls(((-loc, std, 0.5), (loc, std, 0.5)))

    @property
    def mean(self) -> float:
        return sum(m * w for m, _, w in self.components)


def sample_mixture(spec: GaussianMixtureSpec, n: int, seed: int) -> EmpiricalDistribution:
    """Draw ``n`` equal-weight atoms from a Gaussian mixture with a PCG64 stream."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = make_rng(seed)
    means = np.array([c[0] for c in spec.components])
    stds = np.array([c[1] for c in spec.components])
    probs = np.array([c[2] for c in spec.components])
    comp = rng.choice(len(probs), size=n, p=probs / probs.sum())
    z = rng.standard_normal(n) * stds[comp] + means[comp]
    return EmpiricalDistribution.from_samples(z)


@dataclass(frozen=True)
class FractionGrid:
    """Mid-point fractions ``(2k - 1) / (2K)`` for ``k = 1..K``."""

    K: int
    levels: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K!r}")
        object.__setattr__(self, "K", int(self.K))
        lv = (2.0 * np.arange(1, self.K + 1) - 1.0) / (2.0 * self.K)
        lv.flags.writeable = False
        object.__setattr__(self, "levels", lv)

    def level(self, k: int) -> float:
        """1-based access, matching the usual tau_k indexing."""
        if not 1 <= k <= self.K:
            raise IndexError(f"level index {k} outside 1..{self.K}")
        return float(self.levels[k - 1])

    def __len__(self) -> int:
        return self.K


# ---------------------------------------------------------------------------
# statistics


def cdf(d: EmpiricalDistribution, z):
    """Right-continuous CDF; accepts scalars or arrays."""
    idx = np.searchsorted(d.atoms, np.asarray(z, dtype=float), side="right")
    out = d._cum_weights0[idx]
    return float(out) if np.ndim(out) == 0 else out


def quantile(d: EmpiricalDistribution, alpha):
    alpha = _check_fraction(alpha, "alpha")
    cw = d._cum_weights
    idx = np.searchsorted(cw, alpha - _CDF_SLACK, side="left")
    idx = np.minimum(idx, d.size - 1)
    out = d.atoms[idx]
    return float(out) if np.ndim(out) == 0 else out


def _expectile_foc(d: EmpiricalDistribution, e: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """tau*E[(Z-e)+] - (1-tau)*E[(e-Z)+], strictly decreasing in e."""
    i = np.searchsorted(d.atoms, e, side="right")
    lw = d._cum_weights0[i]
    lm = d._cum_moments[i]
    below = e * lw - lm
    above = (d._cum_moments[-1] - lm) - e * (1.0 - lw)
    return tau * above - (1.0 - tau) * below


def _expectile_on_segment(d: EmpiricalDistribution, e: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Closed-form root assuming the atom partition at ``e`` is the right one."""
    i = np.searchsorted(d.atoms, e, side="right")
    lw = d._cum_weights0[i]
    lm = d._cum_moments[i]
    num = tau * (d._cum_moments[-1] - lm) + (1.0 - tau) * lm
    den = tau * (1.0 - lw) + (1.0 - tau) * lw
    return num / den


def expectile(d: EmpiricalDistribution, tau):
    """Expectile(s) of ``d``; vectorized over ``tau``."""
    tau = _check_fraction(tau, "tau")
    scalar = tau.ndim == 0
    t = np.atleast_1d(tau).astype(float)
    if d.is_degenerate:
        out = np.full(t.shape, d.min)
        return float(out[0]) if scalar else out
    lo = np.full(t.shape, d.min)
    hi = np.full(t.shape, d.max)
    tol = max(EXPECTILE_TOL, 8 * np.finfo(float).eps * max(abs(d.min), abs(d.max)))
    for _ in range(EXPECTILE_MAX_ITER):
        if np.max(hi - lo) <= tol:
            break
        mid = 0.5 * (lo + hi)
        up = _expectile_foc(d, mid, t) > 0
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
    else:
        raise RuntimeError("expectile bisection did not converge")
    mid = 0.5 * (lo + hi)
    polished = _expectile_on_segment(d, mid, t)
    ok = np.isfinite(polished) & (polished >= lo - tol) & (polished <= hi + tol)
    out = np.clip(np.where(ok, polished, mid), d.min, d.max)
    return float(out[0]) if scalar else out


def expectile_inverse(d: EmpiricalDistribution, value):
    """Fraction ``tau`` whose expectile equals ``value``.

    Solved in closed form: at a fixed ``e`` the first-order condition is
    linear in ``tau``, giving ``tau = B / (A + B)`` with ``A = E[(Z-e)+]``
    and ``B = E[(e-Z)+]``. Endpoints of the support map to 0 and 1; a
    degenerate distribution maps everything to 0.5.
    """
    v = np.asarray(value, dtype=float)
    scalar = v.ndim == 0
    v = np.atleast_1d(v)
    if np.any(v < d.min) or np.any(v > d.max) or not np.all(np.isfinite(v)):
        raise ValueError(f"value outside the support hull [{d.min}, {d.max}]")
    if d.is_degenerate:
        out = np.full(v.shape, 0.5)
    else:
        i = np.searchsorted(d.atoms, v, side="right")
        lw = d._cum_weights0[i]
        lm = d._cum_moments[i]
        below = np.maximum(v * lw - lm, 0.0)
        above = np.maximum((d._cum_moments[-1] - lm) - v * (1.0 - lw), 0.0)
        out = below / (above + below)
        out = np.where(v <= d.min, 0.0, np.where(v >= d.max, 1.0, out))
        out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if scalar else out


def wasserstein1(d1: EmpiricalDistribution, d2: EmpiricalDistribution) -> float:
    """Exact W1 as the integral of |F1 - F2| over the merged atom partition."""
    pts = np.union1d(d1.atoms, d2.atoms)
    if pts.size < 2:
        return 0.0
    f1 = d1._cum_weights0[np.searchsorted(d1.atoms, pts[:-1], side="right")]
    f2 = d2._cum_weights0[np.searchsorted(d2.atoms, pts[:-1], side="right")]
    return float(np.sum(np.abs(f1 - f2) * np.diff(pts)))
