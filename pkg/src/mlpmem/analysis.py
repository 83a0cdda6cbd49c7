"""Power-law scaling fits and output-distribution sparsity statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_THRESHOLDS = (0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
DEFAULT_MASS_LEVELS = (0.8, 0.9, 0.95, 0.99)


@dataclass
class PowerLawFit:
    """``PPL = (beta * x) ** gamma`` fitted by least squares on log-log axes."""

    beta: float
    gamma: float
    r_squared: float
    points: list[tuple[float, float]] = field(default_factory=list)

    def predict(self, x: float | np.ndarray) -> float | np.ndarray:
        return (self.beta * np.asarray(x, dtype=np.float64)) ** self.gamma


def fit_power_law(points: Sequence[tuple[float, float]]) -> PowerLawFit:
    if len(points) < 2:
        raise ValueError("need at least two points to fit a power law")
    x = np.array([p[0] for p in points], dtype=np.float64)
    y = np.array([p[1] for p in points], dtype=np.float64)
    if (x <= 0).any() or (y <= 0).any():
        raise ValueError("power-law points must be strictly positive")
    lx, ly = np.log(x), np.log(y)
    if np.ptp(lx) == 0:
        raise ValueError("x values must not all be equal")
    # ln PPL = gamma * ln x + gamma * ln beta
    mx, my = lx.mean(), ly.mean()
    gamma = float(((lx - mx) * (ly - my)).sum() / ((lx - mx) ** 2).sum())
    intercept = my - gamma * mx
    if gamma == 0.0:
        raise ValueError("flat data: exponent is zero and beta is undefined")
    beta = math.exp(intercept / gamma)
    resid = ly - (gamma * lx + intercept)
    ss_tot = float(((ly - my) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return PowerLawFit(beta, gamma, r2, [(float(a), float(b)) for a, b in zip(x, y)])


def exponent_improvement(gamma_base: float, gamma_new: float) -> float:
    """Relative steepening ``|gamma_new / gamma_base| - 1`` of two same-sign exponents."""
    if gamma_base == 0 or gamma_new == 0 or (gamma_base > 0) != (gamma_new > 0):
        raise ValueError("exponents must be non-zero and share a sign")
    return abs(gamma_new / gamma_base) - 1.0


@dataclass
class DistributionStats:
    nonzero_counts: dict[float, float]
    cumulative_counts: dict[float, float]
    sample_count: int

    def rows(self, label: str) -> tuple[dict, dict]:
        a = {"type": label, **{f">{t:g}": v for t, v in self.nonzero_counts.items()}}
        b = {"type": label, **{f"sum>{m:g}": v for m, v in self.cumulative_counts.items()}}
        return a, b


def _as_dense(dist, vocab_size: int | None) -> np.ndarray:
    if hasattr(dist, "to_dense"):
        return dist.to_dense()
    arr = np.asarray(dist, dtype=np.float64)
    if vocab_size is not None and arr.shape[-1] != vocab_size:
        raise ValueError("distribution width does not match vocab_size")
    return arr


def distribution_stats(
    distributions: Iterable,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    mass_levels: Sequence[float] = DEFAULT_MASS_LEVELS,
    vocab_size: int | None = None,
) -> DistributionStats:
    """Mean count of tokens above each threshold and mean top-token count reaching each mass level.

    ``distributions`` yields dense probability vectors or objects with
    ``to_dense()``. A mass level counts as reached once the cumulative sum is
    within 1e-12 of it.
    """
    thresholds = sorted(thresholds)
    mass_levels = sorted(mass_levels)
    nz = np.zeros(len(thresholds))
    cum = np.zeros(len(mass_levels))
    n = 0
    for dist in distributions:
        p = _as_dense(dist, vocab_size)
        for i, t in enumerate(thresholds):
            nz[i] += np.count_nonzero(p > t)
        c = np.cumsum(np.sort(p)[::-1])
        for i, m in enumerate(mass_levels):
            cum[i] += min(int(np.searchsorted(c, m - 1e-12, side="left")) + 1, len(p))
        n += 1
    if n:
        nz /= n
        cum /= n
    return DistributionStats(dict(zip(thresholds, nz.tolist())), dict(zip(mass_levels, cum.tolist())), n)


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


SCALING_FIT_COLUMNS = ["system", "axis", "beta", "gamma", "r_squared", "points", "improvement_vs_lm"]


def fit_scaling_table(rows: Sequence[dict], axes: Sequence[str] = ("params", "compute")) -> list[dict]:
    """Fit ``ppl`` against each axis separately for every ``system`` in ``rows``.

    ``improvement_vs_lm`` is the exponent steepening over the ``lm`` system on
    the same axis, empty when there is no ``lm`` fit or the signs differ.
    """
    systems: dict[str, list[dict]] = {}
    for r in rows:
        systems.setdefault(str(r["system"]), []).append(r)
    out = []
    for axis in axes:
        fits = {}
        for name, rs in systems.items():
            pts = [(float(r[axis]), float(r["ppl"])) for r in rs if str(r.get(axis, "")).strip()]
            if len(pts) >= 2 and len({p[0] for p in pts}) >= 2:
                fits[name] = fit_power_law(pts)
        for name, fit in fits.items():
            imp: float | str = ""
            base = fits.get("lm")
            if base is not None and name != "lm":
                try:
                    imp = exponent_improvement(base.gamma, fit.gamma)
                except ValueError:
                    imp = ""
            out.append({"system": name, "axis": axis, "beta": fit.beta, "gamma": fit.gamma,
                        "r_squared": fit.r_squared, "points": len(fit.points), "improvement_vs_lm": imp})
    return out
