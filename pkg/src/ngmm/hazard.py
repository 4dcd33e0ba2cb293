"""Annual exceedance-rate curves and distances between them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.integrate import trapezoid

MONO_TOL = 1e-12


class HazardError(ValueError):
    pass


@dataclass(frozen=True)
class IntensityGrid:
    values: np.ndarray  # PSA in g, ascending

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if len(v) < 2 or np.any(v <= 0) or np.any(np.diff(v) <= 0) or not np.all(np.isfinite(v)):
            raise HazardError("intensity grid must be positive, finite and strictly increasing")
        object.__setattr__(self, "values", v)

    @classmethod
    def logspace(cls, lo: float = 1e-3, hi: float = 3.0, n: int = 40) -> "IntensityGrid":
        return cls(np.geomspace(lo, hi, n))

    @property
    def log_values(self) -> np.ndarray:
        return np.log(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        return isinstance(other, IntensityGrid) and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash(self.values.tobytes())


@dataclass
class HazardCurve:
    grid: IntensityGrid
    rates: np.ndarray  # 1/year
    estimator: str  # gmm | ngmm | ngmm_analytic | empirical
    realizations: np.ndarray | None = None  # (n_realizations, n_grid)

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=float)
        if self.rates.shape != (len(self.grid),):
            raise HazardError("rates must have one value per grid point")
        if np.any(self.rates < 0) or np.any(np.diff(self.rates) > MONO_TOL * max(1.0, self.rates[0])):
            raise HazardError(f"{self.estimator} curve is not a non-negative, non-increasing function")


def _grid(grid) -> IntensityGrid:
    if grid is None:
        return IntensityGrid.logspace()
    return grid if isinstance(grid, IntensityGrid) else IntensityGrid(grid)


def _rate_sum(rates, mu, sigma, logx) -> np.ndarray:
    """sum_i rate_i * P(ln PSA > ln x) for normal ln PSA; shape follows ``mu`` leading dims."""
    z = (logx - mu[..., None]) / sigma[..., None]
    return np.sum(rates[:, None] * ndtr(-z), axis=-2)


def _check_inputs(rates, *arrays):
    rates = np.asarray(rates, dtype=float)
    out = [np.broadcast_to(np.asarray(a, dtype=float), rates.shape) for a in arrays]
    if np.any(rates < 0):
        raise HazardError("scenario rates must be non-negative")
    return rates, out


def gmm_curve(scenario_rates, mu, sigma, grid=None) -> HazardCurve:
    """Ergodic curve: ``mu``/``sigma`` are the ln-PSA mean and standard deviation per scenario."""
    g = _grid(grid)
    rates, (mu, sigma) = _check_inputs(scenario_rates, mu, sigma)
    if np.any(sigma <= 0):
        raise HazardError("sigma must be positive")
    return HazardCurve(g, _rate_sum(rates, mu, sigma, g.log_values), "gmm")


def ngmm_analytic_curve(scenario_rates, mu, aleatory_var, epistemic_var, grid=None) -> HazardCurve:
    """Mean curve with the normally distributed median integrated out."""
    g = _grid(grid)
    rates, (mu, a, e) = _check_inputs(scenario_rates, mu, aleatory_var, epistemic_var)
    if np.any(a <= 0) or np.any(e < 0):
        raise HazardError("aleatory variance must be positive and epistemic variance non-negative")
    return HazardCurve(g, _rate_sum(rates, mu, np.sqrt(a + e), g.log_values), "ngmm_analytic")


def standard_normal_draws(n: int, m: int, rng, sampling: str = "lhs") -> np.ndarray:
    """``(n, m)`` standard-normal draws, columns independent.

    ``"lhs"`` stratifies each column into ``n`` equal-probability bins (one
    draw per bin, bins shuffled independently per column), so each row is
    still a valid joint draw while column means converge much faster.
    """
    if sampling == "iid":
        return rng.standard_normal((n, m))
    if sampling != "lhs":
        raise HazardError(f"unknown sampling {sampling!r}")
    u = (np.arange(n)[:, None] + rng.random((n, m))) / n
    u = np.take_along_axis(u, rng.random((n, m)).argsort(axis=0), axis=0)
    return ndtri(u)


def ngmm_curve(scenario_rates, mu, aleatory_var, epistemic_var, n_realizations: int = 1000, seed: int = 0,
               summary: str = "median", grid=None, chunk: int = 256, sampling: str = "lhs") -> HazardCurve:
    """Monte Carlo NGMM curve.

    Each realization draws one median per scenario from ``N(mu, epistemic_var)``
    (independently across scenarios) and evaluates the aleatory exceedance in
    closed form. ``summary`` reduces the realization bundle pointwise.
    """
    g = _grid(grid)
    if summary not in ("median", "mean"):
        raise HazardError(f"unknown summary {summary!r}")
    if n_realizations < 1 or (summary == "median" and n_realizations < 2):
        raise HazardError("median summary needs at least two realizations")
    rates, (mu, a, e) = _check_inputs(scenario_rates, mu, aleatory_var, epistemic_var)
    if np.any(a <= 0) or np.any(e < 0):
        raise HazardError("aleatory variance must be positive and epistemic variance non-negative")
    rng = np.random.default_rng(seed)
    z = standard_normal_draws(n_realizations, len(rates), rng, sampling)
    sig = np.sqrt(a)
    bundle = np.empty((n_realizations, len(g)))
    for i in range(0, n_realizations, chunk):
        mus = mu + np.sqrt(e) * z[i:i + chunk]
        bundle[i:i + chunk] = _rate_sum(rates, mus, np.broadcast_to(sig, mus.shape), g.log_values)
    rates_out = np.median(bundle, axis=0) if summary == "median" else bundle.mean(axis=0)
    return HazardCurve(g, rates_out, "ngmm", bundle)


def empirical_curve(scenario_rates, values, grid=None) -> HazardCurve:
    """Rate-weighted fraction of variations whose PSA exceeds each grid level.

    ``values[i]`` holds the PSA (g) of every variation of scenario ``i``.
    """
    g = _grid(grid)
    rates = np.asarray(scenario_rates, dtype=float)
    if len(values) != len(rates):
        raise HazardError("need one value array per scenario")
    out = np.zeros(len(g))
    for lam, v in zip(rates, values):
        v = np.sort(np.asarray(v, dtype=float))
        if len(v) == 0:
            raise HazardError("every scenario needs at least one variation value")
        # count of values strictly greater than x
        out += lam * (len(v) - np.searchsorted(v, g.values, side="right")) / len(v)
    return HazardCurve(g, out, "empirical")


def curve_distance(a: HazardCurve, b: HazardCurve, metric: str = "ks") -> float:
    if a.grid != b.grid:
        raise HazardError("curves must share a grid")
    d = np.abs(a.rates - b.rates)
    if metric == "ks":
        return float(d.max())
    if metric == "mae":
        lx = a.grid.log_values
        return float(trapezoid(d, lx) / (lx[-1] - lx[0]))
    raise HazardError(f"unknown metric {metric!r}")


def split_posterior(result, tau_ddot2: float | None = None):
    """Mean, aleatory and epistemic variances of a PosteriorResult for hazard use.

    Prediction mode treats all four residual variances as aleatory. In
    interpolation mode only the within-event terms stay aleatory; the
    remaining between-event uncertainty of the observed variation joins the
    kernel variance as epistemic.
    """
    al = result.aleatory
    if result.mode == "prediction":
        alea = al["tau_dot2"] + al["phi_dot2"] + al["tau_ddot2"] + al["phi_ddot2"]
        epi = result.kernel_var
    else:
        alea = al["phi_dot2"] + al["phi_ddot2"]
        epi = result.kernel_var + al["tau_ddot2"]
    return np.asarray(result.mean), np.asarray(alea), np.asarray(epi)
