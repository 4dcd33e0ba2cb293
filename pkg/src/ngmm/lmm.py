"""Between/within-event variance components of the primary aleatory variability.

Each event (rupture variation) contributes values ``x = b * 1 + w`` with
``b ~ N(0, tau2)`` and ``w ~ N(0, phi2 I)``. The covariance
``tau2 * 11^T + phi2 * I`` has one eigenvalue ``phi2 + n tau2`` along ``1``
and ``n - 1`` eigenvalues ``phi2``, so the exact Gaussian log-density only
needs the per-event count, sum and within-event sum of squares.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

LOG2PI = np.log(2.0 * np.pi)
VAR_FLOOR = 1e-8


class LMMError(ValueError):
    pass


@dataclass(frozen=True)
class EventSummary:
    variation_id: object
    n_e: int
    mu_e: float  # sum of the event's values
    s2_e: float  # sum of squares about the event mean


@dataclass(frozen=True)
class VarianceComponents:
    tau_ddot2: float
    phi_ddot2: float
    tau_dot2: float = 0.0
    phi_dot2: float = 0.0

    def __post_init__(self):
        for name in ("tau_ddot2", "phi_ddot2", "tau_dot2", "phi_dot2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise LMMError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class FitReport:
    converged: bool
    iterations: int
    grad_norm: float
    loglik: float
    message: str = ""
    extra: dict = field(default_factory=dict)


@dataclass
class SummaryArrays:
    """Column form of a list of ``EventSummary``."""

    ids: np.ndarray
    n: np.ndarray
    mu: np.ndarray
    s2: np.ndarray

    def __len__(self) -> int:
        return len(self.n)

    def to_list(self) -> list[EventSummary]:
        return [EventSummary(i, int(n), float(m), float(s)) for i, n, m, s in zip(self.ids, self.n, self.mu, self.s2)]


def summarize_events(event, values) -> SummaryArrays:
    """Per-event count, sum and within-event sum of squares.

    ``event`` labels each value with its variation. Sums are accumulated in
    one pass over the values (plus one for the centred squares, which are
    computed from per-event means to avoid cancellation).
    """
    event = np.asarray(event)
    values = np.asarray(values, dtype=float)
    if event.shape != values.shape:
        raise LMMError("event labels and values must have the same shape")
    ids, inv = np.unique(event, return_inverse=True)
    n = np.bincount(inv, minlength=len(ids))
    mu = np.bincount(inv, weights=values, minlength=len(ids))
    mean = mu / np.maximum(n, 1)
    dev = values - mean[inv]
    s2 = np.bincount(inv, weights=dev * dev, minlength=len(ids))
    s2[n == 1] = 0.0
    return SummaryArrays(ids, n.astype(np.int64), mu, s2)


def as_arrays(summaries) -> SummaryArrays:
    if isinstance(summaries, SummaryArrays):
        return summaries
    summaries = list(summaries)
    return SummaryArrays(
        np.array([s.variation_id for s in summaries], dtype=object),
        np.array([s.n_e for s in summaries], dtype=np.int64),
        np.array([s.mu_e for s in summaries], dtype=float),
        np.array([s.s2_e for s in summaries], dtype=float),
    )


def loglik(summaries, tau2: float, phi2: float) -> float:
    """Exact Gaussian log-likelihood, including the ``-N/2 log(2 pi)`` constant."""
    if not phi2 > 0:
        raise LMMError(f"phi2 must be positive, got {phi2}")
    if tau2 < 0:
        raise LMMError(f"tau2 must be non-negative, got {tau2}")
    s = as_arrays(summaries)
    n = s.n.astype(float)
    lam1 = phi2 + n * tau2
    terms = np.log(lam1) + (n - 1.0) * np.log(phi2) + s.mu**2 / (n * lam1) + s.s2 / phi2
    return float(-0.5 * (terms.sum() + n.sum() * LOG2PI))


def _negll_and_grad(theta, n, mu2, s2, N):
    tau2, phi2 = np.exp(theta)
    lam1 = phi2 + n * tau2
    q = mu2 / (n * lam1)
    f = 0.5 * (np.log(lam1).sum() + ((n - 1.0) * np.log(phi2)).sum() + q.sum() + s2.sum() / phi2 + N * LOG2PI)
    # d/dtau2 and d/dphi2 of the negative log-likelihood, then chain rule to log space
    d_lam1 = 0.5 * (1.0 / lam1 - q / lam1)
    g_tau = (d_lam1 * n).sum()
    g_phi = d_lam1.sum() + 0.5 * ((n - 1.0).sum() / phi2 - s2.sum() / phi2**2)
    return f, np.array([g_tau * tau2, g_phi * phi2])


def fit_mle(summaries, init=(0.05, 0.05), bounds=(VAR_FLOOR, 10.0)) -> tuple[VarianceComponents, FitReport]:
    """Maximum-likelihood ``(tau_ddot2, phi_ddot2)`` by bounded L-BFGS-B in log space."""
    s = as_arrays(summaries)
    if len(s) < 2:
        raise LMMError("need at least two events")
    if not np.any(s.n >= 2):
        raise LMMError("all events are singletons: between- and within-event variances are not separable")
    n = s.n.astype(float)
    # sort so the objective is a fixed summation order regardless of input order
    order = np.lexsort((s.s2, s.mu, n))
    n, mu2, s2 = n[order], s.mu[order] ** 2, s.s2[order]
    lo, hi = np.log(bounds[0]), np.log(bounds[1])
    x0 = np.clip(np.log(np.asarray(init, dtype=float)), lo, hi)
    res = minimize(
        _negll_and_grad, x0, args=(n, mu2, s2, n.sum()), jac=True, method="L-BFGS-B",
        bounds=[(lo, hi), (lo, hi)], options={"maxiter": 500, "ftol": 1e-15, "gtol": 1e-10},
    )
    tau2, phi2 = np.exp(res.x)
    g = res.jac
    # a coordinate pinned at a bound is converged when its gradient pushes outward
    free = ~(((res.x <= lo + 1e-9) & (g > 0)) | ((res.x >= hi - 1e-9) & (g < 0)))
    gnorm = float(np.linalg.norm(g[free])) if free.any() else 0.0
    report = FitReport(
        converged=bool(res.success), iterations=int(res.nit), grad_norm=gnorm,
        loglik=float(-res.fun), message=str(res.message),
    )
    return VarianceComponents(float(tau2), float(phi2)), report


def shrinkage(n_e, tau2: float, phi2: float):
    """Fraction of the event mean attributed to the between-event term."""
    n_e = np.asarray(n_e, dtype=float)
    return n_e * tau2 / (phi2 + n_e * tau2)


def condition_random_effects(summaries, components: VarianceComponents) -> dict:
    """Posterior mean of each observed event's between-event term.

    Blockwise closed form ``tau2 * sum / (phi2 + n tau2)``; events not in
    ``summaries`` have mean zero (use ``dict.get(e, 0.0)``).
    """
    s = as_arrays(summaries)
    tau2, phi2 = components.tau_ddot2, components.phi_ddot2
    denom = phi2 + s.n * tau2
    b = np.where(denom > 0, tau2 * s.mu / np.where(denom > 0, denom, 1.0), 0.0)
    return {k: float(v) for k, v in zip(s.ids.tolist(), b)}


def conditional_between_var(n_e, components: VarianceComponents):
    """Remaining between-event variance after observing ``n_e`` records of the event."""
    tau2, phi2 = components.tau_ddot2, components.phi_ddot2
    return tau2 * (1.0 - shrinkage(n_e, tau2, phi2)) if tau2 > 0 else np.zeros_like(np.asarray(n_e, float))
