"""Synthetic residual catalogs with known latent fields.

The latent site and path fields are drawn without any sparse approximation
so that they can serve as ground truth for everything downstream. Dense
Cholesky sampling is exact and capped in size; for larger path fields a
random-Fourier-feature sampler (conditionally Gaussian, with the Matérn
spectral density) is available by request.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky

from .config import HyperParams
from .domain import ResidualCatalog, RuptureScenario, Site
from .kernels import matern, pairwise_dist

DENSE_CAP = 5000


class SynthSizeError(ValueError):
    pass


@dataclass
class SynthSpec:
    n_sites: int = 50
    site_extent_km: float = 60.0
    n_scenarios: int = 50
    src_extent_km: float = 80.0
    variations: int | tuple[int, int] = 10
    magnitude_range: tuple[float, float] = (6.0, 7.5)
    rate_range: tuple[float, float] = (1e-5, 1e-3)
    params: HyperParams = field(default_factory=lambda: HyperParams.preset("ngmm1"))
    seed: int = 0
    sampler: str = "dense"  # dense | fourier | auto
    n_features: int = 4096
    backbone_sigma: float = 0.693
    dense_cap: int = DENSE_CAP

    def __post_init__(self):
        if self.n_sites < 1 or self.n_scenarios < 1:
            raise ValueError("site and scenario counts must be >= 1")
        lo, hi = self.variation_range
        if lo < 1 or hi < lo:
            raise ValueError("variations per scenario must be >= 1")
        if not (self.site_extent_km > 0 and self.src_extent_km > 0):
            raise ValueError("extents must be positive")
        if self.sampler not in ("dense", "fourier", "auto"):
            raise ValueError(f"unknown sampler {self.sampler!r}")

    @property
    def variation_range(self) -> tuple[int, int]:
        v = self.variations
        return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


@dataclass
class SynthTruth:
    site_term: np.ndarray  # (n_sites,)
    path_term: np.ndarray  # (n_scenarios, n_sites)
    between_dot: np.ndarray  # (n_scenarios,)
    within_dot: np.ndarray  # (n_scenarios, n_sites)
    between_ddot: np.ndarray  # (n_variations,)
    within_ddot: np.ndarray  # (n_records,) in catalog record order
    backbone_mu: np.ndarray  # (n_scenarios, n_sites)

    @property
    def ybar_latent(self) -> np.ndarray:
        """Scenario-level mean residual before primary aleatory scatter."""
        return self.site_term[None, :] + self.path_term + self.between_dot[:, None] + self.within_dot

    @property
    def nonergodic(self) -> np.ndarray:
        return self.site_term[None, :] + self.path_term


@dataclass
class SynthResult:
    catalog: ResidualCatalog
    truth: SynthTruth
    spec: SynthSpec


def sample_dense(coords: np.ndarray, var: float, length: float, nu: float, rng) -> np.ndarray:
    n = len(coords)
    if n == 0:
        return np.empty(0)
    if var == 0:
        return np.zeros(n)
    C = var * matern(pairwise_dist(coords, coords) / length, nu)
    C[np.diag_indices_from(C)] += 1e-10 * var
    return cholesky(C, lower=True) @ rng.standard_normal(n)


def matern_spectral_draws(n: int, dim: int, length: float, nu: float, rng) -> np.ndarray:
    """Angular frequencies from the Matérn spectral density (multivariate t, 2*nu dof)."""
    z = rng.standard_normal((n, dim))
    g = rng.chisquare(2.0 * nu, size=n)
    return z / length / np.sqrt(g / (2.0 * nu))[:, None]


def sample_fourier(coords: np.ndarray, var: float, length: float, nu: float, n_features: int, rng,
                   chunk: int = 4096) -> np.ndarray:
    """Random-Fourier-feature draw; given the frequencies the field is exactly Gaussian."""
    if var == 0:
        return np.zeros(len(coords))
    omega = matern_spectral_draws(n_features, coords.shape[1], length, nu, rng)
    w = rng.standard_normal((2, n_features))
    scale = np.sqrt(var / n_features)
    out = np.empty(len(coords))
    for i in range(0, len(coords), chunk):
        ph = coords[i:i + chunk] @ omega.T
        out[i:i + chunk] = scale * (np.cos(ph) @ w[0] + np.sin(ph) @ w[1])
    return out


def backbone_median(mag, dist_km):
    """Toy attenuation law for the synthetic backbone median of ln PSA(2 s) in g."""
    return -1.2 + 1.1 * (mag - 6.5) - 1.3 * np.log(np.sqrt(dist_km**2 + 36.0) / 10.0)


def generate(spec: SynthSpec) -> SynthResult:
    rng = np.random.default_rng(spec.seed)
    p = spec.params
    nu = p.matern_nu
    ns, nl = spec.n_sites, spec.n_scenarios

    site_xy = rng.uniform(0.0, spec.site_extent_km, (ns, 2))
    off = 0.5 * (spec.src_extent_km - spec.site_extent_km)
    src_xy = rng.uniform(-off, spec.site_extent_km + off, (nl, 2))
    mags = rng.uniform(*spec.magnitude_range, nl)
    lo_r, hi_r = np.log(spec.rate_range[0]), np.log(spec.rate_range[1])
    rates = np.exp(rng.uniform(lo_r, hi_r, nl))
    lo_v, hi_v = spec.variation_range
    n_var = rng.integers(lo_v, hi_v + 1, nl)

    n_path = ns * nl
    sampler = spec.sampler
    if sampler == "auto":
        sampler = "dense" if ns + n_path <= spec.dense_cap else "fourier"
    if ns > spec.dense_cap or (sampler == "dense" and ns + n_path > spec.dense_cap):
        raise SynthSizeError(
            f"{ns + n_path} latent points exceed the dense cap of {spec.dense_cap}; "
            "use sampler='fourier' for the path field"
        )

    site_term = sample_dense(site_xy, p.site_var, p.site_len, nu, rng)
    S, L = np.meshgrid(np.arange(ns), np.arange(nl))
    path_coords = np.hstack([site_xy[S.ravel()], src_xy[L.ravel()]])
    if sampler == "dense":
        path = sample_dense(path_coords, p.path_var, p.path_len, nu, rng)
    else:
        path = sample_fourier(path_coords, p.path_var, p.path_len, nu, spec.n_features, rng)
    path_term = path.reshape(nl, ns)

    between_dot = np.sqrt(p.tau_dot2) * rng.standard_normal(nl)
    within_dot = np.sqrt(p.phi_dot2) * rng.standard_normal((nl, ns))
    total_var = int(n_var.sum())
    var_scen = np.repeat(np.arange(nl), n_var)
    between_ddot = np.sqrt(p.tau_ddot2) * rng.standard_normal(total_var)

    dist = pairwise_dist(src_xy, site_xy)
    mu = backbone_median(mags[:, None], dist)

    rec_var = np.repeat(np.arange(total_var), ns)
    rec_site = np.tile(np.arange(ns), total_var)
    rec_scen = var_scen[rec_var]
    within_ddot = np.sqrt(p.phi_ddot2) * rng.standard_normal(len(rec_var))
    ybar = site_term[None, :] + path_term + between_dot[:, None] + within_dot
    y = ybar[rec_scen, rec_site] + between_ddot[rec_var] + within_ddot

    width = max(4, len(str(max(ns, nl))))
    sites = [Site(f"S{i:0{width}d}", float(x), float(yv)) for i, (x, yv) in enumerate(site_xy)]
    scenarios = [
        RuptureScenario(f"L{i:0{width}d}", float(mags[i]), float(rates[i]), float(src_xy[i, 0]), float(src_xy[i, 1]))
        for i in range(nl)
    ]
    vwidth = len(str(hi_v))
    var_ids = []
    for l in range(nl):
        var_ids += [f"{scenarios[l].scenario_id}-V{k:0{vwidth}d}" for k in range(n_var[l])]
    catalog = ResidualCatalog(
        sites, scenarios, np.array(var_ids), var_scen.astype(np.intp), rec_var.astype(np.intp),
        rec_site.astype(np.intp), y, mu[rec_scen, rec_site], np.full(len(y), spec.backbone_sigma),
    )
    # the catalog canonicalizes record order; generated records are already canonical
    assert np.array_equal(catalog.rec_variation, rec_var)
    truth = SynthTruth(site_term, path_term, between_dot, within_dot, between_ddot, within_ddot, mu)
    return SynthResult(catalog, truth, spec)
