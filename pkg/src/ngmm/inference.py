"""Posterior prediction in the two application modes plus grouped error metrics."""
from __future__ import annotations

import hashlib
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .config import HyperParams
from .domain import ResidualCatalog, ScenarioMeanTable, SplitAssignment, cell_deviations, collapse_to_means
from .kernels import (CovarianceOracle, PointSet, assemble_train_cov, kernel_matrix, matern, pairwise_dist,
                      prior_diag)
from .klsc import PosteriorMoments, SparseFactor, klsc_factor, solve_posterior
from .lmm import VarianceComponents, condition_random_effects, shrinkage, summarize_events

DENSE_COV_CAP = 5000
GROUPS = ("TrTr", "TrTe", "TeTr", "TeTe")


class StaleFactorError(RuntimeError):
    pass


@dataclass
class PosteriorResult:
    mean: np.ndarray
    std: np.ndarray
    mode: str  # prediction | interpolation
    kernel_var: np.ndarray  # epistemic part
    aleatory: dict = field(default_factory=dict)  # name -> per-point variance added on the diagonal
    scenario: np.ndarray | None = None  # codes; points sharing a code share the between-event draws
    n_clipped: int = 0
    covariance: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.std < 0):
            raise ValueError("standard deviations must be non-negative")

    @property
    def var(self) -> np.ndarray:
        return self.std**2

    def __len__(self) -> int:
        return len(self.mean)


@dataclass
class GroupMetrics:
    group: str
    n_records: int
    rmse_y: float  # vs individual records
    rmse_ybar: float  # vs scenario-level means
    mean_std: float
    rmse_backbone: float
    reduction: float  # 1 - rmse_y / rmse_backbone
    present: bool = True


def observation_fingerprint(points: PointSet, params: HyperParams, structure: str = "latent") -> str:
    h = hashlib.sha256(params.fingerprint().encode())
    h.update(structure.encode())
    for a in (points.site_xy, points.src_xy, np.asarray(points.scenario, dtype=np.int64)):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


class _PathOracle:
    """Covariance entries of the path kernel plus the diagonal noise and jitter."""

    def __init__(self, points: PointSet, params: HyperParams):
        self.coords = points.path_coords
        self.params = params

    def __call__(self, rows, cols):
        p = self.params
        d = pairwise_dist(self.coords[rows], self.coords[cols])
        K = p.path_var * matern(d / p.path_len, p.matern_nu)
        K += (p.phi_dot2 + p.kernel.jitter) * (np.asarray(rows)[:, None] == np.asarray(cols)[None, :])
        return K


def build_factor(obs_table: ScenarioMeanTable, params: HyperParams, rho: float = 2.0, workers: int = 1,
                 structure: str = "latent", min_neighbors: int = 30) -> SparseFactor:
    """KLSC factor for the observation covariance, ordered by the 4-D path coordinates.

    ``structure="plain"`` factors the full covariance. ``"latent"`` factors
    only the path kernel plus noise; the site kernel and the between-event
    block enter through an exact low-rank correction in :class:`ObservationSolver`.
    """
    if structure not in ("plain", "latent"):
        raise ValueError(f"unknown structure {structure!r}")
    pts = obs_table.points()
    if structure == "plain":
        oracle = CovarianceOracle(pts, params.kernel, params.tau_dot2, params.phi_dot2)
    else:
        oracle = _PathOracle(pts, params)
    factor = klsc_factor(pts.path_coords, oracle, rho=rho, workers=workers, min_neighbors=min_neighbors)
    factor.meta.update(rho=float(rho), structure=structure, min_neighbors=int(min_neighbors),
                       fingerprint=observation_fingerprint(pts, params, structure))
    return factor


class ObservationSolver:
    """Applies the (approximate) inverse observation covariance to cross-covariances.

    With ``B`` the factored part (``inv(B) = G^T G``, ``G = L^T P``) and the
    low-rank part ``W W^T`` (site field at observed sites and one term per
    scenario), Woodbury gives
    ``k^T inv(A) v = (Gk).(Gv) - (R^-1 (GW)^T Gk).(R^-1 (GW)^T Gv)`` with
    ``R R^T = I + (GW)^T GW``.
    """

    def __init__(self, obs_table: ScenarioMeanTable, params: HyperParams, factor: SparseFactor | None):
        self.params = params
        self.points = obs_table.points()
        self.y = np.asarray(obs_table.y_bar, dtype=float)
        self.factor = factor
        self.structure = "dense" if factor is None else factor.meta.get("structure", "plain")
        if factor is not None:
            fp = observation_fingerprint(self.points, params, self.structure)
            got = factor.meta.get("fingerprint", "")
            if got != fp:
                raise StaleFactorError(f"factor fingerprint {got!r} does not match parameters/observations {fp!r}")
        if self.structure == "dense":
            A = assemble_train_cov(self.points, params.kernel, params.tau_dot2, params.phi_dot2, check_psd=False)
            self._chol = cholesky(A, lower=True, check_finite=False)
            self._alpha = cho_solve((self._chol, True), self.y, check_finite=False)
            return
        self._L = factor.to_csc()
        self._perm = factor.perm
        self._gy = self._apply_g(self.y[:, None])[:, 0]
        self._gw = None
        if self.structure == "latent":
            W = self._latent_columns(obs_table)
            gw = self._apply_g(W)
            R = cholesky(np.eye(W.shape[1]) + gw.T @ gw, lower=True, check_finite=False)
            self._gw, self._R = gw, R
            self._wy = solve_triangular(R, gw.T @ self._gy, lower=True, check_finite=False)

    def _apply_g(self, X):
        return np.asarray(self._L.T @ X[self._perm])

    def _latent_columns(self, table):
        p = self.params
        cols = []
        usite, sinv = np.unique(table.site, return_inverse=True)
        if p.site_var > 0 and len(usite):
            xy = self.points.site_xy[_first_index(sinv, len(usite))]
            S = p.site_var * matern(pairwise_dist(xy, xy) / p.site_len, p.matern_nu)
            S[np.diag_indices_from(S)] += 1e-10 * p.site_var
            cs = cholesky(S, lower=True, check_finite=False)
            cols.append(cs[sinv])  # Z_site @ chol(S)
        if p.tau_dot2 > 0:
            uscen, cinv = np.unique(table.scenario, return_inverse=True)
            Z = np.zeros((len(cinv), len(uscen)))
            Z[np.arange(len(cinv)), cinv] = np.sqrt(p.tau_dot2)
            cols.append(Z)
        return np.hstack(cols) if cols else np.zeros((len(table), 0))

    def quadratic(self, K: np.ndarray) -> np.ndarray:
        """``K inv(A) K^T`` for a cross-covariance block ``K`` (n_pred, n_obs)."""
        if self.structure == "dense":
            return K @ cho_solve((self._chol, True), K.T, check_finite=False)
        gk = self._apply_g(K.T)
        out = gk.T @ gk
        if self._gw is not None:
            t = solve_triangular(self._R, self._gw.T @ gk, lower=True, check_finite=False)
            out -= t.T @ t
        return out

    def posterior(self, pred: PointSet) -> PosteriorMoments:
        p = self.params
        prior = prior_diag(pred, p.kernel)
        if self.structure == "dense":
            K = kernel_matrix(pred, self.points, p.kernel)
            mean = K @ self._alpha
            V = cho_solve((self._chol, True), K.T, check_finite=False)
            kv = prior - np.einsum("ij,ji->i", K, V)
        elif self.structure == "plain":
            return solve_posterior(self.factor, self.y, kernel_matrix(pred, self.points, p.kernel), prior,
                                   p.tau_dot2, p.phi_dot2)
        else:
            K = kernel_matrix(pred, self.points, p.kernel)
            gk = self._apply_g(K.T)  # (n_obs, n_pred)
            t = solve_triangular(self._R, self._gw.T @ gk, lower=True, check_finite=False)
            mean = gk.T @ self._gy - t.T @ self._wy
            kv = prior - (np.einsum("ij,ij->j", gk, gk) - np.einsum("ij,ij->j", t, t))
        n_clip = int((kv < 0).sum())
        if n_clip and self.structure != "dense":
            warnings.warn(f"{n_clip} posterior variances clipped at zero", RuntimeWarning, stacklevel=2)
        kv = np.maximum(kv, 0.0)
        return PosteriorMoments(mean, kv, kv + p.tau_dot2 + p.phi_dot2, n_clip)


def _first_index(inv, k):
    first = np.full(k, len(inv), dtype=np.intp)
    np.minimum.at(first, inv, np.arange(len(inv)))
    return first


def _chunks(n, size=1024):
    # fixed chunk boundaries keep results independent of the worker count
    return [np.arange(i, min(n, i + size)) for i in range(0, n, size)]


def _kernel_posterior(obs_table, pred_pts, params, factor, workers):
    solver = factor if isinstance(factor, ObservationSolver) else ObservationSolver(obs_table, params, factor)
    parts = _chunks(len(pred_pts))
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(workers) as ex:
            res = list(ex.map(lambda idx: solver.posterior(pred_pts.subset(idx)), parts))
    else:
        res = [solver.posterior(pred_pts.subset(idx)) for idx in parts]
    mean = np.concatenate([r.mean for r in res]) if res else np.empty(0)
    kv = np.concatenate([r.kernel_var for r in res]) if res else np.empty(0)
    return mean, kv, sum(r.n_clipped for r in res)


def predict(obs_table: ScenarioMeanTable, pred_points: PointSet, params: HyperParams,
            factor: SparseFactor | None = None, workers: int = 1, dense_cov: bool = False) -> PosteriorResult:
    """Prediction-mode posterior (unseen scenarios).

    ``factor=None`` solves exactly with a dense Cholesky, which is meant for
    small observation sets and for checking the sparse path.
    """
    mean, kv, n_clip = _kernel_posterior(obs_table, pred_points, params, factor, workers)
    n = len(mean)
    alea = {k: np.full(n, getattr(params, k)) for k in ("tau_dot2", "phi_dot2", "tau_ddot2", "phi_ddot2")}
    var = kv + sum(alea.values())
    cov = None
    if dense_cov:
        cov = _dense_pred_cov(obs_table, pred_points, params, factor, alea)
    return PosteriorResult(mean, np.sqrt(var), "prediction", kv, alea, np.asarray(pred_points.scenario), n_clip, cov)


def _dense_pred_cov(obs_table, pred_points, params, factor, alea):
    if len(pred_points) > DENSE_COV_CAP:
        raise ValueError(f"dense covariance is limited to {DENSE_COV_CAP} points")
    solver = factor if isinstance(factor, ObservationSolver) else ObservationSolver(obs_table, params, factor)
    K = kernel_matrix(pred_points, solver.points, params.kernel)
    C = kernel_matrix(pred_points, pred_points, params.kernel) - solver.quadratic(K)
    same = (pred_points.scenario[:, None] == pred_points.scenario[None, :]).astype(float)
    C += (params.tau_dot2 + params.tau_ddot2) * same
    C[np.diag_indices_from(C)] += params.phi_dot2 + params.phi_ddot2
    return C


def interpolate(obs_catalog: ResidualCatalog, pred_points: PointSet, pred_variation, params: HyperParams,
                factor: SparseFactor | None = None, components: VarianceComponents | None = None,
                obs_table: ScenarioMeanTable | None = None, workers: int = 1) -> PosteriorResult:
    """Interpolation-mode posterior (variations partially observed at other sites).

    ``pred_variation`` names the variation of each prediction point (``None``
    or an unknown id degrades that point to prediction mode). Between-event
    terms are estimated from each variation's deviations about the observed
    scenario means.
    """
    obs_table = collapse_to_means(obs_catalog) if obs_table is None else obs_table
    if components is None:
        components = VarianceComponents(params.tau_ddot2, params.phi_ddot2, params.tau_dot2, params.phi_dot2)
    base = predict(obs_table, pred_points, params, factor, workers)
    dev = cell_deviations(obs_catalog, obs_table)
    ev_ids = obs_catalog.variation_ids[obs_catalog.rec_variation]
    summ = summarize_events(ev_ids, dev)
    shrink_mean = condition_random_effects(summ, components)
    counts = dict(zip(summ.ids.tolist(), summ.n.tolist()))
    pv = [None if v is None else str(v) for v in pred_variation]
    if len(pv) != len(pred_points):
        raise ValueError("pred_variation must have one entry per prediction point")
    n_e = np.array([counts.get(v, 0) for v in pv], dtype=float)
    if not np.any(n_e > 0):
        return PosteriorResult(base.mean, base.std, "interpolation", base.kernel_var, base.aleatory,
                               base.scenario, base.n_clipped)
    tau2, phi2 = components.tau_ddot2, components.phi_ddot2
    b = np.array([shrink_mean.get(v, 0.0) for v in pv])
    tau_rem = np.where(n_e > 0, tau2 * (1.0 - shrinkage(n_e, tau2, phi2)), tau2) if tau2 > 0 else np.zeros(len(pv))
    alea = dict(base.aleatory)
    alea["tau_ddot2"] = tau_rem
    alea["phi_ddot2"] = np.full(len(pv), phi2)
    var = base.kernel_var + sum(alea.values())
    return PosteriorResult(base.mean + b, np.sqrt(var), "interpolation", base.kernel_var, alea,
                           base.scenario, base.n_clipped)


def evaluate_groups(truth_catalog: ResidualCatalog, pred_mean, pred_std, split: SplitAssignment,
                    mask=None) -> list[GroupMetrics]:
    """Per-group RMSE of record-aligned predictions.

    ``pred_mean``/``pred_std`` are aligned with ``truth_catalog`` records;
    ``mask`` restricts which records were predicted (default all). The
    backbone baseline is the zero residual.
    """
    y = np.asarray(truth_catalog.y, dtype=float)
    mu = np.asarray(pred_mean, dtype=float)
    sd = np.asarray(pred_std, dtype=float)
    if mu.shape != y.shape or sd.shape != y.shape:
        raise ValueError("predictions must align with catalog records")
    labels = split.catalog_labels(truth_catalog)
    keep = np.ones(len(y), bool) if mask is None else np.asarray(mask, bool)
    table = collapse_to_means(truth_catalog)
    n_site = len(truth_catalog.sites)
    cell = truth_catalog.rec_scenario.astype(np.int64) * n_site + truth_catalog.rec_site
    tkey = table.scenario.astype(np.int64) * n_site + table.site
    pos = np.searchsorted(tkey, cell)
    out = []
    for g in GROUPS:
        sel = keep & (labels == g)
        if not sel.any():
            out.append(GroupMetrics(g, 0, np.nan, np.nan, np.nan, np.nan, np.nan, present=False))
            continue
        # RMSE vs ybar compares the cell-averaged prediction with the cell mean
        cpos = pos[sel]
        ucell, inv = np.unique(cpos, return_inverse=True)
        pbar = np.bincount(inv, weights=mu[sel]) / np.bincount(inv)
        rmse_y = float(np.sqrt(np.mean((y[sel] - mu[sel]) ** 2)))
        rmse_b = float(np.sqrt(np.mean(y[sel] ** 2)))
        out.append(GroupMetrics(
            g, int(sel.sum()), rmse_y, float(np.sqrt(np.mean((table.y_bar[ucell] - pbar) ** 2))),
            float(np.mean(sd[sel])), rmse_b, 1.0 - rmse_y / rmse_b if rmse_b > 0 else np.nan,
        ))
    return out
