"""Non-ergodic covariance: Matérn site kernel plus Matérn path kernel.

The site term correlates records through the planar distance between sites.
The path term correlates them through the Euclidean distance between the
4-vectors ``(site_x, site_y, src_x, src_y)``, where ``src`` is the closest
point of the rupture scenario. Both use unit-variance Matérn correlations.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

SQRT3 = np.sqrt(3.0)
SQRT5 = np.sqrt(5.0)
ALLOWED_NU = (0.5, 1.5, 2.5)
JITTER_REL = 1e-9


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class KernelHyper:
    site_var: float
    site_len: float
    path_var: float
    path_len: float
    matern_nu: float = 1.5

    def __post_init__(self):
        if not (self.site_var > 0 and self.path_var > 0):
            raise KernelError("kernel variances must be positive")
        if not (self.site_len > 0 and self.path_len > 0):
            raise KernelError("kernel length scales must be positive")
        if self.matern_nu not in ALLOWED_NU:
            raise KernelError(f"matern_nu must be one of {ALLOWED_NU}, got {self.matern_nu}")

    @property
    def prior_var(self) -> float:
        return self.site_var + self.path_var

    @property
    def jitter(self) -> float:
        return JITTER_REL * self.prior_var


@dataclass(frozen=True)
class PredictionPoint:
    site_x: float
    site_y: float
    src_x: float
    src_y: float
    scenario_id: str = ""
    site_id: str = ""


@dataclass
class PointSet:
    """Vectorized kernel inputs.

    ``scenario`` holds integer codes; two points share a between-event term
    iff their codes are equal.
    """

    site_xy: np.ndarray
    src_xy: np.ndarray
    scenario: np.ndarray

    def __post_init__(self):
        self.site_xy = np.asarray(self.site_xy, dtype=float).reshape(-1, 2)
        self.src_xy = np.asarray(self.src_xy, dtype=float).reshape(-1, 2)
        self.scenario = np.asarray(self.scenario).reshape(-1)
        n = len(self.site_xy)
        if len(self.src_xy) != n or len(self.scenario) != n:
            raise KernelError("site_xy, src_xy and scenario must have equal length")
        if not (np.all(np.isfinite(self.site_xy)) and np.all(np.isfinite(self.src_xy))):
            raise KernelError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.site_xy)

    @property
    def path_coords(self) -> np.ndarray:
        return np.hstack([self.site_xy, self.src_xy])

    def subset(self, idx) -> "PointSet":
        return PointSet(self.site_xy[idx], self.src_xy[idx], self.scenario[idx])

    @classmethod
    def from_points(cls, points: Sequence[PredictionPoint]) -> "PointSet":
        if len(points) == 0:
            return cls(np.empty((0, 2)), np.empty((0, 2)), np.empty(0, dtype=object))
        site = [(p.site_x, p.site_y) for p in points]
        src = [(p.src_x, p.src_y) for p in points]
        scen = np.array([p.scenario_id for p in points], dtype=object)
        return cls(np.array(site), np.array(src), scen)


def matern(r, nu: float = 1.5):
    """Unit-variance Matérn correlation of the scaled distance ``r = d / length``."""
    r = np.asarray(r, dtype=float)
    if nu == 0.5:
        return np.exp(-r)
    if nu == 1.5:
        s = SQRT3 * r
        return (1.0 + s) * np.exp(-s)
    if nu == 2.5:
        s = SQRT5 * r
        return (1.0 + s + s * s / 3.0) * np.exp(-s)
    raise KernelError(f"unsupported matern_nu {nu}")


def matern_dlog_length(r, nu: float = 1.5):
    """Derivative of ``matern(d / l)`` with respect to ``log l``, i.e. ``-r M'(r)``."""
    r = np.asarray(r, dtype=float)
    if nu == 0.5:
        return r * np.exp(-r)
    if nu == 1.5:
        return 3.0 * r * r * np.exp(-SQRT3 * r)
    if nu == 2.5:
        return (5.0 / 3.0) * r * r * (1.0 + SQRT5 * r) * np.exp(-SQRT5 * r)
    raise KernelError(f"unsupported matern_nu {nu}")


def pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # cdist works from explicit differences, so coincident points give exact zeros
    return cdist(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def kernel_value(p: PredictionPoint, q: PredictionPoint, h: KernelHyper) -> float:
    d_site = np.hypot(p.site_x - q.site_x, p.site_y - q.site_y)
    dp = np.array([p.site_x - q.site_x, p.site_y - q.site_y, p.src_x - q.src_x, p.src_y - q.src_y])
    d_path = float(np.sqrt(dp @ dp))
    return float(
        h.site_var * matern(d_site / h.site_len, h.matern_nu)
        + h.path_var * matern(d_path / h.path_len, h.matern_nu)
    )


def kernel_matrix(a: PointSet, b: PointSet, h: KernelHyper) -> np.ndarray:
    """Rectangular block of kernel values between two point sets."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    d_site = pairwise_dist(a.site_xy, b.site_xy)
    d_path = pairwise_dist(a.path_coords, b.path_coords)
    return h.site_var * matern(d_site / h.site_len, h.matern_nu) + h.path_var * matern(
        d_path / h.path_len, h.matern_nu
    )


def kernel_matrix_grad(pts: PointSet, h: KernelHyper) -> dict[str, np.ndarray]:
    """Derivatives of the symmetric kernel block w.r.t. the log of each kernel hyperparameter."""
    d_site = pairwise_dist(pts.site_xy, pts.site_xy) / h.site_len
    d_path = pairwise_dist(pts.path_coords, pts.path_coords) / h.path_len
    nu = h.matern_nu
    return {
        "site_var": h.site_var * matern(d_site, nu),
        "site_len": h.site_var * matern_dlog_length(d_site, nu),
        "path_var": h.path_var * matern(d_path, nu),
        "path_len": h.path_var * matern_dlog_length(d_path, nu),
    }


def same_scenario(a: PointSet, b: PointSet) -> np.ndarray:
    return (a.scenario[:, None] == b.scenario[None, :]).astype(float)


def assemble_train_cov(
    points: PointSet,
    h: KernelHyper,
    tau_dot2: float,
    phi_dot2: float,
    jitter: bool = True,
    check_psd: bool | None = None,
) -> np.ndarray:
    """Observation covariance: kernel + within-event noise + between-event block.

    The between-event variance is added to every entry whose row and column
    share a scenario code. For n <= 500 (or ``check_psd=True``) the result is
    eigen-checked and a non-PSD matrix raises.
    """
    if len(points) == 0:
        raise KernelError("assemble_train_cov needs at least one point")
    if tau_dot2 < 0 or phi_dot2 < 0:
        raise KernelError("variance components must be non-negative")
    K = kernel_matrix(points, points, h)
    K += tau_dot2 * same_scenario(points, points)
    K[np.diag_indices_from(K)] += phi_dot2 + (h.jitter if jitter else 0.0)
    if check_psd is None:
        check_psd = len(points) <= 500
    if check_psd:
        lam_min = np.linalg.eigvalsh(K)[0]
        if lam_min < -1e-8 * np.trace(K):
            raise KernelError(
                f"assembled covariance is not PSD (min eigenvalue {lam_min:.3e}); increase jitter"
            )
    return K


def assemble_cross_cov(pred: PointSet, obs: PointSet, h: KernelHyper) -> np.ndarray:
    return kernel_matrix(pred, obs, h)


def prior_diag(points: PointSet, h: KernelHyper) -> np.ndarray:
    return np.full(len(points), h.prior_var)


class CovarianceOracle:
    """Entry access to the assembled training covariance for index subsets.

    Used by the sparse factorization, which only ever needs small principal
    submatrices.
    """

    def __init__(self, points: PointSet, h: KernelHyper, tau_dot2: float, phi_dot2: float):
        self.points = points
        self.h = h
        self.tau_dot2 = float(tau_dot2)
        self.phi_dot2 = float(phi_dot2)

    def __len__(self) -> int:
        return len(self.points)

    def __call__(self, rows, cols) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        a = self.points.subset(rows)
        b = self.points.subset(cols)
        K = kernel_matrix(a, b, self.h)
        K += self.tau_dot2 * same_scenario(a, b)
        K += (self.phi_dot2 + self.h.jitter) * (rows[:, None] == cols[None, :])
        return K


class DenseOracle:
    """Entry access to an explicit matrix (tests, small problems)."""

    def __init__(self, theta: np.ndarray):
        self.theta = np.asarray(theta, dtype=float)

    def __len__(self) -> int:
        return len(self.theta)

    def __call__(self, rows, cols) -> np.ndarray:
        return self.theta[np.ix_(rows, cols)]


ThetaAccess = Callable[[np.ndarray, np.ndarray], np.ndarray]
