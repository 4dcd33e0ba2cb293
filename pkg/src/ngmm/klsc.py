"""KL-minimizing sparse Cholesky factors of the inverse covariance.

Points are put in maximin order (each new point is the one farthest from
those already chosen) and eliminated in the reverse of that order. Column
``k`` of the factor is supported on ``k`` plus the earlier-chosen points
within ``rho * l_k`` of it, where ``l_k`` is its distance at selection time.
Each column is the closed-form KL-optimal vector for its support,

    L_k = inv(Theta[s, s]) e_1 / sqrt(e_1^T inv(Theta[s, s]) e_1),

and ``inv(Theta) ~= L L^T`` in the permuted index space.

Index conventions: *rank* is the maximin selection step (0 = first chosen);
*position* is the row/column of the factor, ``position = n - 1 - rank``,
which makes the factor lower triangular.
"""
from __future__ import annotations

import json

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.sparse import csc_matrix
from scipy.spatial import cKDTree

from .kernels import DenseOracle

EXACT_MAXIMIN_LIMIT = 100000
_BALL_TOL = 1e-12


class FactorError(ArithmeticError):
    pass


@dataclass
class MaximinOrdering:
    order: np.ndarray  # original index chosen at each rank
    lengths: np.ndarray  # l at each rank; inf for the first
    coords: np.ndarray  # (n, d) coordinates used as the ordering metric

    def __len__(self) -> int:
        return len(self.order)

    @property
    def rank(self) -> np.ndarray:
        r = np.empty(len(self.order), dtype=np.intp)
        r[self.order] = np.arange(len(self.order))
        return r

    @property
    def perm(self) -> np.ndarray:
        """Original index at each factor position."""
        return self.order[::-1].copy()


@dataclass
class SparsityPattern:
    indptr: np.ndarray  # column offsets into indices, length n + 1
    indices: np.ndarray  # ascending factor positions, self first
    rho: float
    ordering: MaximinOrdering

    def __len__(self) -> int:
        return len(self.indptr) - 1

    def column(self, p: int) -> np.ndarray:
        return self.indices[self.indptr[p]:self.indptr[p + 1]]

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])


@dataclass
class SparseFactor:
    pattern: SparsityPattern
    data: np.ndarray
    groups: list[np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.pattern)

    @property
    def perm(self) -> np.ndarray:
        return self.pattern.ordering.perm

    def to_csc(self) -> csc_matrix:
        n = self.n
        return csc_matrix((self.data, self.pattern.indices, self.pattern.indptr), shape=(n, n))

    def precision_matvec(self, x: np.ndarray) -> np.ndarray:
        """Approximate ``inv(Theta) @ x`` in original index order (x may be 2-D)."""
        L = self.to_csc()
        perm = self.perm
        z = np.asarray(x, dtype=float)[perm]
        w = L @ (L.T @ z)
        out = np.empty_like(w)
        out[perm] = w
        return out

    def dense_precision(self) -> np.ndarray:
        return self.precision_matvec(np.eye(self.n))

    def diag(self) -> np.ndarray:
        return self.data[self.pattern.indptr[:-1]]


# ----------------------------------------------------------------------------- ordering

def reverse_maximin(coords, start: int = 0, exact_limit: int = EXACT_MAXIMIN_LIMIT) -> MaximinOrdering:
    """Exact greedy maximin ordering, O(n^2) time and O(n) memory.

    Ties go to the lowest original index. ``start`` is the arbitrary first
    point. Above ``exact_limit`` points this raises; plug an approximate
    ordering in by constructing ``MaximinOrdering`` directly.
    """
    x = np.asarray(coords, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if n < 1:
        raise ValueError("ordering needs at least one point")
    if n > exact_limit:
        raise ValueError(f"exact maximin limited to {exact_limit} points; supply an approximate ordering")
    order = np.empty(n, dtype=np.intp)
    lengths = np.empty(n)
    order[0] = start
    lengths[0] = np.inf
    mind = np.sqrt(((x - x[start]) ** 2).sum(axis=1))
    mind[start] = -1.0
    for k in range(1, n):
        j = int(np.argmax(mind))
        order[k] = j
        lengths[k] = mind[j]
        d = np.sqrt(((x - x[j]) ** 2).sum(axis=1))
        np.minimum(mind, d, out=mind)
        mind[j] = -1.0
    return MaximinOrdering(order, lengths, x)


def _earlier_knn(tree, x, order, rank, r, m):
    """The ``m`` nearest points among the first ``r`` chosen (ties by index)."""
    n = len(x)
    if r <= m:
        return order[:r]
    k = min(n, int(np.ceil(2.0 * m * n / r)) + m)
    if k < n:
        d, cand = tree.query(x[order[r]], k=k)
        keep = rank[cand] < r
        if keep.sum() >= m and d[-1] > d[keep][m - 1]:
            cand = cand[keep]
            dd = np.sqrt(((x[cand] - x[order[r]]) ** 2).sum(axis=1))
            return cand[np.lexsort((cand, dd))[:m]]
    prev = order[:r]
    dd = np.sqrt(((x[prev] - x[order[r]]) ** 2).sum(axis=1))
    return prev[np.lexsort((prev, dd))[:m]]


def build_pattern(ordering: MaximinOrdering, rho: float, min_neighbors: int = 0) -> SparsityPattern:
    """Per-column supports: earlier-chosen points within ``rho * l_k``.

    ``min_neighbors > 0`` also adds each point's nearest earlier-chosen
    points, which keeps columns informative when the point set is far from
    quasi-uniform (tight clusters give tiny ``l_k``).
    """
    if not rho >= 1:
        raise ValueError(f"rho must be >= 1, got {rho}")
    if min_neighbors < 0:
        raise ValueError("min_neighbors must be non-negative")
    x = ordering.coords
    n = len(ordering)
    rank = ordering.rank
    order = ordering.order
    tree = cKDTree(x) if np.isfinite(rho) or min_neighbors else None
    cols: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for r in range(n):
        p = n - 1 - r
        radius = rho * ordering.lengths[r]
        if r == 0:
            prev = np.empty(0, dtype=np.intp)
        elif not np.isfinite(radius):
            prev = order[:r]
        else:
            cand = np.asarray(tree.query_ball_point(x[order[r]], radius * (1 + 1e-9) + 1e-300), dtype=np.intp)
            cand = cand[rank[cand] < r]
            d = np.sqrt(((x[cand] - x[order[r]]) ** 2).sum(axis=1))
            prev = cand[d <= radius * (1 + _BALL_TOL)]
        if min_neighbors and 0 < r and np.isfinite(radius):
            prev = np.union1d(prev, _earlier_knn(tree, x, order, rank, r, min_neighbors))
        pos = np.sort(n - 1 - rank[prev])
        cols[p] = np.concatenate([[p], pos]).astype(np.intp)
    indptr = np.zeros(n + 1, dtype=np.intp)
    indptr[1:] = np.cumsum([len(c) for c in cols])
    return SparsityPattern(indptr, np.concatenate(cols) if n else np.empty(0, np.intp), float(rho), ordering)


def brute_force_pattern_sizes(coords, ordering: MaximinOrdering, rho: float) -> np.ndarray:
    """Reference support sizes by direct distance filtering (used as a test oracle)."""
    x = np.asarray(coords, dtype=float)
    n = len(x)
    sizes = np.empty(n, dtype=np.intp)
    for r in range(n):
        i = ordering.order[r]
        prev = ordering.order[:r]
        d = np.sqrt(((x[prev] - x[i]) ** 2).sum(axis=1))
        sizes[n - 1 - r] = 1 + int(np.sum(d <= rho * ordering.lengths[r] * (1 + _BALL_TOL))) if r else 1
    return sizes


# ----------------------------------------------------------------------------- factorization

def _column_solve(theta_access, perm, rows, p):
    idx = perm[rows]
    A = theta_access(idx, idx)
    try:
        c = cholesky(A, lower=True, check_finite=False)
    except LinAlgError:
        raise FactorError(f"submatrix for column {p} is not positive definite; add jitter") from None
    e1 = np.zeros(len(rows))
    e1[0] = 1.0
    v = cho_solve((c, True), e1, check_finite=False)
    if not v[0] > 0:
        raise FactorError(f"submatrix for column {p} is not positive definite; add jitter")
    return v / np.sqrt(v[0])


def _group_solve(theta_access, perm, rows, offsets, p):
    """All member columns of one supernode from a single factorization.

    With ``Theta[s, s] = U U^T`` (U upper triangular), the trailing block of
    ``U`` factors every trailing principal submatrix, and the KL column at
    offset j is column j of ``inv(U^T)``.
    """
    idx = perm[rows]
    A = theta_access(idx, idx)
    try:
        c = cholesky(A[::-1, ::-1], lower=True, check_finite=False)
    except LinAlgError:
        raise FactorError(f"submatrix for column group starting at {p} is not positive definite; add jitter") from None
    Ut = np.ascontiguousarray(c[::-1, ::-1].T)  # lower triangular
    rhs = np.zeros((len(rows), len(offsets)))
    rhs[offsets, np.arange(len(offsets))] = 1.0
    return solve_triangular(Ut, rhs, lower=True, check_finite=False)


def aggregate(pattern: SparsityPattern) -> list[np.ndarray]:
    """Group columns whose supports are exact tails of a leader's support.

    A column ``q`` joins the group of leader ``p`` when ``q`` lies in ``s_p``
    and ``s_q`` equals the part of ``s_p`` at positions ``>= q``; such columns
    are solved from the leader's single dense factorization with results
    identical to individual solves.
    """
    n = len(pattern)
    assigned = np.zeros(n, dtype=bool)
    groups = []
    for p in range(n):
        if assigned[p]:
            continue
        s = pattern.column(p)
        members = [p]
        assigned[p] = True
        for j in range(1, len(s)):
            q = s[j]
            if assigned[q]:
                continue
            sq = pattern.column(q)
            if len(sq) == len(s) - j and np.array_equal(sq, s[j:]):
                members.append(q)
                assigned[q] = True
        groups.append(np.array(members, dtype=np.intp))
    return groups


def factorize(theta_access, pattern: SparsityPattern, groups=None, workers: int = 1) -> SparseFactor:
    """Compute the factor values column by column (or group by group).

    ``theta_access(rows, cols)`` returns covariance entries in original index
    space. ``groups`` from :func:`aggregate` enables supernodal reuse. Work is
    spread over a thread pool; every column is written to its own slot, so
    the result does not depend on ``workers``.
    """
    if isinstance(theta_access, np.ndarray):
        theta_access = DenseOracle(theta_access)
    perm = pattern.ordering.perm
    data = np.empty(pattern.nnz)
    indptr = pattern.indptr

    def run_column(p):
        rows = pattern.column(p)
        data[indptr[p]:indptr[p + 1]] = _column_solve(theta_access, perm, rows, p)

    def run_group(g):
        lead = g[0]
        rows = pattern.column(lead)
        where = {int(q): i for i, q in enumerate(rows)}
        offsets = np.array([where[int(q)] for q in g], dtype=np.intp)
        cols = _group_solve(theta_access, perm, rows, offsets, lead)
        for q, off, col in zip(g, offsets, cols.T):
            data[indptr[q]:indptr[q + 1]] = col[off:]

    tasks = list(range(len(pattern))) if groups is None else list(groups)
    fn = run_column if groups is None else run_group
    if workers <= 1:
        for t in tasks:
            fn(t)
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            for _ in ex.map(fn, tasks):
                pass
    return SparseFactor(pattern, data, groups, {"rho": pattern.rho, "aggregated": groups is not None})


def klsc_factor(coords, theta_access, rho: float = 2.0, workers: int = 1, aggregated: bool = True,
                min_neighbors: int = 0) -> SparseFactor:
    """Ordering, pattern and factor in one call."""
    ordering = reverse_maximin(coords)
    pattern = build_pattern(ordering, rho, min_neighbors)
    groups = aggregate(pattern) if aggregated else None
    return factorize(theta_access, pattern, groups=groups, workers=workers)


def kl_divergence(theta: np.ndarray, factor: SparseFactor) -> float:
    """KL( N(0, Theta) || N(0, inv(L L^T)) ) evaluated densely."""
    perm = factor.perm
    T = np.asarray(theta)[np.ix_(perm, perm)]
    L = factor.to_csc().toarray()
    n = len(T)
    M = L.T @ T @ L
    _, logdet_t = np.linalg.slogdet(T)
    return float(0.5 * (np.trace(M) - n - logdet_t - 2.0 * np.log(np.diag(L)).sum()))


# ----------------------------------------------------------------------------- posterior

@dataclass
class PosteriorMoments:
    mean: np.ndarray
    kernel_var: np.ndarray  # prior minus explained variance, clipped at zero
    var: np.ndarray  # kernel_var + phi_dot2 + tau_dot2
    n_clipped: int = 0


def solve_posterior(
    factor: SparseFactor,
    obs_values,
    cross_cov,
    prior_cov,
    tau_dot2: float = 0.0,
    phi_dot2: float = 0.0,
) -> PosteriorMoments:
    """GP posterior mean and marginal variance using ``inv(Theta) ~= L L^T``.

    ``cross_cov`` is (n_pred, n_obs); ``prior_cov`` is the prior variance per
    prediction point (a vector, or a square matrix whose diagonal is used).
    """
    y = np.asarray(obs_values, dtype=float).reshape(-1)
    K = np.asarray(cross_cov, dtype=float)
    if K.ndim != 2 or K.shape[1] != factor.n or len(y) != factor.n:
        raise ValueError(
            f"dimension mismatch: factor n={factor.n}, obs={len(y)}, cross_cov={K.shape}"
        )
    prior = np.asarray(prior_cov, dtype=float)
    if prior.ndim == 2:
        prior = np.diag(prior)
    if prior.shape != (K.shape[0],):
        raise ValueError(f"prior_cov has shape {prior.shape}, expected ({K.shape[0]},)")
    L = factor.to_csc()
    perm = factor.perm
    B = (L.T @ K[:, perm].T).T  # (n_pred, n_obs) = K P^T L
    w = L.T @ y[perm]
    mean = B @ w
    kv = prior - np.einsum("ij,ij->i", B, B)
    neg = kv < 0
    n_clip = int(neg.sum())
    if n_clip:
        warnings.warn(f"{n_clip} posterior variances clipped at zero", RuntimeWarning, stacklevel=2)
        kv = np.where(neg, 0.0, kv)
    return PosteriorMoments(mean, kv, kv + phi_dot2 + tau_dot2, n_clip)


# ----------------------------------------------------------------------------- persistence

FORMAT_VERSION = 1


def save_factor(factor: SparseFactor, path, fingerprint: str = "") -> None:
    """Binary factor file (numpy ``.npz``): header fields, ordering, pattern offsets, values."""
    p = Path(path)
    pat = factor.pattern
    ordg = pat.ordering
    gptr = np.zeros(1, dtype=np.intp)
    gidx = np.empty(0, dtype=np.intp)
    if factor.groups is not None:
        gptr = np.concatenate([[0], np.cumsum([len(g) for g in factor.groups])]).astype(np.intp)
        gidx = np.concatenate(factor.groups).astype(np.intp) if factor.groups else gidx
    tmp = p.with_name(p.name + ".tmp.npz")
    np.savez(
        tmp,
        version=np.array(FORMAT_VERSION), n=np.array(factor.n), rho=np.array(pat.rho),
        fingerprint=np.array(fingerprint), order=ordg.order, lengths=ordg.lengths, coords=ordg.coords,
        indptr=pat.indptr, indices=pat.indices, data=factor.data,
        group_ptr=gptr, group_idx=gidx, has_groups=np.array(factor.groups is not None),
        meta=np.array(json.dumps({k: v for k, v in factor.meta.items() if k != "fingerprint"}, sort_keys=True)),
    )
    tmp.replace(p)


def load_factor(path) -> SparseFactor:
    with np.load(path, allow_pickle=False) as z:
        if int(z["version"]) != FORMAT_VERSION:
            raise ValueError(f"unsupported factor file version {int(z['version'])}")
        ordering = MaximinOrdering(z["order"], z["lengths"], z["coords"])
        pattern = SparsityPattern(z["indptr"], z["indices"], float(z["rho"]), ordering)
        groups = None
        if bool(z["has_groups"]):
            ptr, idx = z["group_ptr"], z["group_idx"]
            groups = [idx[ptr[i]:ptr[i + 1]] for i in range(len(ptr) - 1)]
        meta = json.loads(str(z["meta"])) if "meta" in z.files else {}
        meta.update(rho=float(z["rho"]), fingerprint=str(z["fingerprint"]))
        return SparseFactor(pattern, z["data"], groups, meta)
