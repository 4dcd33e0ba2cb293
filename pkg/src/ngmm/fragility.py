"""Lognormal fragility curves, translation to the target spectral ordinate, damage sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .domain import _rows, write_csv

SUM_TOL = 1e-12


class FragilityError(ValueError):
    pass


@dataclass(frozen=True)
class FragilitySet:
    states: tuple  # damage-state names, least to most severe
    median: np.ndarray  # alpha_k in g
    beta: np.ndarray  # log dispersions

    def __post_init__(self):
        m = np.asarray(self.median, dtype=float).reshape(-1)
        b = np.asarray(self.beta, dtype=float).reshape(-1)
        object.__setattr__(self, "median", m)
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "states", tuple(self.states))
        if not (len(self.states) == len(m) == len(b)) or len(m) == 0:
            raise FragilityError("states, medians and dispersions must have equal, non-zero length")
        if np.any(m <= 0) or np.any(b < 0) or not np.all(np.isfinite(m)) or not np.all(np.isfinite(b)):
            raise FragilityError("medians must be positive and dispersions non-negative")
        if np.any(np.diff(m) <= 0):
            raise FragilityError("medians must increase strictly with damage state")

    @property
    def n_states(self) -> int:
        return len(self.median)

    def exceedance(self, psa) -> np.ndarray:
        """``P(DS > ds_k | psa)`` with shape ``psa.shape + (K,)``; beta=0 is a step at the median."""
        x = np.asarray(psa, dtype=float)[..., None]
        with np.errstate(divide="ignore"):
            lx = np.log(x)
        b = self.beta
        safe = np.where(b > 0, b, 1.0)
        z = (lx - np.log(self.median)) / safe
        return np.where(b > 0, ndtr(z), (x >= self.median).astype(float))


def translate(fs: FragilitySet, ratio: float) -> FragilitySet:
    """Scale every median by the facility's design-spectrum ratio; dispersions are unchanged."""
    if not (np.isfinite(ratio) and ratio > 0):
        raise FragilityError(f"design-spectrum ratio must be positive, got {ratio}")
    if ratio == 1.0:
        return fs
    return FragilitySet(fs.states, fs.median * ratio, fs.beta)


def state_probabilities(fs: FragilitySet, psa) -> np.ndarray:
    """Probabilities of ``(none, ds_1, ..., ds_K)``; shape ``psa.shape + (K+1,)``."""
    ex = fs.exceedance(psa)
    if np.any(np.diff(ex, axis=-1) > 1e-15):
        bad = np.argwhere(np.diff(ex, axis=-1) > 1e-15)[0]
        k = int(bad[-1])
        raise FragilityError(
            f"fragility curves cross: P(>{fs.states[k + 1]}) exceeds P(>{fs.states[k]})"
        )
    ones = np.ones(ex.shape[:-1] + (1,))
    zeros = np.zeros(ex.shape[:-1] + (1,))
    upper = np.concatenate([ones, ex], axis=-1)
    lower = np.concatenate([ex, zeros], axis=-1)
    p = upper - lower
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > SUM_TOL):
        raise FragilityError("state probabilities do not sum to one")
    return p


@dataclass
class DamageRealization:
    realization: int
    field_realization: int
    states: np.ndarray  # (n_facilities,), 0 = no damage


@dataclass
class DamageSummary:
    realizations: list
    frequencies: np.ndarray  # (n_facilities, K+1)
    expected_counts: np.ndarray  # (K+1,) mean number of facilities per state
    state_names: tuple = field(default_factory=tuple)


def sample_damage(fields, fs: FragilitySet, ratios, seed: int = 0, draws_per_field: int = 1) -> DamageSummary:
    """One categorical draw per facility per realization.

    ``fields`` is ``(n_fields, n_facilities)`` PSA in g. Each field is used
    ``draws_per_field`` times; facilities are independent given the field.
    """
    F = np.atleast_2d(np.asarray(fields, dtype=float))
    ratios = np.asarray(ratios, dtype=float).reshape(-1)
    if F.shape[1] != len(ratios):
        raise FragilityError("field columns must match the number of facilities")
    if np.any(~np.isfinite(ratios)) or np.any(ratios <= 0):
        raise FragilityError("design-spectrum ratios must be positive")
    # translated median per facility: alpha_k * r_i; same as evaluating the base set at psa / r_i
    probs = state_probabilities(fs, F / ratios[None, :])  # (n_fields, n_fac, K+1)
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    rng = np.random.default_rng(seed)
    n_fields, n_fac = F.shape
    out = []
    counts = np.zeros((n_fac, fs.n_states + 1))
    r = 0
    for f in range(n_fields):
        u = rng.random((draws_per_field, n_fac))
        # first state whose cumulative probability exceeds u
        st = (u[..., None] >= cdf[f][None, :, :]).sum(axis=-1)
        for row in st:
            out.append(DamageRealization(r, f, row.astype(np.int64)))
            counts[np.arange(n_fac), row] += 1
            r += 1
    freq = counts / max(r, 1)
    return DamageSummary(out, freq, freq.sum(axis=0), ("none",) + fs.states)


# ----------------------------------------------------------------------------- CSV

def read_fragility(path) -> FragilitySet:
    """Columns ``state, median_g, beta`` in increasing severity."""
    header, rows = _rows(Path(path))
    idx = {h: i for i, h in enumerate(header)}
    for col in ("state", "median_g", "beta"):
        if col not in idx:
            raise FragilityError(f"{path}: missing column {col!r}")
    rows = list(rows)
    return FragilitySet(
        tuple(r[idx["state"]] for r in rows),
        np.array([float(r[idx["median_g"]]) for r in rows]),
        np.array([float(r[idx["beta"]]) for r in rows]),
    )


def read_facilities(path):
    """Columns ``facility_id, x_km, y_km, ratio``; returns ids, coordinates and ratios."""
    header, rows = _rows(Path(path))
    idx = {h: i for i, h in enumerate(header)}
    for col in ("facility_id", "x_km", "y_km", "ratio"):
        if col not in idx:
            raise FragilityError(f"{path}: missing column {col!r}")
    rows = list(rows)
    ids = [r[idx["facility_id"]] for r in rows]
    xy = np.array([[float(r[idx["x_km"]]), float(r[idx["y_km"]])] for r in rows]).reshape(-1, 2)
    ratio = np.array([float(r[idx["ratio"]]) for r in rows])
    return ids, xy, ratio


def write_damage(summary: DamageSummary, facility_ids, outdir) -> None:
    out = Path(outdir)
    write_csv(out / "damage_realizations.csv", ["realization", "field_realization", "facility_id", "state"],
              ([d.realization, d.field_realization, fid, int(s)]
               for d in summary.realizations for fid, s in zip(facility_ids, d.states)),
              "state: damage-state index, 0 = none")
    names = list(summary.state_names)
    write_csv(out / "damage_frequencies.csv", ["facility_id"] + [f"p_{n}" for n in names],
              ([fid] + list(row) for fid, row in zip(facility_ids, summary.frequencies)),
              "p_*: empirical state frequency (dimensionless)")
    write_csv(out / "damage_expected_counts.csv", ["state", "expected_count"],
              ([n, c] for n, c in zip(names, summary.expected_counts)),
              "expected_count: mean number of facilities per realization")
