"""Catalog data model: ingestion, scenario-mean collapse and train/test splitting."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .kernels import PointSet


class CatalogError(ValueError):
    pass


class SchemaError(CatalogError):
    pass


class IntegrityError(CatalogError):
    pass


class ParseError(CatalogError):
    pass


@dataclass(frozen=True)
class Site:
    site_id: str
    x_km: float
    y_km: float
    vs30: float = float("nan")


@dataclass(frozen=True)
class RuptureScenario:
    scenario_id: str
    magnitude: float
    annual_rate: float
    closest_point_x_km: float
    closest_point_y_km: float


@dataclass(frozen=True)
class RuptureVariation:
    variation_id: str
    scenario_id: str


@dataclass(frozen=True)
class ResidualRecord:
    variation_id: str
    site_id: str
    y: float
    backbone_mu: float
    backbone_sigma: float


@dataclass(frozen=True)
class ScenarioMeanRecord:
    scenario_id: str
    site_id: str
    y_bar: float
    n_variations: int


def _check_sites(sites: Sequence[Site]) -> None:
    ids = [s.site_id for s in sites]
    if len(set(ids)) != len(ids):
        raise IntegrityError("duplicate site_id in site table")
    for s in sites:
        if not (math.isfinite(s.x_km) and math.isfinite(s.y_km)):
            raise ParseError(f"site {s.site_id!r} has non-finite coordinates")


def _check_scenarios(scenarios: Sequence[RuptureScenario]) -> None:
    ids = [s.scenario_id for s in scenarios]
    if len(set(ids)) != len(ids):
        raise IntegrityError("duplicate scenario_id in scenario table")
    for s in scenarios:
        if not (s.annual_rate >= 0):
            raise IntegrityError(f"scenario {s.scenario_id!r} has negative annual rate")
        if not (math.isfinite(s.closest_point_x_km) and math.isfinite(s.closest_point_y_km)):
            raise ParseError(f"scenario {s.scenario_id!r} has non-finite coordinates")


@dataclass
class ResidualCatalog:
    """Variation-level residual records stored column-wise.

    Records are kept in canonical order (scenario, variation, site) so that
    every derived table is independent of input row order.
    """

    sites: list[Site]
    scenarios: list[RuptureScenario]
    variation_ids: np.ndarray  # (n_var,) str
    variation_scenario: np.ndarray  # (n_var,) int code into scenarios
    rec_variation: np.ndarray  # (n,) int code into variation_ids
    rec_site: np.ndarray  # (n,) int code into sites
    y: np.ndarray
    backbone_mu: np.ndarray
    backbone_sigma: np.ndarray

    def __post_init__(self):
        _check_sites(self.sites)
        _check_scenarios(self.scenarios)
        self.site_index = {s.site_id: i for i, s in enumerate(self.sites)}
        self.scenario_index = {s.scenario_id: i for i, s in enumerate(self.scenarios)}
        self.variation_index = {v: i for i, v in enumerate(self.variation_ids)}
        self._canonicalize()

    def _canonicalize(self) -> None:
        scen = self.variation_scenario[self.rec_variation]
        order = np.lexsort((self.rec_site, self.rec_variation, scen))
        for name in ("rec_variation", "rec_site", "y", "backbone_mu", "backbone_sigma"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name)[order]))
        key = self.rec_variation.astype(np.int64) * len(self.sites) + self.rec_site
        if len(key) > 1 and np.any(key[1:] == key[:-1]):
            i = int(np.flatnonzero(key[1:] == key[:-1])[0])
            v = self.variation_ids[self.rec_variation[i]]
            s = self.sites[self.rec_site[i]].site_id
            raise IntegrityError(f"duplicate record for variation {v!r} at site {s!r}")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def rec_scenario(self) -> np.ndarray:
        return self.variation_scenario[self.rec_variation]

    @property
    def site_xy(self) -> np.ndarray:
        return np.array([(s.x_km, s.y_km) for s in self.sites], dtype=float).reshape(-1, 2)

    @property
    def scenario_xy(self) -> np.ndarray:
        return np.array(
            [(s.closest_point_x_km, s.closest_point_y_km) for s in self.scenarios], dtype=float
        ).reshape(-1, 2)

    @property
    def scenario_rates(self) -> np.ndarray:
        return np.array([s.annual_rate for s in self.scenarios], dtype=float)

    def records(self) -> Iterable[ResidualRecord]:
        for i in range(len(self)):
            yield ResidualRecord(
                str(self.variation_ids[self.rec_variation[i]]),
                self.sites[self.rec_site[i]].site_id,
                float(self.y[i]),
                float(self.backbone_mu[i]),
                float(self.backbone_sigma[i]),
            )

    def subset(self, mask: np.ndarray) -> "ResidualCatalog":
        """Records where ``mask`` holds; site, scenario and variation tables are kept whole."""
        mask = np.asarray(mask, dtype=bool)
        return ResidualCatalog(
            self.sites, self.scenarios, self.variation_ids, self.variation_scenario,
            self.rec_variation[mask], self.rec_site[mask], self.y[mask],
            self.backbone_mu[mask], self.backbone_sigma[mask],
        )


@dataclass
class ScenarioMeanTable:
    """Per-(scenario, site) mean residuals: the data the GP is trained on."""

    sites: list[Site]
    scenarios: list[RuptureScenario]
    scenario: np.ndarray  # int codes
    site: np.ndarray  # int codes
    y_bar: np.ndarray
    n_variations: np.ndarray
    backbone_mu: np.ndarray
    backbone_sigma: np.ndarray

    def __len__(self) -> int:
        return len(self.y_bar)

    def records(self) -> Iterable[ScenarioMeanRecord]:
        for i in range(len(self)):
            yield ScenarioMeanRecord(
                self.scenarios[self.scenario[i]].scenario_id,
                self.sites[self.site[i]].site_id,
                float(self.y_bar[i]),
                int(self.n_variations[i]),
            )

    def points(self) -> PointSet:
        site_xy = np.array([(s.x_km, s.y_km) for s in self.sites], dtype=float).reshape(-1, 2)
        src_xy = np.array(
            [(s.closest_point_x_km, s.closest_point_y_km) for s in self.scenarios], dtype=float
        ).reshape(-1, 2)
        return PointSet(site_xy[self.site], src_xy[self.scenario], self.scenario.copy())

    def subset(self, mask) -> "ScenarioMeanTable":
        mask = np.asarray(mask)
        return ScenarioMeanTable(
            self.sites, self.scenarios, self.scenario[mask], self.site[mask], self.y_bar[mask],
            self.n_variations[mask], self.backbone_mu[mask], self.backbone_sigma[mask],
        )

    def cell_index(self) -> dict[tuple[int, int], int]:
        return {(int(a), int(b)): i for i, (a, b) in enumerate(zip(self.scenario, self.site))}


def collapse_to_means(catalog: ResidualCatalog) -> ScenarioMeanTable:
    """Average the residuals of all variations of one scenario at one site."""
    if len(catalog) == 0:
        raise CatalogError("cannot collapse an empty catalog")
    n_site = len(catalog.sites)
    key = catalog.rec_scenario.astype(np.int64) * n_site + catalog.rec_site
    cells, inv = np.unique(key, return_inverse=True)
    count = np.bincount(inv)
    total = np.bincount(inv, weights=catalog.y)
    mu = np.bincount(inv, weights=catalog.backbone_mu) / count
    sig = np.bincount(inv, weights=catalog.backbone_sigma) / count
    return ScenarioMeanTable(
        catalog.sites, catalog.scenarios, (cells // n_site).astype(np.intp),
        (cells % n_site).astype(np.intp), total / count, count.astype(np.int64), mu, sig,
    )


def cell_deviations(catalog: ResidualCatalog, table: ScenarioMeanTable | None = None) -> np.ndarray:
    """Residual of every record about its (scenario, site) mean."""
    table = collapse_to_means(catalog) if table is None else table
    n_site = len(catalog.sites)
    key = catalog.rec_scenario.astype(np.int64) * n_site + catalog.rec_site
    tkey = table.scenario.astype(np.int64) * n_site + table.site
    pos = np.searchsorted(tkey, key)
    if np.any(pos >= len(tkey)) or np.any(tkey[np.minimum(pos, len(tkey) - 1)] != key):
        raise IntegrityError("mean table does not cover every catalog cell")
    return catalog.y - table.y_bar[pos]


# ----------------------------------------------------------------------------- split

@dataclass
class SplitAssignment:
    site_role: dict[str, str]
    scenario_role: dict[str, str]
    metadata: dict = field(default_factory=dict)

    def site_is_train(self, site_ids) -> np.ndarray:
        return np.array([self.site_role[s] == "train" for s in site_ids], dtype=bool)

    def scenario_is_train(self, scenario_ids) -> np.ndarray:
        return np.array([self.scenario_role[s] == "train" for s in scenario_ids], dtype=bool)

    def group_labels(self, scenario_ids, site_ids) -> np.ndarray:
        """'TrTe' means training scenario at a testing site."""
        ev = np.where(self.scenario_is_train(scenario_ids), "Tr", "Te")
        st = np.where(self.site_is_train(site_ids), "Tr", "Te")
        return np.char.add(ev, st)

    def catalog_labels(self, catalog: ResidualCatalog) -> np.ndarray:
        scen_lab = np.where(
            self.scenario_is_train([s.scenario_id for s in catalog.scenarios]), "Tr", "Te"
        )
        site_lab = np.where(self.site_is_train([s.site_id for s in catalog.sites]), "Tr", "Te")
        return np.char.add(scen_lab[catalog.rec_scenario], site_lab[catalog.rec_site])

    def table_labels(self, table: ScenarioMeanTable) -> np.ndarray:
        scen_lab = np.where(
            self.scenario_is_train([s.scenario_id for s in table.scenarios]), "Tr", "Te"
        )
        site_lab = np.where(self.site_is_train([s.site_id for s in table.sites]), "Tr", "Te")
        return np.char.add(scen_lab[table.scenario], site_lab[table.site])

    def to_manifest(self) -> dict:
        return {
            **self.metadata,
            "sites": dict(sorted(self.site_role.items())),
            "scenarios": dict(sorted(self.scenario_role.items())),
        }

    @classmethod
    def from_manifest(cls, d: Mapping) -> "SplitAssignment":
        meta = {k: v for k, v in d.items() if k not in ("sites", "scenarios")}
        return cls(dict(d["sites"]), dict(d["scenarios"]), meta)


def n_test_for(n: int, frac: float) -> int:
    """Round-half-up count of test members, kept inside [1, n-1] when n >= 2."""
    k = int(math.floor(frac * n + 0.5))
    if n >= 2:
        k = min(max(k, 1), n - 1)
    return k


def _assign(ids: Sequence[str], frac: float, rng: np.random.Generator) -> dict[str, str]:
    ids = sorted(ids)
    k = n_test_for(len(ids), frac)
    perm = rng.permutation(len(ids))
    test = set(perm[:k].tolist())
    return {sid: ("test" if i in test else "train") for i, sid in enumerate(ids)}


def split(
    sites: Sequence[str],
    scenarios: Sequence[str],
    site_test_frac: float,
    scenario_test_frac: float,
    seed: int,
) -> SplitAssignment:
    """Independent random train/test partition of sites and of scenarios."""
    for name, f in (("site_test_frac", site_test_frac), ("scenario_test_frac", scenario_test_frac)):
        if not (0.0 < f < 1.0):
            raise ValueError(f"{name} must lie in (0, 1), got {f}")
    site_ids = [s.site_id if isinstance(s, Site) else str(s) for s in sites]
    scen_ids = [s.scenario_id if isinstance(s, RuptureScenario) else str(s) for s in scenarios]
    rng = np.random.default_rng(seed)
    site_role = _assign(site_ids, site_test_frac, rng)
    scen_role = _assign(scen_ids, scenario_test_frac, rng)
    meta = {
        "seed": int(seed),
        "site_test_frac": float(site_test_frac),
        "scenario_test_frac": float(scenario_test_frac),
        "count_rule": "n_test = floor(frac * n + 0.5), clipped to [1, n-1]",
        "n_sites_train": sum(r == "train" for r in site_role.values()),
        "n_sites_test": sum(r == "test" for r in site_role.values()),
        "n_scenarios_train": sum(r == "train" for r in scen_role.values()),
        "n_scenarios_test": sum(r == "test" for r in scen_role.values()),
    }
    return SplitAssignment(site_role, scen_role, meta)


# ----------------------------------------------------------------------------- CSV I/O

CANONICAL = (
    "site_id", "x_km", "y_km", "vs30",
    "scenario_id", "magnitude", "annual_rate", "closest_point_x_km", "closest_point_y_km",
    "variation_id", "y", "ln_psa", "backbone_mu", "backbone_sigma",
)


def _rows(path: Path) -> tuple[list[str], Iterable[list[str]]]:
    fh = open(path, newline="", encoding="utf-8")
    lines = (ln for ln in fh if not ln.startswith("#"))
    reader = csv.reader(lines)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        fh.close()
        raise SchemaError(f"{path}: empty file") from None

    def gen():
        with fh:
            yield from reader

    return header, gen()


def _column_lookup(header: list[str], schema: Mapping[str, str], path: Path):
    def col(name: str, required: bool = True):
        actual = schema.get(name, name)
        if actual in header:
            return header.index(actual)
        if required:
            raise SchemaError(f"{path}: missing column {actual!r} (for {name})")
        return None

    return col


def _float(v: str, path: Path, row: int, name: str, allow_nan: bool = False) -> float:
    try:
        x = float(v)
    except ValueError:
        raise ParseError(f"{path}: row {row}: column {name!r} is not a number: {v!r}") from None
    if not math.isfinite(x) and not (allow_nan and math.isnan(x)):
        raise ParseError(f"{path}: row {row}: column {name!r} is not finite")
    return x


def read_sites(path, schema: Mapping[str, str] | None = None) -> list[Site]:
    path = Path(path)
    schema = schema or {}
    header, rows = _rows(path)
    col = _column_lookup(header, schema, path)
    i_id, i_x, i_y, i_v = col("site_id"), col("x_km"), col("y_km"), col("vs30", False)
    out = []
    for r, row in enumerate(rows):
        vs = _float(row[i_v], path, r, "vs30", True) if i_v is not None and row[i_v] != "" else float("nan")
        out.append(Site(row[i_id], _float(row[i_x], path, r, "x_km"), _float(row[i_y], path, r, "y_km"), vs))
    return out


def read_scenarios(path, schema: Mapping[str, str] | None = None) -> list[RuptureScenario]:
    path = Path(path)
    schema = schema or {}
    header, rows = _rows(path)
    col = _column_lookup(header, schema, path)
    idx = [col(c) for c in ("scenario_id", "magnitude", "annual_rate", "closest_point_x_km", "closest_point_y_km")]
    out = []
    for r, row in enumerate(rows):
        vals = [_float(row[i], path, r, n) for i, n in zip(idx[1:], ("magnitude", "annual_rate", "cx", "cy"))]
        out.append(RuptureScenario(row[idx[0]], *vals))
    return out


def read_variations(path, schema: Mapping[str, str] | None = None) -> list[RuptureVariation]:
    path = Path(path)
    schema = schema or {}
    header, rows = _rows(path)
    col = _column_lookup(header, schema, path)
    i_v, i_s = col("variation_id"), col("scenario_id")
    return [RuptureVariation(row[i_v], row[i_s]) for row in rows]


def ingest_catalog(
    paths: Mapping[str, object],
    schema: Mapping[str, str] | None = None,
    exclude_scenarios: Iterable[str] = (),
) -> ResidualCatalog:
    """Read site, scenario, (optional) variation and residual CSV files.

    ``paths`` has keys ``sites``, ``scenarios``, ``residuals`` (one path or a
    list) and optionally ``variations``. ``schema`` maps canonical column
    names to the names used in the files. When a residual file carries
    ``ln_psa`` instead of ``y`` the residual is ``ln_psa - backbone_mu``.
    """
    schema = dict(schema or {})
    for key in ("sites", "scenarios", "residuals"):
        if key not in paths:
            raise SchemaError(f"missing input path for {key!r}")
    for p in _as_list(paths["sites"]) + _as_list(paths["scenarios"]) + _as_list(paths["residuals"]):
        if not Path(p).exists():
            raise FileNotFoundError(f"input file not found: {p}")
    excluded = set(exclude_scenarios)
    sites = read_sites(paths["sites"], schema)
    scenarios = [s for s in read_scenarios(paths["scenarios"], schema) if s.scenario_id not in excluded]
    _check_sites(sites)
    _check_scenarios(scenarios)
    site_index = {s.site_id: i for i, s in enumerate(sites)}
    scen_index = {s.scenario_id: i for i, s in enumerate(scenarios)}

    var_scen: dict[str, str] = {}
    if paths.get("variations"):
        for v in read_variations(paths["variations"], schema):
            var_scen[v.variation_id] = v.scenario_id

    var_ids: list[str] = []
    var_code: dict[str, int] = {}
    var_scen_code: list[int] = []
    rec_v, rec_s, ys, mus, sigs = [], [], [], [], []
    row_base = 0
    for path in _as_list(paths["residuals"]):
        path = Path(path)
        header, rows = _rows(path)
        col = _column_lookup(header, schema, path)
        i_var, i_site = col("variation_id"), col("site_id")
        i_scen = col("scenario_id", required=not var_scen)
        i_y = col("y", required=False)
        i_mu = col("backbone_mu")
        i_sig = col("backbone_sigma")
        i_ln = None
        if i_y is None:
            i_ln = col("ln_psa", required=False)
            if i_ln is None:
                raise SchemaError(f"{path}: missing column {schema.get('y', 'y')!r} (or 'ln_psa')")
        n_rows = 0
        for r, row in enumerate(rows):
            n_rows = r + 1
            grow = row_base + r
            vid = row[i_var]
            sid_scen = row[i_scen] if i_scen is not None else var_scen.get(vid)
            if sid_scen is None:
                raise IntegrityError(f"row {grow}: variation {vid!r} has no scenario")
            if vid in var_scen and var_scen[vid] != sid_scen:
                raise IntegrityError(f"row {grow}: variation {vid!r} assigned to two scenarios")
            if sid_scen in excluded:
                continue
            if sid_scen not in scen_index:
                raise IntegrityError(f"row {grow}: unknown scenario_id {sid_scen!r}")
            site = row[i_site]
            if site not in site_index:
                raise IntegrityError(f"row {grow}: unknown site_id {site!r}")
            mu = _float(row[i_mu], path, r, "backbone_mu")
            sig = _float(row[i_sig], path, r, "backbone_sigma")
            if sig <= 0:
                raise ParseError(f"{path}: row {r}: backbone_sigma must be positive")
            if i_y is not None:
                y = _float(row[i_y], path, r, "y")
            else:
                y = _float(row[i_ln], path, r, "ln_psa") - mu
            code = var_code.get(vid)
            if code is None:
                code = var_code[vid] = len(var_ids)
                var_ids.append(vid)
                var_scen_code.append(scen_index[sid_scen])
                var_scen.setdefault(vid, sid_scen)
            elif var_scen_code[code] != scen_index[sid_scen]:
                raise IntegrityError(f"row {grow}: variation {vid!r} assigned to two scenarios")
            rec_v.append(code)
            rec_s.append(site_index[site])
            ys.append(y)
            mus.append(mu)
            sigs.append(sig)
        row_base += n_rows

    # variation codes follow sorted ids so the catalog does not depend on row order
    order = np.argsort(np.array(var_ids, dtype=object).astype(str), kind="stable") if var_ids else np.array([], int)
    remap = np.empty(len(var_ids), dtype=np.intp)
    remap[order] = np.arange(len(var_ids))
    return ResidualCatalog(
        sites,
        scenarios,
        np.array(var_ids, dtype=str)[order] if var_ids else np.array([], dtype=str),
        np.array(var_scen_code, dtype=np.intp)[order] if var_ids else np.array([], dtype=np.intp),
        remap[np.array(rec_v, dtype=np.intp)] if rec_v else np.array([], dtype=np.intp),
        np.array(rec_s, dtype=np.intp),
        np.array(ys, dtype=float),
        np.array(mus, dtype=float),
        np.array(sigs, dtype=float),
    )


def _as_list(p) -> list:
    if isinstance(p, (str, Path)):
        return [p]
    return list(p)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], units: str) -> None:
    """Write a CSV atomically with a leading ``# units:`` comment line."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# units: {units}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    tmp.replace(path)


def write_catalog(catalog: ResidualCatalog, outdir) -> dict[str, Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "sites": out / "sites.csv",
        "scenarios": out / "scenarios.csv",
        "variations": out / "variations.csv",
        "residuals": out / "residuals.csv",
    }
    write_csv(paths["sites"], ["site_id", "x_km", "y_km", "vs30"],
              ((s.site_id, s.x_km, s.y_km, s.vs30) for s in catalog.sites),
              "x_km,y_km: km; vs30: m/s")
    write_csv(paths["scenarios"],
              ["scenario_id", "magnitude", "annual_rate", "closest_point_x_km", "closest_point_y_km"],
              ((s.scenario_id, s.magnitude, s.annual_rate, s.closest_point_x_km, s.closest_point_y_km)
               for s in catalog.scenarios),
              "magnitude: Mw; annual_rate: 1/yr; coordinates: km")
    write_csv(paths["variations"], ["variation_id", "scenario_id"],
              ((v, catalog.scenarios[c].scenario_id) for v, c in zip(catalog.variation_ids, catalog.variation_scenario)),
              "identifiers only")
    scen = catalog.rec_scenario
    write_csv(paths["residuals"],
              ["variation_id", "scenario_id", "site_id", "y", "backbone_mu", "backbone_sigma"],
              ((catalog.variation_ids[catalog.rec_variation[i]], catalog.scenarios[scen[i]].scenario_id,
                catalog.sites[catalog.rec_site[i]].site_id, catalog.y[i], catalog.backbone_mu[i],
                catalog.backbone_sigma[i]) for i in range(len(catalog))),
              "y, backbone_mu, backbone_sigma: natural-log units of PSA in g")
    return paths


def write_means(table: ScenarioMeanTable, path) -> None:
    write_csv(path, ["scenario_id", "site_id", "y_bar", "n_variations", "backbone_mu", "backbone_sigma"],
              ((table.scenarios[a].scenario_id, table.sites[b].site_id, table.y_bar[i],
                int(table.n_variations[i]), table.backbone_mu[i], table.backbone_sigma[i])
               for i, (a, b) in enumerate(zip(table.scenario, table.site))),
              "y_bar, backbone_mu, backbone_sigma: natural-log units; n_variations: count")


def write_split_manifest(assign: SplitAssignment, path) -> None:
    p = Path(path)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_text(json.dumps(assign.to_manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(p)


def read_split_manifest(path) -> SplitAssignment:
    return SplitAssignment.from_manifest(json.loads(Path(path).read_text(encoding="utf-8")))
