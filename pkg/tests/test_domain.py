import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ngmm.domain import (IntegrityError, ParseError, ResidualCatalog, RuptureScenario, SchemaError, Site,
                         cell_deviations, collapse_to_means, ingest_catalog, n_test_for, read_split_manifest,
                         split, write_catalog, write_csv, write_means, write_split_manifest)


def _catalog(rows, n_sites=3):
    sites = [Site(f"s{i}", float(i), 0.0) for i in range(n_sites)]
    scen = [RuptureScenario("A", 6.5, 1e-3, 0.0, 0.0), RuptureScenario("B", 7.0, 1e-4, 5.0, 5.0)]
    vids = sorted({r[0] for r in rows})
    vscen = {"A1": 0, "A2": 0, "B1": 1}
    return ResidualCatalog(
        sites, scen, np.array(vids), np.array([vscen[v] for v in vids]),
        np.array([vids.index(r[0]) for r in rows]), np.array([r[1] for r in rows]),
        np.array([r[2] for r in rows], float), np.zeros(len(rows)), np.full(len(rows), 0.6))


ROWS = [("A1", 0, 0.1), ("A2", 0, 0.3), ("A1", 1, -0.2), ("B1", 2, 0.5), ("A2", 1, 0.0)]


def test_collapse_means_and_counts():
    t = collapse_to_means(_catalog(ROWS))
    got = {(r.scenario_id, r.site_id): (r.y_bar, r.n_variations) for r in t.records()}
    assert got[("A", "s0")] == (pytest.approx(0.2), 2)
    assert got[("A", "s1")] == (pytest.approx(-0.1), 2)
    assert got[("B", "s2")] == (0.5, 1)
    assert len(t) == 3


def test_collapse_single_variation_is_identity():
    t = collapse_to_means(_catalog([("B1", 0, 0.7), ("B1", 2, -0.1)]))
    assert np.array_equal(np.sort(t.y_bar), [-0.1, 0.7])


def test_deviations_sum_to_zero_per_cell():
    cat = _catalog(ROWS)
    dev = cell_deviations(cat)
    key = cat.rec_scenario * 10 + cat.rec_site
    for k in np.unique(key):
        assert abs(dev[key == k].sum()) < 1e-15


def test_duplicate_record_rejected():
    with pytest.raises(IntegrityError, match="duplicate"):
        _catalog(ROWS + [("A1", 0, 9.9)])


def test_row_order_does_not_matter():
    a = collapse_to_means(_catalog(ROWS))
    b = collapse_to_means(_catalog(ROWS[::-1]))
    assert np.array_equal(a.y_bar, b.y_bar) and np.array_equal(a.site, b.site)


@pytest.mark.parametrize("n,frac,k", [(335, 0.2, 67), (8358, 0.5, 4179), (2, 0.01, 1), (2, 0.99, 1), (10, 0.25, 3)])
def test_split_counts(n, frac, k):
    assert n_test_for(n, frac) == k


def test_split_disjoint_and_deterministic(tmp_path):
    sites = [f"s{i}" for i in range(20)]
    scen = [f"l{i}" for i in range(15)]
    a = split(sites, scen, 0.2, 0.4, seed=5)
    b = split(sites[::-1], scen[::-1], 0.2, 0.4, seed=5)
    assert a.site_role == b.site_role and a.scenario_role == b.scenario_role
    assert sum(v == "test" for v in a.site_role.values()) == 4
    assert sum(v == "test" for v in a.scenario_role.values()) == 6
    write_split_manifest(a, tmp_path / "s.json")
    c = read_split_manifest(tmp_path / "s.json")
    assert c.site_role == a.site_role and c.metadata["seed"] == 5
    labels = a.group_labels(["l0", "l1"], ["s0", "s1"])
    assert set(labels) <= {"TrTr", "TrTe", "TeTr", "TeTe"}


def test_split_rejects_degenerate_fraction():
    with pytest.raises(ValueError):
        split(["a", "b"], ["x", "y"], 0.0, 0.5, 0)


def _write(path, text):
    path.write_text(text)
    return path


@pytest.fixture
def raw(tmp_path):
    return {
        "sites": _write(tmp_path / "sites.csv", "site_id,x_km,y_km\ns0,0,0\ns1,1,0\n"),
        "scenarios": _write(tmp_path / "scen.csv",
                            "scenario_id,magnitude,annual_rate,closest_point_x_km,closest_point_y_km\nA,6.5,0.001,0,0\n"),
        "residuals": _write(tmp_path / "res.csv",
                            "# units: ln\nvariation_id,scenario_id,site_id,ln_psa,backbone_mu,backbone_sigma\n"
                            "A1,A,s0,-1.0,-1.5,0.6\nA1,A,s1,-2.0,-1.5,0.6\n"),
    }


def test_ingest_computes_residual_from_ln_psa(raw):
    cat = ingest_catalog(raw)
    assert np.allclose(np.sort(cat.y), [-0.5, 0.5])


def test_ingest_unknown_site_names_row(raw, tmp_path):
    raw["residuals"] = _write(tmp_path / "r2.csv",
                              "variation_id,scenario_id,site_id,y,backbone_mu,backbone_sigma\nA1,A,s0,0,0,0.6\n"
                              "A1,A,zz,0,0,0.6\n")
    with pytest.raises(IntegrityError, match="row 1"):
        ingest_catalog(raw)


def test_ingest_missing_column(raw, tmp_path):
    raw["residuals"] = _write(tmp_path / "r3.csv", "variation_id,scenario_id,site_id,backbone_mu,backbone_sigma\n")
    with pytest.raises(SchemaError):
        ingest_catalog(raw)


def test_ingest_missing_file(raw, tmp_path):
    raw["sites"] = tmp_path / "nope.csv"
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        ingest_catalog(raw)


def test_ingest_bad_sigma(raw, tmp_path):
    raw["residuals"] = _write(tmp_path / "r4.csv",
                              "variation_id,scenario_id,site_id,y,backbone_mu,backbone_sigma\nA1,A,s0,0,0,-1\n")
    with pytest.raises(ParseError):
        ingest_catalog(raw)


def test_ingest_schema_mapping(raw, tmp_path):
    # one mapping applies to every input file
    raw["sites"] = _write(tmp_path / "s2.csv", "station,x_km,y_km\ns0,0,0\n")
    raw["residuals"] = _write(tmp_path / "r5.csv",
                              "event,scenario_id,station,resid,backbone_mu,backbone_sigma\nA1,A,s0,0.25,0,0.6\n")
    cat = ingest_catalog(raw, schema={"variation_id": "event", "site_id": "station", "y": "resid"})
    assert cat.y.tolist() == [0.25]


def test_write_then_ingest_roundtrip(tmp_path, small_synth):
    cat = small_synth.catalog
    paths = write_catalog(cat, tmp_path / "cat")
    back = ingest_catalog(paths)
    assert np.array_equal(back.y, cat.y) and np.array_equal(back.rec_site, cat.rec_site)
    assert back.variation_ids.tolist() == cat.variation_ids.tolist()
    first = (tmp_path / "cat" / "residuals.csv").read_text().splitlines()[0]
    assert first.startswith("# units:")
    write_means(collapse_to_means(cat), tmp_path / "m.csv")
    assert not list(tmp_path.glob("**/*.tmp"))


def test_write_csv_is_atomic_on_failure(tmp_path):
    target = tmp_path / "out.csv"
    target.write_text("old\n")

    def rows():
        yield [1.0]
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        write_csv(target, ["a"], rows(), "a: none")
    assert target.read_text() == "old\n"


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=8), st.integers(0, 1000))
def test_collapse_preserves_total(vals, seed):
    rng = np.random.default_rng(seed)
    rows = [(v, int(rng.integers(0, 3)), y) for v, y in zip(rng.choice(["A1", "A2", "B1"], len(vals)), vals)]
    seen, uniq = set(), []
    for r in rows:
        if (r[0], r[1]) not in seen:
            seen.add((r[0], r[1]))
            uniq.append(r)
    cat = _catalog(uniq)
    t = collapse_to_means(cat)
    assert np.isclose((t.y_bar * t.n_variations).sum(), cat.y.sum())
