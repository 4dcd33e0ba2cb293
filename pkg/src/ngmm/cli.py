"""Command-line entry point: ``ngmm <subcommand> [options]``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, HyperParams, PRESETS, config_hash, hyperparams_from_config, load_config
from .domain import (CatalogError, _rows, cell_deviations, collapse_to_means,
                     ingest_catalog, read_split_manifest, split, write_catalog, write_csv, write_means,
                     write_split_manifest)
from .fragility import FragilityError, read_facilities, read_fragility, sample_damage, write_damage
from .hazard import (HazardError, IntensityGrid, curve_distance, empirical_curve, gmm_curve, ngmm_analytic_curve,
                     ngmm_curve)
from .inference import (ObservationSolver, StaleFactorError, build_factor, evaluate_groups, interpolate, predict)
from .kernels import PointSet
from .klsc import load_factor, save_factor
from .lmm import LMMError, VarianceComponents, fit_mle, summarize_events
from .synth import SynthSpec, SynthSizeError, generate
from .trainer import TrainConfig, TrainingError, fit, write_trace

log = logging.getLogger("ngmm")

SECTIONS = {"hyperparams", "variance_components", "synth", "split", "tune", "predict", "hazard", "damage", "ingest"}


# ----------------------------------------------------------------------------- helpers

def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def _catalog_paths(d) -> dict:
    d = Path(d)
    paths = {k: d / f"{k}.csv" for k in ("sites", "scenarios", "residuals")}
    if (d / "variations.csv").exists():
        paths["variations"] = d / "variations.csv"
    return paths


def _load_catalog(d):
    return ingest_catalog(_catalog_paths(d))


def _setting(args, cfg, section, key, default):
    """CLI flag beats the config file, which beats the built-in default."""
    v = getattr(args, key, None)
    if v is not None:
        return v
    return cfg.get(section, {}).get(key, default)


def _params(args, cfg) -> HyperParams:
    if getattr(args, "hyperparams", None):
        d = json.loads(Path(args.hyperparams).read_text(encoding="utf-8"))
        return HyperParams.from_dict(d)
    return hyperparams_from_config(cfg, getattr(args, "preset", None) or ("ngmm1" if not cfg.get("hyperparams") else None))


def _inputs(args) -> list[Path]:
    out = []
    for key in ("catalog",):
        v = getattr(args, key, None)
        if v:
            out += [p for p in _catalog_paths(v).values()]
    for key in ("split", "hyperparams", "components", "predictions", "points", "facilities", "fragility",
                "fields", "sites", "scenarios", "residuals", "variations", "config"):
        v = getattr(args, key, None)
        if v and not (key == "variations" and args.command != "ingest"):
            out.append(Path(v))
    return out


def _check_inputs(args) -> list[Path]:
    paths = _inputs(args)
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"input file not found: {p}")
    return paths


def _manifest(out: Path, args, cfg, inputs, seeds: dict, t0: float) -> None:
    _write_json(out / "manifest.json", {
        "command": args.command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",) and v is not None},
        "config_hash": config_hash(cfg),
        "seeds": seeds,
        "inputs": {str(p): _digest(p) for p in inputs},
        "versions": {"ngmm": __version__, "numpy": np.__version__},
        "wall_time_s": round(time.time() - t0, 3),
    })


def _split_or_none(args):
    return read_split_manifest(args.split) if getattr(args, "split", None) else None


# ----------------------------------------------------------------------------- subcommands

def cmd_synth(args, cfg, out):
    sc = cfg.get("synth", {})
    params = _params(args, cfg)
    variations = _setting(args, cfg, "synth", "variations", 10)
    spec = SynthSpec(
        n_sites=_setting(args, cfg, "synth", "n_sites", 50),
        site_extent_km=float(sc.get("site_extent_km", 60.0)),
        n_scenarios=_setting(args, cfg, "synth", "n_scenarios", 50),
        src_extent_km=float(sc.get("src_extent_km", 80.0)),
        variations=tuple(variations) if isinstance(variations, list) else int(variations),
        params=params, seed=args.seed, sampler=_setting(args, cfg, "synth", "sampler", "auto"),
        n_features=int(sc.get("n_features", 4096)),
    )
    if args.dry_run:
        return {"synth": spec.seed}
    res = generate(spec)
    write_catalog(res.catalog, out)
    cat, tr = res.catalog, res.truth
    td = out / "truth"
    td.mkdir(exist_ok=True)
    write_csv(td / "sites.csv", ["site_id", "delta_s2s"],
              ((s.site_id, v) for s, v in zip(cat.sites, tr.site_term)), "delta_s2s: ln units")
    write_csv(td / "scenarios.csv", ["scenario_id", "delta_b_dot"],
              ((s.scenario_id, v) for s, v in zip(cat.scenarios, tr.between_dot)), "delta_b_dot: ln units")
    write_csv(td / "cells.csv", ["scenario_id", "site_id", "delta_p2p", "delta_w_dot", "ybar_latent"],
              ((cat.scenarios[l].scenario_id, cat.sites[s].site_id, tr.path_term[l, s], tr.within_dot[l, s],
                tr.ybar_latent[l, s]) for l in range(len(cat.scenarios)) for s in range(len(cat.sites))),
              "ln units")
    write_csv(td / "variations.csv", ["variation_id", "delta_b_ddot"],
              zip(cat.variation_ids.tolist(), tr.between_ddot), "delta_b_ddot: ln units")
    write_csv(td / "records.csv", ["variation_id", "site_id", "delta_w_ddot"],
              ((cat.variation_ids[cat.rec_variation[i]], cat.sites[cat.rec_site[i]].site_id, tr.within_ddot[i])
               for i in range(len(cat))), "delta_w_ddot: ln units")
    _write_json(td / "hyperparams.json", params.to_dict())
    return {"synth": spec.seed}


def cmd_ingest(args, cfg, out):
    paths = {"sites": args.sites, "scenarios": args.scenarios, "residuals": args.residuals}
    if args.variations:
        paths["variations"] = args.variations
    ic = cfg.get("ingest", {})
    cat = ingest_catalog(paths, ic.get("schema"), ic.get("exclude_scenarios", ()))
    if not args.dry_run:
        write_catalog(cat, out)
    return {}


def cmd_collapse(args, cfg, out):
    cat = _load_catalog(args.catalog)
    if not args.dry_run:
        write_means(collapse_to_means(cat), out / "means.csv")
    return {}


def cmd_split(args, cfg, out):
    cat = _load_catalog(args.catalog)
    sf = float(_setting(args, cfg, "split", "site_test_frac", 0.2))
    lf = float(_setting(args, cfg, "split", "scenario_test_frac", 0.2))
    assign = split(cat.sites, cat.scenarios, sf, lf, args.seed)
    if not args.dry_run:
        write_split_manifest(assign, out / "split.json")
    return {"split": args.seed}


def _train_mask_records(cat, assign):
    return np.ones(len(cat), bool) if assign is None else assign.catalog_labels(cat) == "TrTr"


def cmd_fit_lmm(args, cfg, out):
    cat = _load_catalog(args.catalog)
    assign = _split_or_none(args)
    sub = cat.subset(_train_mask_records(cat, assign))
    if args.dry_run:
        return {}
    dev = cell_deviations(sub)
    summ = summarize_events(sub.variation_ids[sub.rec_variation], dev)
    comp, rep = fit_mle(summ)
    _write_json(out / "variance_components.json", {
        "tau_ddot2": comp.tau_ddot2, "phi_ddot2": comp.phi_ddot2,
        "converged": rep.converged, "iterations": rep.iterations, "grad_norm": rep.grad_norm,
        "loglik": rep.loglik, "n_events": len(summ), "n_records": int(summ.n.sum()),
    })
    return {}


def _with_components(params: HyperParams, path) -> HyperParams:
    if not path:
        return params
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return params.replace(tau_ddot2=float(d["tau_ddot2"]), phi_ddot2=float(d["phi_ddot2"]))


def cmd_tune(args, cfg, out):
    cat = _load_catalog(args.catalog)
    assign = _split_or_none(args)
    table = collapse_to_means(cat)
    if assign is not None:
        table = table.subset(assign.table_labels(table) == "TrTr")
    init = _with_components(_params(args, cfg), args.components)
    tc = dict(cfg.get("tune", {}))
    for key in ("batch_size", "epochs", "learning_rate"):
        v = getattr(args, key)
        if v is not None:
            tc[key] = v
    tc["seed"] = args.seed
    unknown = set(tc) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown tune settings: {sorted(unknown)}")
    if "tune" in tc:
        tc["tune"] = tuple(tc["tune"])
    config = TrainConfig(**tc)
    if args.dry_run:
        return {"tune": args.seed}
    try:
        params, trace = fit(table, config, init)
    except TrainingError as exc:
        if exc.last_params is not None:
            _write_json(out / "hyperparams_last.json", exc.last_params.to_dict())
        raise
    _write_json(out / "hyperparams.json", params.to_dict())
    write_trace(trace, out / "trace.csv")
    return {"tune": args.seed}


def _points_from_csv(path, cat):
    """Columns: point_id, site_x_km, site_y_km, scenario_id [, variation_id, backbone_mu, backbone_sigma]."""
    header, rows = _rows(Path(path))
    idx = {h: i for i, h in enumerate(header)}
    for col in ("point_id", "site_x_km", "site_y_km", "scenario_id"):
        if col not in idx:
            raise CatalogError(f"{path}: missing column {col!r}")
    scen_code = {s.scenario_id: i for i, s in enumerate(cat.scenarios)}
    rows = list(rows)
    ids, sxy, code, var, mu, sig = [], [], [], [], [], []
    next_code = len(cat.scenarios)
    extra = {}
    src = []
    for r in rows:
        sid = r[idx["scenario_id"]]
        ids.append(r[idx["point_id"]])
        sxy.append((float(r[idx["site_x_km"]]), float(r[idx["site_y_km"]])))
        if sid in scen_code:
            c = scen_code[sid]
            sc = cat.scenarios[c]
            src.append((sc.closest_point_x_km, sc.closest_point_y_km))
        else:
            if "src_x_km" not in idx:
                raise CatalogError(f"{path}: scenario {sid!r} not in catalog and no src_x_km/src_y_km given")
            c = extra.setdefault(sid, next_code + len(extra))
            src.append((float(r[idx["src_x_km"]]), float(r[idx["src_y_km"]])))
        code.append(c)
        var.append(r[idx["variation_id"]] if "variation_id" in idx and r[idx["variation_id"]] else None)
        mu.append(float(r[idx["backbone_mu"]]) if "backbone_mu" in idx else np.nan)
        sig.append(float(r[idx["backbone_sigma"]]) if "backbone_sigma" in idx else np.nan)
    pts = PointSet(np.array(sxy).reshape(-1, 2), np.array(src).reshape(-1, 2), np.array(code, dtype=np.intp))
    scen_names = [cat.scenarios[c].scenario_id if c < len(cat.scenarios) else
                  next(k for k, v in extra.items() if v == c) for c in code]
    return ids, pts, var, np.array(mu), np.array(sig), scen_names


def _solver(args, obs_table, params, rho, workers):
    if getattr(args, "factor", None):
        factor = load_factor(args.factor)
        return ObservationSolver(obs_table, params, factor)
    if args.dense:
        return ObservationSolver(obs_table, params, None)
    factor = build_factor(obs_table, params, rho=rho, workers=workers)
    return ObservationSolver(obs_table, params, factor)


PRED_COLUMNS = ["point_id", "scenario_id", "site_id", "variation_id", "group", "mode", "mean", "std", "kernel_var",
                "tau_dot2", "phi_dot2", "tau_ddot2", "phi_ddot2", "backbone_mu", "backbone_sigma", "annual_rate"]
PRED_UNITS = "mean, std: ln units; *_var, tau*, phi*: ln units squared; backbone_*: ln PSA (g); annual_rate: 1/yr"


def _write_predictions(path, ids, scen, site, var, group, res, mu, sig, rate):
    a = res.aleatory
    write_csv(path, PRED_COLUMNS, (
        [ids[i], scen[i], site[i], var[i] or "", group[i], res.mode, res.mean[i], res.std[i], res.kernel_var[i],
         a["tau_dot2"][i], a["phi_dot2"][i], a["tau_ddot2"][i], a["phi_ddot2"][i], mu[i], sig[i], rate[i]]
        for i in range(len(res))), PRED_UNITS)


def _sample_fields(path, res, mu, ids, n_real, seed, obs_table, pred_pts, params, solver):
    """Joint posterior draws of ln PSA at the prediction points (dense covariance)."""
    from .inference import _dense_pred_cov
    C = _dense_pred_cov(obs_table, pred_pts, params, solver, res.aleatory)
    w, V = np.linalg.eigh(C)
    Lh = V * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_real, len(w)))
    draws = res.mean[None, :] + z @ Lh.T + mu[None, :]
    write_csv(path, ["realization", "point_id", "psa_g"],
              ([r, ids[i], float(np.exp(draws[r, i]))] for r in range(n_real) for i in range(len(ids))),
              "psa_g: g")


def _targets(cat, assign, table, level):
    """Indices of non-training cells (level='cell') or records (level='record')."""
    if level == "cell":
        lab = assign.table_labels(table) if assign is not None else np.full(len(table), "TrTr")
        return lab
    return assign.catalog_labels(cat) if assign is not None else np.full(len(cat), "TrTr")


def cmd_predict(args, cfg, out):
    cat = _load_catalog(args.catalog)
    assign = _split_or_none(args)
    params = _with_components(_params(args, cfg), args.components)
    table = collapse_to_means(cat)
    lab = _targets(cat, assign, table, "cell")
    obs = table.subset(lab == "TrTr")
    rho = float(_setting(args, cfg, "predict", "rho", 2.0))
    if args.dry_run:
        return {}
    solver = _solver(args, obs, params, rho, args.workers)
    if args.points:
        ids, pts, var, mu, sig, scen = _points_from_csv(args.points, cat)
        site = [""] * len(ids)
        group = [""] * len(ids)
        rate = [np.nan] * len(ids)
    else:
        sel = np.flatnonzero(lab != "TrTr") if assign is not None else np.arange(len(table))
        tsub = table.subset(sel)
        pts = tsub.points()
        scen = [cat.scenarios[c].scenario_id for c in tsub.scenario]
        site = [cat.sites[s].site_id for s in tsub.site]
        ids = [f"{a}|{b}" for a, b in zip(scen, site)]
        var = [None] * len(ids)
        group = list(lab[sel])
        mu, sig = tsub.backbone_mu, tsub.backbone_sigma
        rate = [cat.scenarios[c].annual_rate for c in tsub.scenario]
    res = predict(obs, pts, params, solver, workers=args.workers)
    _write_predictions(out / "predictions.csv", ids, scen, site, var, group, res, mu, sig, rate)
    if args.save_factor and solver.factor is not None:
        save_factor(solver.factor, out / "factor.npz", solver.factor.meta["fingerprint"])
    if not args.points:
        _record_metrics(out, cat, assign, table, sel, res)
    if args.realizations:
        _sample_fields(out / "fields.csv", res, np.nan_to_num(np.asarray(mu, float)), ids, args.realizations,
                       args.seed, obs, pts, params, solver)
    return {"fields": args.seed} if args.realizations else {}


def _record_metrics(out, cat, assign, table, sel, res):
    if assign is None:
        return
    n_site = len(cat.sites)
    key = table.scenario[sel].astype(np.int64) * n_site + table.site[sel]
    rkey = cat.rec_scenario.astype(np.int64) * n_site + cat.rec_site
    order = np.argsort(key)
    pos = np.searchsorted(key[order], rkey)
    pos = np.clip(pos, 0, len(key) - 1)
    hit = key[order][pos] == rkey
    mean = np.zeros(len(cat))
    std = np.zeros(len(cat))
    mean[hit] = res.mean[order][pos[hit]]
    std[hit] = res.std[order][pos[hit]]
    _write_metrics(out, evaluate_groups(cat, mean, std, assign, mask=hit))


def _write_metrics(out, metrics):
    write_csv(out / "metrics.csv", ["group", "n_records", "rmse_y", "rmse_ybar", "mean_std", "rmse_backbone",
                                    "reduction", "present"],
              ([m.group, m.n_records, m.rmse_y, m.rmse_ybar, m.mean_std, m.rmse_backbone, m.reduction,
                int(m.present)] for m in metrics),
              "rmse_*, mean_std: ln units; reduction: fraction")


def cmd_interpolate(args, cfg, out):
    cat = _load_catalog(args.catalog)
    assign = _split_or_none(args)
    params = _with_components(_params(args, cfg), args.components)
    rlab = _targets(cat, assign, None, "record")
    obs_cat = cat.subset(rlab == "TrTr")
    obs_table = collapse_to_means(obs_cat)
    rho = float(_setting(args, cfg, "predict", "rho", 2.0))
    if args.dry_run:
        return {}
    solver = _solver(args, obs_table, params, rho, args.workers)
    comps = VarianceComponents(params.tau_ddot2, params.phi_ddot2, params.tau_dot2, params.phi_dot2)
    if args.points:
        ids, pts, var, mu, sig, scen = _points_from_csv(args.points, cat)
        site = [""] * len(ids)
        group = [""] * len(ids)
        rate = [np.nan] * len(ids)
    else:
        sel = np.flatnonzero(rlab != "TrTr") if assign is not None else np.arange(len(cat))
        pts = PointSet(cat.site_xy[cat.rec_site[sel]], cat.scenario_xy[cat.rec_scenario[sel]], cat.rec_scenario[sel])
        scen = [cat.scenarios[c].scenario_id for c in cat.rec_scenario[sel]]
        site = [cat.sites[s].site_id for s in cat.rec_site[sel]]
        var = cat.variation_ids[cat.rec_variation[sel]].tolist()
        ids = [f"{v}|{s}" for v, s in zip(var, site)]
        group = list(rlab[sel])
        mu, sig = cat.backbone_mu[sel], cat.backbone_sigma[sel]
        nv = np.bincount(cat.variation_scenario, minlength=len(cat.scenarios))
        rate = [cat.scenarios[c].annual_rate / nv[c] for c in cat.rec_scenario[sel]]
    res = interpolate(obs_cat, pts, var, params, solver, comps, obs_table, workers=args.workers)
    _write_predictions(out / "predictions.csv", ids, scen, site, var, group, res, mu, sig, rate)
    if not args.points and assign is not None:
        mean = np.zeros(len(cat))
        std = np.zeros(len(cat))
        mean[sel] = res.mean
        std[sel] = res.std
        mask = np.zeros(len(cat), bool)
        mask[sel] = True
        _write_metrics(out, evaluate_groups(cat, mean, std, assign, mask=mask))
    return {}


def _read_predictions(path):
    header, rows = _rows(Path(path))
    idx = {h: i for i, h in enumerate(header)}
    missing = set(PRED_COLUMNS) - set(idx)
    if missing:
        raise CatalogError(f"{path}: missing columns {sorted(missing)}")
    cols = {k: [] for k in PRED_COLUMNS}
    for r in rows:
        for k in PRED_COLUMNS:
            cols[k].append(r[idx[k]])
    num = ("mean", "std", "kernel_var", "tau_dot2", "phi_dot2", "tau_ddot2", "phi_ddot2", "backbone_mu",
           "backbone_sigma", "annual_rate")
    return {k: (np.array(v, dtype=float) if k in num else v) for k, v in cols.items()}


def cmd_hazard(args, cfg, out):
    cat = _load_catalog(args.catalog)
    pr = _read_predictions(args.predictions)
    hc = cfg.get("hazard", {})
    grid = IntensityGrid.logspace(float(hc.get("x_min_g", 1e-3)), float(hc.get("x_max_g", 3.0)),
                                  int(hc.get("n_points", 40)))
    n_real = int(_setting(args, cfg, "hazard", "realizations", 1000))
    summary = _setting(args, cfg, "hazard", "summary", "median")
    if args.dry_run:
        return {"hazard": args.seed}
    if any(not s for s in pr["site_id"]):
        raise CatalogError("hazard needs catalog-aligned predictions (site_id column filled)")
    site_code = {s.site_id: i for i, s in enumerate(cat.sites)}
    scen_code = {s.scenario_id: i for i, s in enumerate(cat.scenarios)}
    psa = np.exp(cat.y + cat.backbone_mu)
    sites = sorted(set(pr["site_id"]), key=lambda s: site_code[s])
    curve_rows, metric_rows = [], []
    mode = np.array(pr["mode"])
    for k, sid in enumerate(sites):
        sel = np.flatnonzero(np.array(pr["site_id"]) == sid)
        rate = pr["annual_rate"][sel]
        a = {key: pr[key][sel] for key in ("tau_dot2", "phi_dot2", "tau_ddot2", "phi_ddot2")}
        interp = mode[sel] == "interpolation"
        alea = np.where(interp, a["phi_dot2"] + a["phi_ddot2"],
                        a["tau_dot2"] + a["phi_dot2"] + a["tau_ddot2"] + a["phi_ddot2"])
        epi = pr["kernel_var"][sel] + np.where(interp, a["tau_ddot2"], 0.0)
        mu = pr["backbone_mu"][sel] + pr["mean"][sel]
        g = gmm_curve(rate, pr["backbone_mu"][sel], pr["backbone_sigma"][sel], grid)
        n = ngmm_curve(rate, mu, alea, epi, n_real, args.seed + k, summary, grid)
        an = ngmm_analytic_curve(rate, mu, alea, epi, grid)
        scen_here = sorted({scen_code[s] for s in np.array(pr["scenario_id"])[sel]})
        s_idx = site_code[sid]
        vals = [psa[(cat.rec_site == s_idx) & (cat.rec_scenario == c)] for c in scen_here]
        e = empirical_curve([cat.scenarios[c].annual_rate for c in scen_here], vals, grid)
        for j, x in enumerate(grid.values):
            curve_rows.append([sid, x, g.rates[j], n.rates[j], an.rates[j], e.rates[j]])
        metric_rows.append([sid, curve_distance(g, e, "ks"), curve_distance(n, e, "ks"),
                            curve_distance(g, e, "mae"), curve_distance(n, e, "mae")])
    write_csv(out / "hazard_curves.csv", ["site_id", "psa_g", "gmm", "ngmm", "ngmm_analytic", "empirical"],
              curve_rows, "psa_g: g; rates: 1/yr")
    write_csv(out / "hazard_metrics.csv", ["site_id", "ks_gmm", "ks_ngmm", "mae_gmm", "mae_ngmm"], metric_rows,
              "distances: 1/yr")
    return {"hazard": args.seed}


def cmd_damage(args, cfg, out):
    fids, _, ratios = read_facilities(args.facilities)
    fs = read_fragility(args.fragility)
    header, rows = _rows(Path(args.fields))
    idx = {h: i for i, h in enumerate(header)}
    for col in ("realization", "point_id", "psa_g"):
        if col not in idx:
            raise CatalogError(f"{args.fields}: missing column {col!r}")
    pos = {f: i for i, f in enumerate(fids)}
    fields = {}
    for r in rows:
        pid = r[idx["point_id"]]
        if pid in pos:
            fields.setdefault(int(r[idx["realization"]]), np.full(len(fids), np.nan))[pos[pid]] = float(r[idx["psa_g"]])
    F = np.array([fields[k] for k in sorted(fields)])
    if F.size == 0 or np.isnan(F).any():
        raise CatalogError("field realizations do not cover every facility")
    draws = int(cfg.get("damage", {}).get("draws_per_field", 1))
    if args.dry_run:
        return {"damage": args.seed}
    summ = sample_damage(F, fs, ratios, seed=args.seed, draws_per_field=draws)
    write_damage(summ, fids, out)
    return {"damage": args.seed}


# ----------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned JSON config file")
    common.add_argument("--workers", type=int, default=1, help="thread pool size")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--dry-run", action="store_true", help="validate inputs without computing")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ngmm", description="Scalable non-ergodic ground-motion GP toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    s = add("synth", cmd_synth, "generate a synthetic catalog with truth sidecar")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--hyperparams")
    s.add_argument("--n-sites", dest="n_sites", type=int)
    s.add_argument("--n-scenarios", dest="n_scenarios", type=int)
    s.add_argument("--variations", type=int)
    s.add_argument("--sampler", choices=("dense", "fourier", "auto"))

    s = add("ingest", cmd_ingest, "validate raw CSVs and write a canonical catalog")
    for k in ("sites", "scenarios", "residuals"):
        s.add_argument(f"--{k}", required=True)
    s.add_argument("--variations")

    s = add("collapse", cmd_collapse, "per-(scenario, site) mean residuals")
    s.add_argument("--catalog", required=True)

    s = add("split", cmd_split, "random site/scenario train-test split")
    s.add_argument("--catalog", required=True)
    s.add_argument("--site-test-frac", dest="site_test_frac", type=float)
    s.add_argument("--scenario-test-frac", dest="scenario_test_frac", type=float)

    s = add("fit-lmm", cmd_fit_lmm, "fit primary between/within-event variances")
    s.add_argument("--catalog", required=True)
    s.add_argument("--split")

    s = add("tune", cmd_tune, "fit kernel and secondary-noise parameters")
    s.add_argument("--catalog", required=True)
    s.add_argument("--split")
    s.add_argument("--preset", choices=sorted(PRESETS), help="initial values")
    s.add_argument("--hyperparams", help="initial values from a JSON file")
    s.add_argument("--components", help="variance_components.json from fit-lmm")
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--learning-rate", dest="learning_rate", type=float)

    for name, func in (("predict", cmd_predict), ("interpolate", cmd_interpolate)):
        s = add(name, func, f"{name}-mode posterior")
        s.add_argument("--catalog", required=True)
        s.add_argument("--split")
        s.add_argument("--preset", choices=sorted(PRESETS))
        s.add_argument("--hyperparams")
        s.add_argument("--components")
        s.add_argument("--points", help="CSV of prediction points")
        s.add_argument("--rho", type=float)
        s.add_argument("--factor", help="previously saved factor.npz")
        s.add_argument("--dense", action="store_true", help="exact dense solve instead of the sparse factor")
        if name == "predict":
            s.add_argument("--save-factor", dest="save_factor", action="store_true")
            s.add_argument("--realizations", type=int, default=0, help="also write joint ln-PSA field draws")

    s = add("hazard", cmd_hazard, "hazard curves and distances per site")
    s.add_argument("--catalog", required=True)
    s.add_argument("--predictions", required=True)
    s.add_argument("--realizations", type=int)
    s.add_argument("--summary", choices=("median", "mean"))

    s = add("damage", cmd_damage, "sample facility damage states")
    s.add_argument("--facilities", required=True)
    s.add_argument("--fragility", required=True)
    s.add_argument("--fields", required=True)
    return p


ERRORS = (CatalogError, ConfigError, LMMError, TrainingError, StaleFactorError, HazardError, FragilityError,
          SynthSizeError, FileNotFoundError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.time()
    try:
        cfg = load_config(args.config)
        unknown = set(cfg) - SECTIONS
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        inputs = _check_inputs(args)
        out = Path(args.out)
        if not args.dry_run:
            out.mkdir(parents=True, exist_ok=True)
        seeds = args.func(args, cfg, out)
        if not args.dry_run:
            _manifest(out, args, cfg, inputs, seeds or {}, t0)
    except ERRORS as exc:
        print(f"ngmm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
