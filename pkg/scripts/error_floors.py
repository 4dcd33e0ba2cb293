"""Prediction and interpolation RMSE against individual records as the observation set grows.

One synthetic instance is generated and the evaluation records are fixed;
only the number of observed training scenarios changes (nested subsets), so
the curve isolates the effect of observation density from the draw of the
aleatory noise. With the secondary noise switched off the scenario means are
a pure kernel field, and prediction RMSE tends to sqrt(tau_ddot2 + phi_ddot2).

    python scripts/error_floors.py [--sites 60] [--scenarios 160]
"""
from __future__ import annotations

import argparse
import time
import warnings

import numpy as np

from ngmm.config import HyperParams
from ngmm.domain import collapse_to_means, split
from ngmm.inference import build_factor, interpolate, predict
from ngmm.kernels import PointSet
from ngmm.synth import SynthSpec, generate

FRACTIONS = (0.125, 0.25, 0.5, 1.0)


def floors(params: HyperParams) -> dict:
    return {"prediction": float(np.sqrt(params.tau_ddot2 + params.phi_ddot2)),
            "interpolation": float(np.sqrt(params.phi_ddot2))}


def density_sweep(params, n_sites=60, n_scenarios=160, variations=10, seed=0, fractions=FRACTIONS, rho=2.0):
    """RMSE per mode for nested subsets of the training scenarios.

    Prediction is scored on held-out scenarios at training sites; interpolation
    on held-out sites for the variations of scenarios observed in every subset.
    """
    res = generate(SynthSpec(n_sites=n_sites, n_scenarios=n_scenarios, variations=variations, params=params,
                             seed=seed, sampler="auto"))
    cat = res.catalog
    assign = split(cat.sites, cat.scenarios, 0.2, 0.2, seed)
    rlab = assign.catalog_labels(cat)
    train_scen = np.flatnonzero(assign.scenario_is_train([s.scenario_id for s in cat.scenarios]))
    train_scen = np.random.default_rng(seed + 1).permutation(train_scen)
    # the scenario means carry the averaged primary scatter; the secondary noise terms absorb it
    fit = params.replace(tau_dot2=params.tau_dot2 + params.tau_ddot2 / variations,
                         phi_dot2=params.phi_dot2 + params.phi_ddot2 / variations)

    def points(sel):
        return PointSet(cat.site_xy[cat.rec_site[sel]], cat.scenario_xy[cat.rec_scenario[sel]], cat.rec_scenario[sel])

    core = train_scen[:max(1, int(round(fractions[0] * len(train_scen))))]
    pred_sel = rlab == "TeTr"
    interp_sel = (rlab == "TrTe") & np.isin(cat.rec_scenario, core)
    rows = []
    for f in fractions:
        keep = train_scen[:max(1, int(round(f * len(train_scen))))]
        obs_cat = cat.subset((rlab == "TrTr") & np.isin(cat.rec_scenario, keep))
        obs = collapse_to_means(obs_cat)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            factor = build_factor(obs, fit, rho=rho)
            p = predict(obs, points(pred_sel), fit, factor)
            i = interpolate(obs_cat, points(interp_sel), cat.variation_ids[cat.rec_variation[interp_sel]].tolist(),
                            fit, factor, obs_table=obs)
        rows.append({
            "fraction": f, "n_obs": len(obs),
            "prediction": float(np.sqrt(np.mean((cat.y[pred_sel] - p.mean) ** 2))),
            "interpolation": float(np.sqrt(np.mean((cat.y[interp_sel] - i.mean) ** 2))),
        })
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sites", type=int, default=60)
    ap.add_argument("--scenarios", type=int, default=160)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    base = HyperParams.preset("ngmm1")
    fl = floors(base)
    print(f"floors: prediction {fl['prediction']:.3f}, interpolation {fl['interpolation']:.3f}")
    for name, p in (("ngmm1", base), ("ngmm1, no secondary noise", base.replace(tau_dot2=0.0, phi_dot2=0.0))):
        t0 = time.time()
        for r in density_sweep(p, args.sites, args.scenarios, seed=args.seed):
            print(f"{name:26s} observed cells {r['n_obs']:6d}  prediction {r['prediction']:.4f}  "
                  f"interpolation {r['interpolation']:.4f}", flush=True)
        print(f"  ({time.time() - t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
