"""Freezes an external Cox reference for reference_study.csv.

Fits each event type separately with lifelines (Efron ties) for the
coefficients and model-based inverse information, then assembles the
stacked robust covariance
    V = blockdiag(I_k^-1) (sum_i r_i r_i') blockdiag(I_k^-1)
from exact Efron score residuals computed here. (lifelines' own score
residuals approximate the tied-time terms and differ by a few percent on
this heavily tied grid.)
Usage: python3 reference_cox.py reference_study.csv reference_cox.json
"""
import json
import sys

import numpy as np
import pandas as pd
from lifelines import CoxPHFitter



def efron_residuals(x, t, e, beta):
    risk_score = np.exp(x @ beta)
    out = np.zeros_like(x, dtype=float)
    for u in np.unique(t[e == 1]):
        at_risk = t >= u
        dead = at_risk & (t == u) & (e == 1)
        d = dead.sum()
        s0 = (risk_score * at_risk).sum()
        s1 = (risk_score[:, None] * x * at_risk[:, None]).sum(0)
        d0 = (risk_score * dead).sum()
        d1 = (risk_score[:, None] * x * dead[:, None]).sum(0)
        for r in range(d):
            f = r / d
            denom = s0 - f * d0
            zbar = (s1 - f * d1) / denom
            out[dead] += (x[dead] - zbar) / d
            share = np.where(dead, 1 - f, 1.0) * at_risk
            out -= (share * risk_score / denom)[:, None] * (x - zbar)
    return out


src, dst = sys.argv[1], sys.argv[2]
rows = pd.read_csv(src)
covs = sorted(c for c in rows.columns if c.startswith("z_"))
betas, infos_inv, resid = [], [], []
ids = None
for k in sorted(rows.event_type.unique()):
    ev = rows[rows.event_type == k].sort_values(["subject_id", "time"])
    per = []
    for sid, g in ev.groupby("subject_id", sort=True):
        g = g[g.time <= g.censor_time]
        hit = g[g.true_status == 1]
        if len(hit):
            t, d = hit.time.iloc[0], 1
        else:
            t, d = g.censor_time.iloc[0], 0
        per.append({"id": sid, "T": t, "E": d, **{c: g[c].iloc[0] for c in covs}})
    df = pd.DataFrame(per).set_index("id")
    ids = list(df.index) if ids is None else ids
    assert ids == list(df.index)
    cph = CoxPHFitter(baseline_estimation_method="breslow")
    cph.fit(df, duration_col="T", event_col="E")
    betas.append(cph.params_[covs].to_numpy())
    infos_inv.append(cph.variance_matrix_.loc[covs, covs].to_numpy())
    resid.append(efron_residuals(df[covs].to_numpy(), df["T"].to_numpy(), df["E"].to_numpy(), betas[-1]))

p = len(covs)
bread = np.zeros((p * len(betas),) * 2)
for k, m in enumerate(infos_inv):
    bread[k * p:(k + 1) * p, k * p:(k + 1) * p] = m
stacked = np.hstack(resid)
cov = bread @ stacked.T @ stacked @ bread
json.dump(
    {
        "tool": "lifelines CoxPHFitter (Efron ties) + exact Efron score residuals",
        "beta": np.concatenate(betas).tolist(),
        "cov": cov.tolist(),
    },
    open(dst, "w"),
    indent=1,
)
