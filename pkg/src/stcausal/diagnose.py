"""Residual misspecification battery and buffered predictive validation.

Three test families per model:
  temporal      -- portmanteau autocorrelation tests per (location, lag)
                   on weighted residual series
  spatial       -- Moran's I per week on decorrelated residuals
  heterogeneity -- Bartlett's equal-variance test per node on decorrelated
                   residuals grouped by the location group label

P-values are adjusted within each family by the Benjamini-Yekutieli step-up
(valid under arbitrary dependence); rejection proportions are reported on
the raw p-values at the chosen level, with adjusted flags alongside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import InvalidSplitError, NotApplicableError
from .model import CausalModel, fitted_values
from .nodefit import ResidualPanel, node_residuals
from .panel import PanelDataset
from .spatial import haversine_matrix

DEFAULT_LAGS = 8
MIN_SERIES_LENGTH = 20
MIN_SPATIAL_N = 5


# ---------------------------------------------------------------------------
# Temporal family: portmanteau test with missing-gap autocorrelations


def gap_acf(series: np.ndarray, max_lag: int) -> tuple[np.ndarray, int]:
    """Autocorrelations r_1..r_max_lag of a series with NaN gaps.

    Lag-k products use only index pairs (t, t+k) observed at both ends; the
    denominator is the full observed sum of squares.  Returns (r, n_observed).
    """
    x = np.asarray(series, dtype=float)
    obs = np.isfinite(x)
    n = int(obs.sum())
    if n == 0:
        return np.full(max_lag, np.nan), 0
    xc = np.where(obs, x - x[obs].mean(), 0.0)
    denom = float(np.sum(xc**2))
    if denom == 0.0:
        return np.full(max_lag, np.nan), n
    r = np.empty(max_lag)
    for k in range(1, max_lag + 1):
        both = obs[:-k] & obs[k:]
        r[k - 1] = float(np.sum(xc[:-k] * xc[k:], where=both)) / denom
    return r, n


def temporal_test(res: ResidualPanel, lags: int = DEFAULT_LAGS):
    """Ljung-Box style p-values per (location, lag) on weighted residuals.

    Returns records {location, lag, stat, p}.  Locations with fewer than 20
    observed weeks, or a constant series, are skipped.
    """
    records = []
    for i, loc_id in enumerate(res.loc_ids):
        series = res.weighted[i, :]
        n = int(np.isfinite(series).sum())
        if n < MIN_SERIES_LENGTH:
            continue
        r, n = gap_acf(series, lags)
        if not np.all(np.isfinite(r)):
            continue  # degenerate (constant) series
        cum = 0.0
        for k in range(1, lags + 1):
            cum += r[k - 1] ** 2 / (n - k)
            q = n * (n + 2.0) * cum
            records.append(
                {
                    "location": loc_id,
                    "lag": k,
                    "stat": float(q),
                    "p": float(stats.chi2.sf(q, k)),
                }
            )
    return records


# ---------------------------------------------------------------------------
# Spatial family: Moran's I


def inverse_distance_weights(dist: np.ndarray, cutoff_km: float) -> np.ndarray:
    """Row-standardized inverse-distance weights, zero beyond the cutoff.

    Rows without any neighbor stay all-zero (isolates; dropped by the test).
    """
    n = dist.shape[0]
    with np.errstate(divide="ignore"):
        w = np.where((dist > 0.0) & (dist <= cutoff_km), 1.0 / np.maximum(dist, 1e-9), 0.0)
    np.fill_diagonal(w, 0.0)
    rowsum = w.sum(axis=1, keepdims=True)
    return np.divide(w, rowsum, out=np.zeros_like(w), where=rowsum > 0.0)


def morans_i(values: np.ndarray, weights: np.ndarray):
    """Moran's I with the one-sided (greater) normal p-value under
    randomization.  Returns (I, expected, variance, p)."""
    z = np.asarray(values, dtype=float)
    n = z.size
    z = z - z.mean()
    s0 = float(weights.sum())
    if s0 == 0.0 or n < 3 or float(np.sum(z**2)) == 0.0:
        return math.nan, math.nan, math.nan, math.nan
    num = float(z @ weights @ z)
    den = float(z @ z)
    I = (n / s0) * (num / den)
    e_i = -1.0 / (n - 1)

    wsym = weights + weights.T
    s1 = 0.5 * float(np.sum(wsym**2))
    s2 = float(np.sum((weights.sum(axis=0) + weights.sum(axis=1)) ** 2))
    b2 = n * float(np.sum(z**4)) / den**2
    a = n * ((n**2 - 3 * n + 3) * s1 - n * s2 + 3 * s0**2)
    b = b2 * ((n**2 - n) * s1 - 2 * n * s2 + 6 * s0**2)
    denom = (n - 1) * (n - 2) * (n - 3) * s0**2
    var = (a - b) / denom - e_i**2
    if var <= 0.0:
        return I, e_i, 0.0, math.nan
    p = float(stats.norm.sf((I - e_i) / math.sqrt(var)))
    return I, e_i, var, p


def spatial_test(
    res: ResidualPanel,
    locations,
    week_index: int,
    cutoff_km: float | None = None,
    permutations: int = 0,
    seed: int = 0,
):
    """Moran's I on one week's decorrelated residual field.

    ``cutoff_km`` bounds the inverse-distance weights; when it leaves every
    location isolated (or is None) the median pairwise distance is used
    instead.  With ``permutations`` > 0 the p-value comes from a seeded
    permutation null instead of the normal approximation.
    Returns (I, p) or None when fewer than 5 locations are observed.
    """
    field_vals = res.decorrelated[:, week_index]
    obs = np.isfinite(field_vals)
    if int(obs.sum()) < MIN_SPATIAL_N:
        return None
    z = field_vals[obs]
    dist = haversine_matrix([loc for loc, keep in zip(locations, obs) if keep])

    w = None
    if cutoff_km is not None:
        w = inverse_distance_weights(dist, cutoff_km)
        if w.sum() == 0.0:
            w = None
    if w is None:
        off = dist[np.triu_indices(dist.shape[0], k=1)]
        w = inverse_distance_weights(dist, float(np.median(off)))

    # drop isolates so every tested location has a neighbor
    has_neighbor = w.sum(axis=1) > 0.0
    if int(has_neighbor.sum()) < MIN_SPATIAL_N:
        return None
    z = z[has_neighbor]
    w = w[np.ix_(has_neighbor, has_neighbor)]
    rowsum = w.sum(axis=1, keepdims=True)
    w = np.divide(w, rowsum, out=np.zeros_like(w), where=rowsum > 0.0)

    I, _, _, p = morans_i(z, w)
    if math.isnan(I):
        return None
    if permutations > 0:
        rng = np.random.default_rng(seed)
        count = 0
        for _ in range(permutations):
            I_perm, *_ = morans_i(rng.permutation(z), w)
            if I_perm >= I:
                count += 1
        p = (1.0 + count) / (1.0 + permutations)
    return float(I), float(p)


# ---------------------------------------------------------------------------
# Heterogeneity family: Bartlett's test


def heterogeneity_test(values_by_group: dict[str, np.ndarray], min_size: int = 5):
    """Bartlett's chi-square test of equal variances across groups.

    Groups smaller than ``min_size`` are dropped; fewer than two remaining
    groups raises NotApplicable.  Returns (statistic, p).
    """
    groups = [
        np.asarray(v, dtype=float)[np.isfinite(np.asarray(v, dtype=float))]
        for v in values_by_group.values()
    ]
    groups = [g for g in groups if g.size >= min_size]
    k = len(groups)
    if k < 2:
        raise NotApplicableError(f"Bartlett needs >= 2 groups with {min_size}+ values")
    n_g = np.array([g.size for g in groups], dtype=float)
    s2 = np.array([g.var(ddof=1) for g in groups])
    N = float(n_g.sum())
    if np.all(s2 == 0.0):
        return 0.0, 1.0
    if np.any(s2 == 0.0):
        return math.inf, 0.0
    sp2 = float(np.sum((n_g - 1) * s2) / (N - k))
    t = (N - k) * math.log(sp2) - float(np.sum((n_g - 1) * np.log(s2)))
    c = 1.0 + (float(np.sum(1.0 / (n_g - 1))) - 1.0 / (N - k)) / (3.0 * (k - 1))
    stat = t / c
    return float(stat), float(stats.chi2.sf(stat, k - 1))


# ---------------------------------------------------------------------------
# Multiplicity adjustment


def adjust_multiplicity(pvals) -> np.ndarray:
    """Benjamini-Yekutieli step-up adjustment, valid under dependence.

    adjusted_(i) = min_{j >= i} min(1, m * c(m) * p_(j) / j) over the
    ascending order, with c(m) the harmonic sum.
    """
    p = np.asarray(pvals, dtype=float)
    if p.size == 0:
        raise ValueError("no p-values to adjust")
    if np.any((p < 0.0) | (p > 1.0) | ~np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    c_m = float(np.sum(1.0 / np.arange(1, m + 1)))
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m * c_m / np.arange(1, m + 1)
    adj = np.minimum(np.minimum.accumulate(ranked[::-1])[::-1], 1.0)
    out = np.empty(m)
    out[order] = adj
    return out


# ---------------------------------------------------------------------------
# Report assembly


@dataclass
class DiagnosticsReport:
    """All three families' records with adjusted p-values and summaries."""

    temporal: list[dict]
    spatial: list[dict]
    heterogeneity: list[dict]
    rejection_proportions: dict[str, float]
    alpha: float
    predictive_r2: dict | None = None

    def to_doc(self) -> dict:
        return {
            "temporal": self.temporal,
            "spatial": self.spatial,
            "heterogeneity": self.heterogeneity,
            "rejection_proportions": dict(sorted(self.rejection_proportions.items())),
            "alpha": self.alpha,
            "predictive_r2": self.predictive_r2,
        }

    def summary_text(self) -> str:
        lines = ["misspecification summary", "========================"]
        for family in ("temporal", "spatial", "heterogeneity"):
            records = getattr(self, family)
            prop = self.rejection_proportions.get(family)
            shown = "n/a" if prop is None else f"{100.0 * prop:5.1f}%"
            lines.append(
                f"{family:>14}: {len(records):5d} tests, {shown} with p < {self.alpha}"
            )
        if self.predictive_r2 is not None:
            avg = self.predictive_r2.get("average")
            if avg is not None:
                lines.append(f" predictive R^2: {avg:.3f} (condition-tier average)")
        return "\n".join(lines) + "\n"


def _adjust_family(records):
    if not records:
        return
    adj = adjust_multiplicity([r["p"] for r in records])
    for rec, a in zip(records, adj):
        rec["p_adj"] = float(a)


def misspecification_report(
    model: CausalModel,
    ds: PanelDataset,
    alpha: float = 0.05,
    lags: int = DEFAULT_LAGS,
    permutations: int = 0,
    seed: int = 0,
) -> DiagnosticsReport:
    """Run all three residual test families on every dynamic node.

    Rejection proportions are computed on raw p-values at ``alpha``;
    Benjamini-Yekutieli adjusted values ride along per record.
    """
    temporal: list[dict] = []
    spatial: list[dict] = []
    heterogeneity: list[dict] = []
    static = set(model.static_nodes())
    for node in model.dag.nodes:
        if node in static:
            continue
        est = model.estimates[node]
        res = node_residuals(est, ds)

        for rec in temporal_test(res, lags=lags):
            temporal.append({"node": node, **rec})

        for t in range(len(res.weeks)):
            got = spatial_test(
                res,
                ds.locations,
                t,
                cutoff_km=est.kernel.range_km,
                permutations=permutations,
                seed=seed + t,
            )
            if got is not None:
                spatial.append(
                    {"node": node, "week": res.weeks[t].isoformat(), "I": got[0], "p": got[1]}
                )

        by_group: dict[str, np.ndarray] = {}
        for g in sorted(set(res.groups)):
            sel = np.array([grp == g for grp in res.groups])
            by_group[g] = res.decorrelated[sel, :].ravel()
        try:
            stat, p = heterogeneity_test(by_group)
            heterogeneity.append({"node": node, "stat": stat, "p": p})
        except NotApplicableError:
            pass

    for fam in (temporal, spatial, heterogeneity):
        _adjust_family(fam)
    proportions = {
        name: float(np.mean([r["p"] < alpha for r in records])) if records else None
        for name, records in (
            ("temporal", temporal),
            ("spatial", spatial),
            ("heterogeneity", heterogeneity),
        )
    }
    return DiagnosticsReport(
        temporal=temporal,
        spatial=spatial,
        heterogeneity=heterogeneity,
        rejection_proportions=proportions,
        alpha=alpha,
    )


# ---------------------------------------------------------------------------
# Predictive validation


def predictive_r2(model: CausalModel, train: PanelDataset, validation: PanelDataset):
    """Out-of-sample one-step R-squared per node on a buffered split.

    Predictions condition on realized parent values inside the validation
    slice; the returned dict maps node -> R^2 plus "average" over
    condition-tier nodes.
    """
    if validation.n_weeks == 0 or validation.n_locations == 0:
        raise InvalidSplitError("empty validation dataset")
    if train.weeks and validation.weeks and max(train.weeks) >= min(validation.weeks):
        raise InvalidSplitError("train and validation weeks overlap")

    tiers = {v.name: v.tier for v in model.variables}
    static = set(model.static_nodes())
    out: dict[str, float | None] = {}
    condition_scores = []
    for node in model.dag.nodes:
        if node in static:
            continue
        est = model.estimates[node]
        pred = fitted_values(est, validation)
        actual = validation.values[:, :, validation.var_index[node]]
        mask = np.isfinite(pred) & np.isfinite(actual)
        if int(mask.sum()) < 3:
            out[node] = None
            continue
        y, yhat = actual[mask], pred[mask]
        sst = float(np.sum((y - y.mean()) ** 2))
        if sst == 0.0:
            out[node] = None
            continue
        r2 = 1.0 - float(np.sum((y - yhat) ** 2)) / sst
        out[node] = r2
        if tiers.get(node) == "condition":
            condition_scores.append(r2)
    out["average"] = float(np.mean(condition_scores)) if condition_scores else None
    return out
