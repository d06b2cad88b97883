"""Forward simulation and causal queries on a fitted model.

All Monte Carlo queries draw one block of standard normals up front and
reuse it across baseline and modified runs (common random numbers), so any
difference between runs is attributable to the modification alone.  Noise
is drawn jointly across locations through each node's kernel factor and
scaled by the location's group standard deviation.
"""

from __future__ import annotations

import datetime
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidInterventionError,
    MissingInitialValuesError,
    NotApplicableError,
)
from .graphs import INTER, INTRA, make_term, parse_term
from .model import CausalModel
from .panel import PanelDataset

QUANTILES = (0.05, 0.5, 0.95)


@dataclass(frozen=True)
class InterventionSpec:
    """One intervention: what to do, to which node or arcs, where and when.

    kind "set" fixes the node to ``value`` (its equation is overridden);
    "scale" multiplies the node's structural output by ``factor``; "clamp"
    caps it at ``ceiling``; "sever" zeroes the listed arcs' coefficients.
    ``locations`` restricts to location ids (None = all) and ``weeks`` to an
    inclusive range of simulation week indices (None = all).
    """

    kind: str
    target: str | None = None
    arcs: tuple[tuple[str, str, str], ...] = ()
    value: float | None = None
    factor: float | None = None
    ceiling: float | None = None
    locations: tuple[str, ...] | None = None
    weeks: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in ("set", "scale", "clamp", "sever"):
            raise InvalidInterventionError(f"unknown intervention kind {self.kind!r}")
        if self.kind == "set" and (self.target is None or self.value is None):
            raise InvalidInterventionError("set needs a target node and a value")
        if self.kind == "scale":
            if self.target is None or self.factor is None or not self.factor > 0.0:
                raise InvalidInterventionError("scale needs a target and a factor > 0")
        if self.kind == "clamp":
            if self.target is None or self.ceiling is None or not math.isfinite(self.ceiling):
                raise InvalidInterventionError("clamp needs a target and a finite ceiling")
        if self.kind == "sever" and not self.arcs:
            raise InvalidInterventionError("sever needs at least one arc")

    def to_doc(self) -> dict:
        return {
            "kind": self.kind,
            "target": self.target,
            "arcs": [list(a) for a in self.arcs],
            "value": self.value,
            "factor": self.factor,
            "ceiling": self.ceiling,
            "locations": None if self.locations is None else list(self.locations),
            "weeks": None if self.weeks is None else list(self.weeks),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "InterventionSpec":
        return cls(
            kind=doc["kind"],
            target=doc.get("target"),
            arcs=tuple(tuple(a) for a in doc.get("arcs", [])),
            value=doc.get("value"),
            factor=doc.get("factor"),
            ceiling=doc.get("ceiling"),
            locations=None if doc.get("locations") is None else tuple(doc["locations"]),
            weeks=None if doc.get("weeks") is None else tuple(doc["weeks"]),
        )


@dataclass
class QueryResult:
    """Simulated trajectories summarized per (node, week, location)."""

    loc_ids: tuple[str, ...]
    nodes: tuple[str, ...]
    horizon: int
    draws: int
    seed: int
    mean: dict[str, np.ndarray]
    quantiles: dict[str, dict[str, np.ndarray]]
    delta_mean: dict[str, np.ndarray] | None = None
    delta_quantiles: dict[str, dict[str, np.ndarray]] | None = None

    def to_doc(self) -> dict:
        def pack(block):
            return {n: arr.tolist() for n, arr in sorted(block.items())}

        doc = {
            "loc_ids": list(self.loc_ids),
            "nodes": list(self.nodes),
            "horizon": self.horizon,
            "draws": self.draws,
            "seed": self.seed,
            "mean": pack(self.mean),
            "quantiles": {q: pack(b) for q, b in sorted(self.quantiles.items())},
        }
        if self.delta_mean is not None:
            doc["delta_mean"] = pack(self.delta_mean)
        if self.delta_quantiles is not None:
            doc["delta_quantiles"] = {q: pack(b) for q, b in sorted(self.delta_quantiles.items())}
        return doc


# ---------------------------------------------------------------------------
# Simulation core


class _SimContext:
    """Per-(model, init) precomputation: initial state, noise shapers, order."""

    def __init__(self, model: CausalModel, init: PanelDataset):
        self.model = model
        self.locations = init.locations
        self.loc_ids = tuple(loc.id for loc in self.locations)
        self.nodes = model.dag.topological_order()
        self.node_index = {n: j for j, n in enumerate(self.nodes)}
        self.static = set(model.static_nodes())
        self.dynamic = tuple(n for n in self.nodes if n not in self.static)
        L = len(self.locations)

        x0 = np.empty((len(self.nodes), L))
        last = init.n_weeks - 1
        for j, node in enumerate(self.nodes):
            if node not in init.var_index:
                raise MissingInitialValuesError(f"init data lacks variable {node!r}")
            col = init.values[:, :, init.var_index[node]]
            vals = col[:, last]
            if node in self.static:
                # any observed week will do; the value is constant
                first_obs = np.argmax(np.isfinite(col), axis=1)
                vals = col[np.arange(L), first_obs]
            if not np.all(np.isfinite(vals)):
                bad = [self.loc_ids[i] for i in np.flatnonzero(~np.isfinite(vals))]
                raise MissingInitialValuesError(
                    f"initial value for {node!r} missing at locations {bad[:5]}"
                )
            x0[j] = vals
        self.x0 = x0

        from .spatial import corr_from_distances, cholesky_factor

        dist = init.distance_matrix
        self.noise_shaper = {}
        for node in self.dynamic:
            est = model.estimates[node]
            gv = est.group_variances
            mean_var = float(np.mean(list(gv.values()))) if gv else 0.0
            sd = np.array(
                [math.sqrt(max(gv.get(loc.group, mean_var), 0.0)) for loc in self.locations]
            )
            if np.all(sd == 0.0):
                self.noise_shaper[node] = None
            else:
                chol = cholesky_factor(corr_from_distances(dist, est.kernel))
                self.noise_shaper[node] = (chol, sd)

    def shaped_noise(self, eps_std: np.ndarray) -> dict[str, np.ndarray]:
        """(draws, H, n_dynamic, L) standard normals -> per-node correlated
        noise scaled by group sd, shape (draws, H, L)."""
        out = {}
        for k, node in enumerate(self.dynamic):
            shaper = self.noise_shaper[node]
            if shaper is None:
                out[node] = np.zeros(eps_std.shape[:2] + eps_std.shape[3:])
            else:
                chol, sd = shaper
                out[node] = (eps_std[:, :, k, :] @ chol.T) * sd
        return out


def _scope_mask(ctx: _SimContext, spec: InterventionSpec, horizon: int):
    if spec.locations is None:
        loc_mask = np.ones(len(ctx.loc_ids), dtype=bool)
    else:
        known = set(ctx.loc_ids)
        missing = [l for l in spec.locations if l not in known]
        if missing:
            raise InvalidInterventionError(f"scope locations not in model: {missing}")
        loc_mask = np.array([l in set(spec.locations) for l in ctx.loc_ids])
    if spec.weeks is None:
        weeks = range(0, horizon + 1)
    else:
        lo, hi = spec.weeks
        if lo > horizon or hi < 0 or lo > hi:
            raise InvalidInterventionError(
                f"week range {spec.weeks} is disjoint from 0..{horizon}"
            )
        weeks = range(max(lo, 0), min(hi, horizon) + 1)
    if not loc_mask.any():
        raise InvalidInterventionError("intervention scope matches no locations")
    return loc_mask, set(weeks)


def _run(
    ctx: _SimContext,
    horizon: int,
    noise: dict[str, np.ndarray],
    draws: int,
    spec: InterventionSpec | None = None,
):
    """Forward trajectories (draws, horizon+1, nodes, L) under the model,
    optionally modified by an intervention."""
    model = ctx.model
    L = len(ctx.loc_ids)
    traj = np.empty((draws, horizon + 1, len(ctx.nodes), L))
    traj[:, 0] = ctx.x0

    loc_mask = weeks_in = None
    severed: dict[str, set[str]] = {}
    if spec is not None:
        loc_mask, weeks_in = _scope_mask(ctx, spec, horizon)
        if spec.kind == "sever":
            dag = model.dag
            for frm, to, kind in spec.arcs:
                arcset = dag.intra_arcs if kind == INTRA else dag.inter_arcs
                if (frm, to) not in arcset:
                    raise InvalidInterventionError(f"cannot sever absent arc {frm}->{to} ({kind})")
                severed.setdefault(to, set()).add(make_term(frm, 0 if kind == INTRA else 1))
        if spec.kind == "set" and 0 in weeks_in:
            traj[:, 0, ctx.node_index[spec.target], loc_mask] = spec.value

    for t in range(1, horizon + 1):
        scoped = spec is not None and t in weeks_in
        for node in ctx.nodes:
            j = ctx.node_index[node]
            if node in ctx.static:
                traj[:, t, j] = traj[:, 0, j]
                continue
            est = model.estimates[node]
            val = np.full((draws, L), est.intercept)
            cut = severed.get(node, ()) if scoped else ()
            for term, beta in est.coefficients.items():
                name, lag = parse_term(term)
                contrib = beta * traj[:, t - lag, ctx.node_index[name]]
                if term in cut:
                    contrib = np.where(loc_mask[None, :], 0.0, contrib)
                val += contrib
            val += noise[node][:, t - 1]

            if scoped and spec.target == node:
                if spec.kind == "set":
                    val = np.where(loc_mask[None, :], spec.value, val)
                elif spec.kind == "scale":
                    val = np.where(loc_mask[None, :], val * spec.factor, val)
                elif spec.kind == "clamp":
                    val = np.where(loc_mask[None, :], np.minimum(val, spec.ceiling), val)
            traj[:, t, j] = val
    return traj


def _summarize(ctx: _SimContext, traj: np.ndarray, seed: int, base: np.ndarray | None = None):
    def per_node(block):
        return {n: block[:, :, ctx.node_index[n], :] for n in ctx.nodes}

    mean = {n: a.mean(axis=0) for n, a in per_node(traj).items()}
    quants = {
        f"q{int(q * 100):02d}": {
            n: np.quantile(a, q, axis=0) for n, a in per_node(traj).items()
        }
        for q in QUANTILES
    }
    delta_mean = delta_quants = None
    if base is not None:
        diff = traj - base
        delta_mean = {n: a.mean(axis=0) for n, a in per_node(diff).items()}
        delta_quants = {
            f"q{int(q * 100):02d}": {
                n: np.quantile(a, q, axis=0) for n, a in per_node(diff).items()
            }
            for q in QUANTILES
        }
    return QueryResult(
        loc_ids=ctx.loc_ids,
        nodes=ctx.nodes,
        horizon=traj.shape[1] - 1,
        draws=traj.shape[0],
        seed=seed,
        mean=mean,
        quantiles=quants,
        delta_mean=delta_mean,
        delta_quantiles=delta_quants,
    )


def simulate(
    model: CausalModel, init: PanelDataset, horizon: int, draws: int = 500, seed: int = 0
) -> QueryResult:
    """Simulate the model forward from the last week of ``init``.

    Week 0 of the output is the initial state; weeks 1..horizon are drawn
    from the fitted equations with kernel-correlated noise.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    ctx = _SimContext(model, init)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((draws, horizon, len(ctx.dynamic), len(ctx.loc_ids)))
    traj = _run(ctx, horizon, ctx.shaped_noise(eps), draws)
    return _summarize(ctx, traj, seed)


def intervene(
    model: CausalModel,
    spec: InterventionSpec,
    init: PanelDataset,
    horizon: int,
    draws: int = 500,
    seed: int = 0,
) -> QueryResult:
    """Baseline vs intervened simulation with shared noise draws.

    The result summarizes the intervened trajectories; ``delta_mean`` and
    ``delta_quantiles`` summarize (intervened - baseline) per draw.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if spec.kind != "sever" and spec.target not in model.dag.nodes:
        raise InvalidInterventionError(f"target {spec.target!r} is not a model node")
    ctx = _SimContext(model, init)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((draws, horizon, len(ctx.dynamic), len(ctx.loc_ids)))
    noise = ctx.shaped_noise(eps)
    base = _run(ctx, horizon, noise, draws)
    modified = _run(ctx, horizon, noise, draws, spec=spec)
    return _summarize(ctx, modified, seed, base=base)


# ---------------------------------------------------------------------------
# Variance attribution


def variance_attribution(
    model: CausalModel,
    outcome: str,
    init: PanelDataset | None = None,
    draws: int = 200,
    settle: int = 40,
    window: int = 20,
    seed: int = 0,
) -> dict[str, float]:
    """Share of the outcome's parent-explained variance per non-self parent.

    The self-lag (autoregressive) term is removed first; with Y~ the sum of
    the remaining coefficient-weighted parent terms, the share of parent j
    is beta_j Cov(P_j, Y~) / Var(Y~), so shares sum to one exactly.  Parent
    covariances come from pooled long-run simulation samples.
    """
    est = model.estimates.get(outcome)
    if est is None:
        raise NotApplicableError(f"unknown outcome {outcome!r}")
    terms = [t for t in est.coefficients if parse_term(t)[0] != outcome]
    if not terms:
        raise NotApplicableError(f"outcome {outcome!r} has no non-self parents")

    ctx = _SimContext(model, init if init is not None else _neutral_init(model))
    horizon = settle + window
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((draws, horizon, len(ctx.dynamic), len(ctx.loc_ids)))
    traj = _run(ctx, horizon, ctx.shaped_noise(eps), draws)

    # pooled samples of each parent term over the settled window
    cols = []
    for term in terms:
        name, lag = parse_term(term)
        block = traj[:, settle + 1 - lag : horizon + 1 - lag, ctx.node_index[name], :]
        cols.append(block.ravel())
    P = np.column_stack(cols)
    beta = np.array([est.coefficients[t] for t in terms])
    cov = np.cov(P, rowvar=False).reshape(len(terms), len(terms))
    cov_with_y = cov @ beta
    var_y = float(beta @ cov_with_y)
    if var_y <= 0.0:
        raise NotApplicableError("parent-explained variance is zero")
    return {t: float(beta[k] * cov_with_y[k] / var_y) for k, t in enumerate(terms)}


def _neutral_init(model: CausalModel) -> PanelDataset:
    """Two-week all-zero panel over the model's own locations, as a default
    starting state for long-run (settled) simulations."""
    from .panel import PanelDataset

    if model.static_nodes():
        raise MissingInitialValuesError(
            "models with static variables need explicit init data"
        )
    L, V = len(model.locations), len(model.variables)
    weeks = (datetime.date(2020, 1, 6), datetime.date(2020, 1, 13))
    values = np.zeros((L, 2, V))
    return PanelDataset(
        locations=model.locations,
        weeks=weeks,
        variables=model.variables,
        values=values,
        missing=np.zeros_like(values, dtype=bool),
    )


# ---------------------------------------------------------------------------
# Mediation


def _reachable(model: CausalModel, src: str, dst: str) -> bool:
    children: dict[str, set[str]] = {}
    for a, b in model.dag.intra_arcs | model.dag.inter_arcs:
        children.setdefault(a, set()).add(b)
    seen, frontier = {src}, [src]
    while frontier:
        n = frontier.pop()
        for b in children.get(n, ()):
            if b == dst:
                return True
            if b not in seen:
                seen.add(b)
                frontier.append(b)
    return False


def _zero_arcs(model: CausalModel, arcs) -> CausalModel:
    """Copy of the model with the listed arcs' coefficients set to zero
    (structure unchanged)."""
    from dataclasses import replace as dc_replace

    estimates = dict(model.estimates)
    for frm, to, kind in arcs:
        est = estimates[to]
        term = make_term(frm, 0 if kind == INTRA else 1)
        coefs = dict(est.coefficients)
        if term not in coefs:
            raise InvalidInterventionError(f"arc {frm}->{to} ({kind}) not in the model")
        coefs[term] = 0.0
        estimates[to] = dc_replace(est, coefficients=coefs)
    return CausalModel(
        dag=model.dag,
        estimates=estimates,
        variables=model.variables,
        locations=model.locations,
        provenance=model.provenance,
    )


def mediation_share(
    model: CausalModel,
    exposure: str,
    mediators,
    outcome: str,
    lag: int,
    init: PanelDataset | None = None,
    draws: int = 200,
    settle: int = 40,
    window: int = 20,
    seed: int = 0,
) -> float | None:
    """Fraction of the exposure-outcome covariance at the given lag that
    survives severing every exposure -> mediator arc.

    Returns None when the graph has no directed path from exposure to
    outcome (nothing to mediate).  1.0 means the mediators carry none of
    the effect; near 0 means they carry all of it.
    """
    mediators = set(mediators)
    if exposure == outcome or exposure in mediators or outcome in mediators:
        raise NotApplicableError("exposure, mediators, and outcome must be distinct")
    if not _reachable(model, exposure, outcome):
        return None

    cut = [
        (exposure, m, kind)
        for m in sorted(mediators)
        for kind, arcset in ((INTRA, model.dag.intra_arcs), (INTER, model.dag.inter_arcs))
        if (exposure, m) in arcset
    ]
    severed = _zero_arcs(model, cut) if cut else model

    ctx = _SimContext(model, init if init is not None else _neutral_init(model))
    horizon = settle + window + lag
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((draws, horizon, len(ctx.dynamic), len(ctx.loc_ids)))
    noise = ctx.shaped_noise(eps)

    def lagged_cov(m: CausalModel) -> float:
        run_ctx = _SimContext(m, _neutral_init(m)) if init is None else _SimContext(m, init)
        traj = _run(run_ctx, horizon, noise, draws)
        je, jo = run_ctx.node_index[exposure], run_ctx.node_index[outcome]
        x = traj[:, settle + 1 - lag : horizon + 1 - lag, je, :].ravel()
        y = traj[:, settle + 1 : horizon + 1, jo, :].ravel()
        return float(np.cov(x, y)[0, 1])

    intact = lagged_cov(model)
    if abs(intact) < 1e-12:
        return None
    return lagged_cov(severed) / intact


# ---------------------------------------------------------------------------
# Counterfactuals


def counterfactual(
    model: CausalModel,
    realized: PanelDataset,
    node: str,
    at: tuple[str, object],
    value: float,
    horizon: int,
) -> dict[str, np.ndarray]:
    """Abduction / action / prediction at one (location, week) anchor.

    Residuals implied by the realized data are retained (zero where a cell
    is not locally computable); the anchored node is replaced by ``value``;
    both the factual and counterfactual trajectories are re-propagated with
    the same residuals.  Returns per-node delta trajectories (length
    horizon+1, starting at the anchor week) for the anchor location; under
    per-location equations the other locations are unaffected.
    """
    loc_id, week = at
    if loc_id not in realized.loc_index:
        raise MissingInitialValuesError(f"location {loc_id!r} not in realized data")
    i = realized.loc_index[loc_id]
    if isinstance(week, str):
        week = datetime.date.fromisoformat(week)
    w0 = realized.week_index[week] if isinstance(week, datetime.date) else int(week)
    if not 0 <= w0 < realized.n_weeks:
        raise MissingInitialValuesError(f"anchor week {week!r} outside realized data")
    if w0 + horizon > realized.n_weeks - 1:
        raise MissingInitialValuesError(
            f"realized data covers {realized.n_weeks} weeks; "
            f"anchor {w0} + horizon {horizon} runs past the end"
        )
    jnode = {n: realized.var_index[n] for n in model.dag.nodes}
    anchor_val = realized.values[i, w0, jnode[node]]
    if not np.isfinite(anchor_val):
        raise MissingInitialValuesError(f"{node!r} unobserved at the anchor point")

    order = model.dag.topological_order()
    static = set(model.static_nodes())
    vals = {n: realized.values[i, :, jnode[n]] for n in order}

    # abduction: residual at (n, t) wherever the cell is locally computable
    resid = {n: np.zeros(realized.n_weeks) for n in order}
    for n in order:
        if n in static:
            continue
        est = model.estimates[n]
        for t in range(realized.n_weeks):
            pred = _local_pred(est, vals, t)
            if pred is not None and np.isfinite(vals[n][t]):
                resid[n][t] = vals[n][t] - pred

    def propagate(anchor_value: float) -> dict[str, np.ndarray]:
        state = {n: np.empty(horizon + 1) for n in order}
        # anchor week: keep realized values, then recompute the anchored
        # node's contemporaneous descendants with retained residuals
        base = {n: _fill(vals[n], w0, n, static) for n in order}
        base[node] = anchor_value
        recompute = _intra_descendants(model, node)
        for n in order:
            if n in recompute and n not in static:
                est = model.estimates[n]
                pred = est.intercept
                for term, beta in est.coefficients.items():
                    pname, lag = parse_term(term)
                    if lag == 0:
                        pred += beta * base[pname]
                    else:
                        # pre-anchor weeks are identical in both runs; any
                        # fallback cancels in the delta as long as it does
                        # not depend on the run
                        pred += beta * _fill(vals[pname], w0 - lag, pname, static)
                base[n] = pred + resid[n][w0]
        for n in order:
            state[n][0] = base[n]
        for k in range(1, horizon + 1):
            t = w0 + k
            for n in order:
                if n in static:
                    state[n][k] = state[n][0]
                    continue
                est = model.estimates[n]
                pred = est.intercept
                for term, beta in est.coefficients.items():
                    pname, lag = parse_term(term)
                    pred += beta * state[pname][k - lag]
                state[n][k] = pred + resid[n][t]
        return state

    factual = propagate(float(anchor_val))
    counter = propagate(float(value))
    return {n: counter[n] - factual[n] for n in order}


def _local_pred(est, vals, t):
    pred = est.intercept
    for term, beta in est.coefficients.items():
        name, lag = parse_term(term)
        if t - lag < 0:
            return None
        v = vals[name][t - lag]
        if not np.isfinite(v):
            return None
        pred += beta * v
    return pred


def _fill(series: np.ndarray, t: int, node: str, static) -> float:
    """Realized value at t, falling back to any observed value for statics
    and to zero otherwise (cancelled by the factual/counterfactual pairing)."""
    if 0 <= t < series.size and np.isfinite(series[t]):
        return float(series[t])
    if node in static:
        obs = series[np.isfinite(series)]
        if obs.size:
            return float(obs[0])
    return 0.0


def _intra_descendants(model: CausalModel, node: str) -> set[str]:
    out, frontier = set(), [node]
    while frontier:
        n = frontier.pop()
        for b in model.dag.children_intra(n):
            if b not in out:
                out.add(b)
                frontier.append(b)
    return out
