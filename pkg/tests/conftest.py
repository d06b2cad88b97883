import datetime

import numpy as np
import pytest

from stcausal import (
    CausalModel,
    GeneratorSpec,
    KernelParams,
    Location,
    NodeEstimate,
    PanelDataset,
    TwoSliceDag,
    VariableSpec,
    generate,
)


def make_locations(n, seed=0, spread=5.0, group="g0"):
    """Random locations in a box around (40N, -100E)."""
    rng = np.random.default_rng(seed)
    return tuple(
        Location(
            id=f"L{i:03d}",
            lat=float(40.0 + spread * rng.uniform(-1, 1)),
            lon=float(-100.0 + spread * rng.uniform(-1, 1)),
            group=group if isinstance(group, str) else group[i],
        )
        for i in range(n)
    )


def make_panel(values, locations=None, tier="condition", start=datetime.date(2020, 1, 6)):
    """Panel from a (L, W) or (L, W, V) array; NaNs become the mask."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[:, :, None]
    L, W, V = values.shape
    if locations is None:
        locations = make_locations(L)
    weeks = tuple(start + datetime.timedelta(days=7 * t) for t in range(W))
    variables = tuple(VariableSpec(name=f"v{j}", tier=tier) for j in range(V))
    return PanelDataset(locations, weeks, variables, values, np.isnan(values))


def chain_dag():
    return TwoSliceDag(
        nodes=("w1", "p1", "c1"),
        intra_arcs=frozenset({("w1", "p1"), ("p1", "c1")}),
        inter_arcs=frozenset({("w1", "w1"), ("p1", "p1"), ("c1", "c1")}),
    )


def chain_spec(seed=0, **overrides):
    """Three-node weather -> pollutant -> condition generator, all stable."""
    base = dict(
        n_locations=20,
        n_weeks=80,
        dag=chain_dag(),
        tiers={"w1": "weather", "p1": "pollutant", "c1": "condition"},
        intercepts={"w1": 0.0, "p1": 1.0, "c1": -0.5},
        coefficients={
            "w1": {"w1@t-1": 0.6},
            "p1": {"w1@t": 0.7, "p1@t-1": 0.5},
            "c1": {"p1@t": 0.6, "c1@t-1": 0.4},
        },
        kernels={n: KernelParams(150.0, 0.3) for n in ("w1", "p1", "c1")},
        group_variances={n: {"g0": 1.0, "g1": 1.5} for n in ("w1", "p1", "c1")},
        n_groups=2,
        missing_rate=0.0,
        seed=seed,
    )
    base.update(overrides)
    return GeneratorSpec(**base)


@pytest.fixture(scope="session")
def chain_data():
    return generate(chain_spec(seed=42))


@pytest.fixture(scope="session")
def chain_data_missing():
    return generate(chain_spec(seed=42, missing_rate=0.1))


def toy_model(nodes_coefs, variances=None, kernel=None, locations=None,
              tiers=None, static=()):
    """Hand-built CausalModel from {node: (intercept, {term: beta})}.

    Default noise variance 0 (deterministic), identity-like kernel, 5
    locations in one group.
    """
    from stcausal import IDENTITY_KERNEL
    from stcausal.graphs import parse_term

    if locations is None:
        locations = make_locations(5)
    groups = sorted({loc.group for loc in locations})
    intra, inter = set(), set()
    for node, (_, coefs) in nodes_coefs.items():
        for term in coefs:
            name, lag = parse_term(term)
            (intra if lag == 0 else inter).add((name, node))
    dag = TwoSliceDag(tuple(nodes_coefs), frozenset(intra), frozenset(inter))
    estimates = {}
    for node, (alpha, coefs) in nodes_coefs.items():
        var = 0.0 if variances is None else variances.get(node, 0.0)
        estimates[node] = NodeEstimate(
            node=node,
            intercept=alpha,
            coefficients={t: coefs[t] for t in dag.parents(node)},
            std_errors={},
            kernel=kernel or IDENTITY_KERNEL,
            group_variances={g: var for g in groups},
            n_variance_params=len(groups),
            n_used=1,
            loglik_avg=0.0,
            converged=True,
            iterations=0,
        )
    tiers = tiers or {}
    variables = tuple(
        VariableSpec(name=n, tier=tiers.get(n, "condition"), static=n in static)
        for n in nodes_coefs
    )
    return CausalModel(
        dag=dag, estimates=estimates, variables=variables, locations=locations
    )


def complete_panel_for(model, n_weeks=2, fill=0.0):
    """All-``fill`` panel over the model's locations, usable as query init."""
    L = len(model.locations)
    weeks = tuple(
        datetime.date(2020, 1, 6) + datetime.timedelta(days=7 * t) for t in range(n_weeks)
    )
    values = np.full((L, n_weeks, len(model.variables)), float(fill))
    return PanelDataset(
        model.locations, weeks, model.variables, values, np.zeros_like(values, dtype=bool)
    )
