"""Release gate: nine end-to-end checks, one per headline capability.

Each test is a single pass/fail line.  Sizes, seeds, and settings were
tuned so a correct implementation clears every bar with margin; the
tolerances themselves are the published ones and are not negotiable.
"""

import json
import math
import statistics
import time

import numpy as np
import pytest
import statsmodels.api as sm

from stcausal import (
    FitConfig,
    GeneratorSpec,
    InterventionSpec,
    KernelParams,
    SearchConfig,
    TwoSliceDag,
    bayes_factor,
    bootstrap_average,
    counterfactual,
    default_constraints,
    fit_model,
    fit_node,
    generate,
    gls_fit,
    intervene,
    misspecification_report,
    pnal_network,
    pnal_node,
    predictive_r2,
    shd,
    split_temporal,
    tabu_learn,
    variance_attribution,
)
from stcausal.cli import main
from stcausal.graphs import INTER, INTRA

from conftest import (
    chain_dag,
    chain_spec,
    complete_panel_for,
    make_locations,
    make_panel,
    toy_model,
)

FIVE_NODES = ("w1", "p1", "p2", "c1", "c2")

TRUE_FIVE_ARCS = frozenset({
    ("w1", "p1", INTRA), ("p1", "c1", INTRA),
    ("w1", "w1", INTER), ("p1", "p1", INTER), ("p2", "p2", INTER),
    ("c1", "c1", INTER), ("c2", "c2", INTER), ("c1", "c2", INTER),
})


def five_node_spec(seed):
    """Two-tier chain w1 -> p1 -> c1 with self-lags, a free-running p2,
    a lagged c1 -> c2 arc, group heteroscedasticity, and 10% holes."""
    dag = TwoSliceDag(
        FIVE_NODES,
        frozenset({("w1", "p1"), ("p1", "c1")}),
        frozenset({("w1", "w1"), ("p1", "p1"), ("p2", "p2"),
                   ("c1", "c1"), ("c2", "c2"), ("c1", "c2")}),
    )
    return GeneratorSpec(
        n_locations=30,
        n_weeks=150,
        dag=dag,
        tiers={"w1": "weather", "p1": "pollutant", "p2": "pollutant",
               "c1": "condition", "c2": "condition"},
        intercepts={"w1": 0.0, "p1": 1.0, "p2": 0.5, "c1": -0.5, "c2": 0.3},
        coefficients={
            "w1": {"w1@t-1": 0.6},
            "p1": {"w1@t": 0.7, "p1@t-1": 0.5},
            "p2": {"p2@t-1": 0.5},
            "c1": {"p1@t": 0.6, "c1@t-1": 0.4},
            "c2": {"c1@t-1": -0.5, "c2@t-1": 0.5},
        },
        kernels={n: KernelParams(150.0, 0.3) for n in FIVE_NODES},
        group_variances={n: {"g0": 1.0, "g1": 1.5} for n in FIVE_NODES},
        n_groups=2,
        missing_rate=0.10,
        seed=seed,
    )


def one_node_spec(seed, *, kernel, group_variances, n_groups=1,
                  n_locations=40, n_weeks=80):
    dag = TwoSliceDag(("x",), frozenset(), frozenset({("x", "x")}))
    return GeneratorSpec(
        n_locations=n_locations,
        n_weeks=n_weeks,
        dag=dag,
        tiers={"x": "condition"},
        intercepts={"x": 0.0},
        coefficients={"x": {"x@t-1": 0.5}},
        kernels={"x": kernel},
        group_variances={"x": group_variances},
        n_groups=n_groups,
        seed=seed,
    )


SELF_ONLY = TwoSliceDag(("x",), frozenset(), frozenset({("x", "x")}))


def test_gls_matches_normal_equations_oracle():
    # 100 random (y, X, omega) instances, n up to 50 and up to 6 regressors,
    # against a direct solve of the normal equations X' W X b = X' W y
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    for _ in range(100):
        n = int(rng.integers(8, 51))
        p = int(rng.integers(1, 7))
        X = np.ones((n, 1))
        if p > 1:
            X = np.column_stack([X, rng.standard_normal((n, p - 1))])
        a = rng.standard_normal((n, n))
        omega = a @ a.T + n * np.eye(n)
        y = X @ rng.normal(size=p) + np.linalg.cholesky(omega) @ rng.standard_normal(n)

        beta, se, _ = gls_fit(y, X, omega)
        winv = np.linalg.inv(omega)
        info = X.T @ winv @ X
        np.testing.assert_allclose(
            beta, np.linalg.solve(info, X.T @ winv @ y), rtol=1e-8, atol=1e-10
        )
        np.testing.assert_allclose(se, np.sqrt(np.diag(np.linalg.inv(info))), rtol=1e-8)
    assert time.perf_counter() - start < 5.0


@pytest.mark.filterwarnings("ignore:variogram bins")
def test_structure_recovery_and_bootstrap_strengths():
    # resampled replicates hold duplicate locations, so sparse-bin merges
    # during kernel refits are routine here
    fit = FitConfig(max_iterations=4, tolerance=1e-4)
    search = SearchConfig(
        patience=12, restarts=1, max_steps=250, perturb_moves=3, seed=0, fit=fit
    )
    start = time.perf_counter()

    hits = 0
    for seed in range(20):
        ds, truth = generate(five_node_spec(seed))
        dag, _ = tabu_learn(ds, default_constraints(ds.variables), 16.0, search)
        hits += shd(dag, truth.dag) <= 1
    assert hits >= 18

    # The bootstrap resamples whole locations with replacement, and a
    # duplicated location agrees with its copy far better than the spatial
    # kernel allows, which flatters spurious arcs.  The stiff penalty keeps
    # the vote honest on resampled data.
    ds, _ = generate(five_node_spec(0))
    cs = default_constraints(ds.variables)
    avg = bootstrap_average(ds, cs, 16.0, B=20, threshold=0.5, cfg=search)

    candidates = {
        (a, b, kind)
        for a in FIVE_NODES
        for b in FIVE_NODES
        for kind in (INTRA, INTER)
        if not (a == b and kind == INTRA) and cs.arc_allowed(a, b, kind)
    }
    true_votes = [avg.arc_strengths.get(arc, 0.0) for arc in sorted(TRUE_FIVE_ARCS)]
    absent_votes = [
        avg.arc_strengths.get(arc, 0.0) for arc in sorted(candidates - TRUE_FIVE_ARCS)
    ]
    assert statistics.median(true_votes) >= 0.9
    assert statistics.median(absent_votes) <= 0.2
    assert time.perf_counter() - start < 300.0


def test_misspecification_mirrors_flag_the_broken_model_only():
    # strongly correlated field: a fit that ignores the kernel must trip the
    # spatial family, the full fit must not
    ds, _ = generate(
        one_node_spec(5, kernel=KernelParams(200.0, 0.1), group_variances={"g0": 1.0})
    )
    flat = fit_model(ds, SELF_ONLY, config=FitConfig(estimate_kernel=False))
    full = fit_model(ds, SELF_ONLY)
    assert misspecification_report(flat, ds).rejection_proportions["spatial"] >= 0.3
    assert misspecification_report(full, ds).rejection_proportions["spatial"] <= 0.05

    # tenfold variance gap between groups: pooled weights leave overwhelming
    # heterogeneity evidence, estimated weights absorb it completely
    ds, _ = generate(
        one_node_spec(
            2,
            kernel=KernelParams(150.0, 0.1),
            group_variances={"g0": 1.0, "g1": 10.0},
            n_groups=2,
            n_locations=30,
            n_weeks=100,
        )
    )
    pooled = fit_model(ds, SELF_ONLY, config=FitConfig(estimate_weights=False))
    weighted = fit_model(ds, SELF_ONLY)
    pooled_report = misspecification_report(pooled, ds)
    assert pooled_report.heterogeneity
    assert all(rec["p"] < 1e-10 for rec in pooled_report.heterogeneity)
    report = misspecification_report(weighted, ds)
    assert report.rejection_proportions["heterogeneity"] == 0.0


def test_diagnostic_false_alarm_rates_are_calibrated():
    # 50 panels scored by the exact model that generated them; pooled
    # rejection rates at the 0.05 cut must sit near nominal in every family
    pooled = {"temporal": [], "spatial": [], "heterogeneity": []}
    for r in range(50):
        ds, truth = generate(chain_spec(seed=r, n_locations=26, n_weeks=100))
        report = misspecification_report(truth, ds)
        pooled["temporal"].extend(rec["p"] for rec in report.temporal)
        pooled["spatial"].extend(rec["p"] for rec in report.spatial)
        pooled["heterogeneity"].extend(rec["p"] for rec in report.heterogeneity)
    for family, ps in pooled.items():
        rate = float(np.mean(np.asarray(ps) < 0.05))
        assert 0.02 <= rate <= 0.08, f"{family} false-alarm rate {rate:.4f}"


def test_model_comparison_prefers_the_true_structure():
    # an extra spurious arc must lose on evidence in nearly every draw
    truth = chain_dag()
    padded = TwoSliceDag(
        truth.nodes, truth.intra_arcs | {("w1", "c1")}, truth.inter_arcs
    )
    cfg = FitConfig(max_iterations=6, tolerance=1e-4)
    wins = 0
    for seed in range(20):
        ds, _ = generate(chain_spec(seed=seed, n_locations=16, n_weeks=60))
        lean = pnal_network(fit_model(ds, truth, config=cfg), ds, 2.0)
        fat = pnal_network(fit_model(ds, padded, config=cfg), ds, 2.0)
        wins += bayes_factor(lean, fat) > 1.0
    assert wins >= 18

    # and at c=1 the node score stays anchored to BIC exactly
    rng = np.random.default_rng(17)
    x = rng.standard_normal((10, 40))
    y = 0.3 + 0.6 * x + 0.5 * rng.standard_normal((10, 40))
    ds = make_panel(np.stack([x, y], axis=2))
    est = fit_node(
        ds, "v1", ("v0@t",), FitConfig(estimate_kernel=False, estimate_weights=False)
    )
    n = ds.n_locations * ds.n_weeks
    ols = sm.OLS(y.reshape(-1), sm.add_constant(x.reshape(-1))).fit()
    bic = -2.0 * ols.llf + math.log(n) * est.param_count
    assert est.n_used * pnal_node(est, 1.0, n) == pytest.approx(-bic / 2.0, abs=1e-9)


def test_predictive_r2_recovers_designed_noise_share():
    # x is stationary with unit variance (0.64 / (1 - 0.6^2)), and y loads on
    # it with beta^2 = 0.75 over noise 0.25, so the designed score is 0.75
    dag = TwoSliceDag(("x", "y"), frozenset({("x", "y")}), frozenset({("x", "x")}))
    spec = GeneratorSpec(
        n_locations=40,
        n_weeks=140,
        dag=dag,
        tiers={"x": "weather", "y": "condition"},
        intercepts={"x": 0.0, "y": 1.0},
        coefficients={"x": {"x@t-1": 0.6}, "y": {"x@t": math.sqrt(3.0) / 2.0}},
        kernels={"x": KernelParams(1e-6, 0.0), "y": KernelParams(1e-6, 0.0)},
        group_variances={"x": {"g0": 0.64}, "y": {"g0": 0.25}},
        seed=3,
    )
    ds, truth = generate(spec)
    train, val = split_temporal(ds, ds.weeks[89], ds.weeks[95])
    model = fit_model(train, truth.dag)
    assert predictive_r2(model, train, val)["average"] == pytest.approx(0.75, abs=0.05)


def test_interventions_match_analytic_effects():
    chain = {
        "v0": (1.0, {}),
        "v1": (0.0, {"v0@t-1": 0.8}),
        "v2": (0.0, {"v1@t-1": 0.7}),
    }
    noisy = toy_model(chain, variances={"v0": 0.3, "v1": 0.2, "v2": 0.2})
    init = complete_panel_for(noisy, fill=1.0)

    # a no-op scale must leave every delta at exactly zero
    null = intervene(
        noisy,
        InterventionSpec(kind="scale", target="v1", factor=1.0),
        init,
        horizon=6,
        draws=40,
        seed=2,
    )
    for node in chain:
        assert np.all(null.delta_mean[node] == 0.0)
    for block in null.delta_quantiles.values():
        assert all(np.all(arr == 0.0) for arr in block.values())

    # unit shift at the source: the settled response equals the product of
    # the path coefficients, exact without noise, within MC error with it
    shift = InterventionSpec(kind="set", target="v0", value=2.0)
    clean = toy_model(chain, variances={"v0": 0.0, "v1": 0.0, "v2": 0.0})
    exact = intervene(
        clean, shift, complete_panel_for(clean, fill=1.0), horizon=8, draws=1, seed=0
    ).delta_mean["v2"]
    assert np.all(exact[:2] == 0.0)
    np.testing.assert_allclose(exact[2:], 0.8 * 0.7, atol=1e-6)

    draws = 3000
    est = intervene(noisy, shift, init, horizon=8, draws=draws, seed=0).delta_mean["v2"]
    tail = est[3:]
    # under common random numbers only the source's own noise (var 0.3)
    # survives the paired comparison
    mc_se = 0.8 * 0.7 * math.sqrt(0.3 / (draws * tail.size))
    assert abs(float(tail.mean()) - 0.8 * 0.7) <= 5.0 * mc_se

    # a counterfactual response first lands exactly one path length downstream
    rng = np.random.default_rng(2024)
    for _ in range(20):
        k = int(rng.integers(3, 7))
        coefs = {"v0": (float(rng.normal()), {})}
        for j in range(1, k):
            beta = float(rng.uniform(0.3, 0.9) * rng.choice([-1.0, 1.0]))
            coefs[f"v{j}"] = (0.0, {f"v{j - 1}@t-1": beta})
        model = toy_model(coefs, variances={f"v{j}": 0.25 for j in range(k)})
        realized = complete_panel_for(model, n_weeks=k + 5)
        deltas = counterfactual(
            model, realized, "v0", at=("L000", 1), value=1.0, horizon=k + 2
        )
        lead = np.abs(deltas[f"v{k - 1}"])
        assert int(np.flatnonzero(lead > 1e-12)[0]) == k - 1


def test_variance_attribution_matches_covariance_oracle():
    # equal independent parents split the variance evenly, to high precision
    even = toy_model(
        {
            "v0": (0.0, {}),
            "v1": (0.0, {}),
            "v2": (0.0, {"v0@t-1": 0.7, "v1@t-1": 0.7}),
        },
        variances={"v0": 1.0, "v1": 1.0, "v2": 0.25},
        locations=make_locations(30),
    )
    shares = variance_attribution(even, "v2", draws=1500, settle=40, window=30, seed=0)
    assert shares["v0@t-1"] == pytest.approx(0.5, abs=1e-3)
    assert shares["v1@t-1"] == pytest.approx(0.5, abs=1e-3)
    assert sum(shares.values()) == pytest.approx(1.0, abs=1e-6)

    # correlated parents, against a large direct-sampling covariance oracle
    skewed = toy_model(
        {
            "v0": (0.0, {}),
            "v1": (0.0, {"v0@t": 1.0}),
            "v2": (0.0, {"v0@t-1": 1.0, "v1@t-1": 1.0}),
        },
        variances={"v0": 1.0, "v1": 3.0, "v2": 0.5},
    )
    shares = variance_attribution(skewed, "v2", draws=500, seed=15)
    rng = np.random.default_rng(99)
    x0 = rng.standard_normal(1_000_000)
    x1 = x0 + math.sqrt(3.0) * rng.standard_normal(1_000_000)
    cov = np.cov(np.column_stack([x0, x1]), rowvar=False)
    beta = np.ones(2)
    want = (beta * (cov @ beta)) / float(beta @ cov @ beta)
    assert shares["v0@t-1"] == pytest.approx(want[0], abs=0.02)
    assert shares["v1@t-1"] == pytest.approx(want[1], abs=0.02)
    assert sum(shares.values()) == pytest.approx(1.0, abs=1e-6)


def test_cli_pipeline_reruns_are_byte_identical(tmp_path):
    def run(*argv):
        return main([str(a) for a in argv])

    def artifacts(outdir):
        # .meta.json side files carry wall-clock timestamps and are the one
        # sanctioned source of nondeterminism
        return {
            p.name: p.read_bytes()
            for p in sorted(outdir.rglob("*"))
            if p.is_file() and not p.name.endswith(".meta.json")
        }

    spec_path = tmp_path / "spec.json"
    spec_path.write_text(
        json.dumps(chain_spec(seed=7, n_locations=16, n_weeks=60).to_doc())
    )
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({
        "fit": {"max_iterations": 8, "tolerance": 1e-5},
        "search": {"patience": 10, "restarts": 1, "max_steps": 150, "perturb_moves": 2},
    }))

    # every stage reruns against the same inputs, with only --output (and for
    # learn, --threads) varying; provenance hashes cover the inputs, so a
    # moved input file is a different invocation by design
    sim, sim2 = tmp_path / "sim", tmp_path / "sim2"
    assert run("simulate-data", "--spec", spec_path, "--output", sim) == 0
    assert run("simulate-data", "--spec", spec_path, "--output", sim2) == 0
    assert artifacts(sim2) == artifacts(sim)

    data = sim / "dataset.json"
    learn_argv = (
        "learn", "--data", data, "--config", config_path, "--c", "2.0",
        "--bootstrap", "3", "--threshold", "0.5", "--seed", "5",
    )
    learn, learn2, learn_t2 = tmp_path / "learn", tmp_path / "learn2", tmp_path / "lt2"
    assert run(*learn_argv, "--output", learn) == 0
    assert run(*learn_argv, "--output", learn2) == 0
    assert run(*learn_argv, "--threads", 2, "--output", learn_t2) == 0
    assert artifacts(learn2) == artifacts(learn)
    assert artifacts(learn_t2) == artifacts(learn)

    model = learn / "model.json"
    schema = json.loads(data.read_text())["schema"]
    queries = tmp_path / "queries.json"
    queries.write_text(json.dumps({"queries": [
        {"type": "intervention", "horizon": 4, "draws": 30,
         "spec": {"kind": "scale", "target": "p1", "factor": 1.0}},
        {"type": "counterfactual", "node": "w1",
         "location": schema["locations"][0]["id"],
         "week": schema["weeks"][2], "value": 1.0, "horizon": 3},
    ]}))

    stages = (
        ("diagnose", "--data", data, "--model", model),
        ("predict", "--data", data, "--model", model, "--config", config_path,
         "--train-end", schema["weeks"][44], "--val-start", schema["weeks"][49]),
        ("query", "--data", data, "--model", model,
         "--queries", queries, "--seed", "3"),
    )
    for i, argv in enumerate(stages):
        out, out2 = tmp_path / f"s{i}", tmp_path / f"s{i}b"
        assert run(*argv, "--output", out) == 0
        assert run(*argv, "--output", out2) == 0
        assert artifacts(out2) == artifacts(out)
