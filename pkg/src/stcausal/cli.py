"""Command-line pipeline: ingest, simulate-data, learn, score, diagnose,
predict, query.

Every command writes sorted-key JSON artifacts (plus CSV tables where
tabular output is more useful) into the output directory.  Timestamps live
only in ``<artifact>.meta.json`` side files so that rerunning a command with
the same configuration and seed reproduces the main artifacts byte for
byte, at any ``--threads`` value.  Module errors surface as a one-line JSON
object on stderr and exit code 2 (validation) or 3 (numerical failure).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .diagnose import misspecification_report, predictive_r2
from .errors import StcausalError, UnknownColumnError
from .graphs import ConstraintSet, default_constraints
from .learn import SearchConfig, bootstrap_average, tabu_learn
from .model import CausalModel, fit_model
from .nodefit import FitConfig
from .panel import PanelDataset, filter_coverage, load_panel_csv, split_temporal, write_panel_csv
from .query import InterventionSpec, counterfactual, intervene, mediation_share, variance_attribution
from .score import log_bayes_factor, pnal_network
from .synthgen import GeneratorSpec, generate

DEFAULT_C_GRID = (2.0, 4.0, 8.0, 16.0, 32.0)


@dataclasses.dataclass
class RunConfig:
    """One resolved invocation: command, parameters, seed, workers, output.

    ``params`` holds everything that affects results; ``threads`` and
    ``output`` deliberately stay outside the config hash.
    """

    command: str
    params: dict
    seed: int | None
    threads: int | None
    output: Path

    @property
    def config_hash(self) -> str:
        doc = {"command": self.command, "params": self.params, "seed": self.seed}
        return hashlib.sha256(
            json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest()[:16]


def _require_seed(rc: RunConfig):
    if rc.seed is None:
        raise StcausalError(f"--seed is required for the stochastic command {rc.command!r}")


def _write_json(rc: RunConfig, name: str, doc: dict, dataset_hash: str | None = None):
    rc.output.mkdir(parents=True, exist_ok=True)
    prov = dict(doc.get("provenance") or {})
    prov["config_hash"] = rc.config_hash
    prov["seed"] = rc.seed
    if dataset_hash is not None:
        prov["dataset_hash"] = dataset_hash
    doc = dict(doc)
    doc["provenance"] = prov
    path = rc.output / name
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    meta = {
        "artifact": name,
        "written_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config_hash": rc.config_hash,
        "seed": rc.seed,
        "dataset_hash": dataset_hash,
    }
    meta_path = rc.output / (name.rsplit(".", 1)[0] + ".meta.json")
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_dataset(rc: RunConfig) -> PanelDataset:
    path = rc.params["data"]
    if path is None:
        raise StcausalError("--data is required")
    if str(path).endswith(".json"):
        return PanelDataset.from_json(Path(path).read_text(encoding="utf-8"))
    schema_path = rc.params.get("schema")
    if schema_path is None:
        raise UnknownColumnError("CSV input needs --schema <schema.json>")
    with open(schema_path, encoding="utf-8") as fh:
        return load_panel_csv(path, json.load(fh))


def _constraints(rc: RunConfig, ds: PanelDataset) -> ConstraintSet:
    path = rc.params.get("constraints")
    if path is None:
        return default_constraints(ds.variables)
    return ConstraintSet.from_file(path)


def _fit_config(rc: RunConfig) -> FitConfig:
    return FitConfig.from_doc(rc.params.get("fit") or {})


def _search_config(rc: RunConfig) -> SearchConfig:
    cfg = SearchConfig.from_doc(rc.params.get("search") or {})
    return dataclasses.replace(
        cfg, seed=rc.seed if rc.seed is not None else cfg.seed,
        threads=rc.threads, fit=_fit_config(rc),
    )


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_ingest(rc: RunConfig) -> int:
    ds = _load_dataset(rc)
    before = (ds.n_locations, ds.n_weeks, len(ds.variables))
    filtered = filter_coverage(ds, rc.params["max_missing"])
    doc = json.loads(filtered.to_json())
    _write_json(rc, "dataset.json", doc, dataset_hash=filtered.dataset_hash)
    print(
        f"ingested {before[0]} locations x {before[1]} weeks x {before[2]} variables; "
        f"kept {filtered.n_locations} x {filtered.n_weeks} x {len(filtered.variables)} "
        f"(hash {filtered.dataset_hash})"
    )
    return 0


def _cmd_simulate_data(rc: RunConfig) -> int:
    with open(rc.params["spec"], encoding="utf-8") as fh:
        spec = GeneratorSpec.from_doc(json.load(fh))
    if rc.seed is not None:
        spec = dataclasses.replace(spec, seed=rc.seed)
    rc.seed = spec.seed
    print(f"seed: {spec.seed}")
    ds, truth = generate(spec)
    rc.output.mkdir(parents=True, exist_ok=True)
    write_panel_csv(ds, rc.output / "data.csv")
    _write_json(rc, "dataset.json", json.loads(ds.to_json()), dataset_hash=ds.dataset_hash)
    _write_json(rc, "truth_model.json", truth.to_doc(), dataset_hash=ds.dataset_hash)
    print(
        f"generated {ds.n_locations} locations x {ds.n_weeks} weeks x "
        f"{len(ds.variables)} variables (hash {ds.dataset_hash})"
    )
    return 0


def _cmd_learn(rc: RunConfig) -> int:
    _require_seed(rc)
    print(f"seed: {rc.seed}")
    ds = _load_dataset(rc)
    cs = _constraints(rc, ds)
    c = rc.params["c"]
    scfg = _search_config(rc)
    B = rc.params["bootstrap"]
    if B > 0:
        avg = bootstrap_average(ds, cs, c, B=B, threshold=rc.params["threshold"], cfg=scfg)
        dag = avg.consensus
        _write_json(rc, "structure.json", avg.to_doc(), dataset_hash=ds.dataset_hash)
    else:
        dag, breakdown = tabu_learn(ds, cs, c, scfg)
        _write_json(
            rc,
            "structure.json",
            {"dag": dag.to_doc(), "score": breakdown.to_doc()},
            dataset_hash=ds.dataset_hash,
        )
    model = fit_model(ds, dag, config=scfg.fit, threads=rc.threads)
    _write_json(rc, "model.json", model.to_doc(), dataset_hash=ds.dataset_hash)
    print(
        f"learned structure: {len(dag.intra_arcs)} intra + {len(dag.inter_arcs)} inter arcs"
    )
    return 0


def _cmd_score(rc: RunConfig) -> int:
    ds = _load_dataset(rc)
    fit_cfg = _fit_config(rc)
    grid = rc.params["c_grid"]
    names, fitted = [], []
    for path in rc.params["models"]:
        stored = CausalModel.load(path)
        name = Path(path).stem
        if name in names:
            name = str(path)
        names.append(name)
        fitted.append(fit_model(ds, stored.dag, config=fit_cfg, threads=rc.threads))

    table = []
    for c in grid:
        breakdowns = [pnal_network(m, ds, c) for m in fitted]
        entry = {
            "c": c,
            "scores": {nm: b.to_doc() for nm, b in zip(names, breakdowns)},
            "log_bf_vs_first": {
                nm: log_bayes_factor(b, breakdowns[0])
                for nm, b in zip(names[1:], breakdowns[1:])
            },
        }
        table.append(entry)
    _write_json(rc, "score.json", {"models": names, "sweep": table}, dataset_hash=ds.dataset_hash)
    for entry in table:
        totals = ", ".join(
            f"{nm}={entry['scores'][nm]['total_normalized']:.4f}" for nm in names
        )
        print(f"c={entry['c']:g}: {totals}")
    return 0


def _cmd_diagnose(rc: RunConfig) -> int:
    permutations = rc.params["permutations"]
    if permutations > 0:
        _require_seed(rc)
        print(f"seed: {rc.seed}")
    ds = _load_dataset(rc)
    model = CausalModel.load(rc.params["model"])
    report = misspecification_report(
        model,
        ds,
        alpha=rc.params["alpha"],
        lags=rc.params["lags"],
        permutations=permutations,
        seed=rc.seed if rc.seed is not None else 0,
    )
    _write_json(rc, "diagnostics.json", report.to_doc(), dataset_hash=ds.dataset_hash)
    text = report.summary_text()
    (rc.output / "diagnostics.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def _cmd_predict(rc: RunConfig) -> int:
    ds = _load_dataset(rc)
    model = CausalModel.load(rc.params["model"])
    train, validation = split_temporal(ds, rc.params["train_end"], rc.params["val_start"])
    fitted = fit_model(train, model.dag, config=_fit_config(rc), threads=rc.threads)
    r2 = predictive_r2(fitted, train, validation)
    doc = {
        "r2": r2,
        "train_weeks": [w.isoformat() for w in train.weeks],
        "validation_weeks": [w.isoformat() for w in validation.weeks],
    }
    _write_json(rc, "predict.json", doc, dataset_hash=ds.dataset_hash)
    avg = r2.get("average")
    print(f"predictive R^2 (condition average): {'n/a' if avg is None else f'{avg:.4f}'}")
    return 0


def _cmd_query(rc: RunConfig) -> int:
    _require_seed(rc)
    print(f"seed: {rc.seed}")
    ds = _load_dataset(rc)
    model = CausalModel.load(rc.params["model"])
    with open(rc.params["queries"], encoding="utf-8") as fh:
        queries = json.load(fh)["queries"]

    results = []
    trajectory_rows = []
    for i, q in enumerate(queries):
        kind = q["type"]
        seed_i = rc.seed + i
        if kind == "intervention":
            spec = InterventionSpec.from_doc(q["spec"])
            res = intervene(
                model,
                spec,
                ds,
                horizon=q["horizon"],
                draws=q.get("draws", rc.params["draws"]),
                seed=seed_i,
            )
            results.append({"type": kind, "seed": seed_i, "result": res.to_doc()})
            trajectory_rows.extend(_trajectory_rows(i, res))
        elif kind == "attribution":
            shares = variance_attribution(
                model, q["outcome"], init=ds, draws=q.get("draws", rc.params["draws"]),
                seed=seed_i,
            )
            results.append({"type": kind, "seed": seed_i, "outcome": q["outcome"], "shares": shares})
        elif kind == "mediation":
            share = mediation_share(
                model,
                q["exposure"],
                q["mediators"],
                q["outcome"],
                lag=q["lag"],
                init=ds,
                draws=q.get("draws", rc.params["draws"]),
                seed=seed_i,
            )
            results.append(
                {
                    "type": kind,
                    "seed": seed_i,
                    "exposure": q["exposure"],
                    "mediators": sorted(q["mediators"]),
                    "outcome": q["outcome"],
                    "lag": q["lag"],
                    "share": share,
                }
            )
        elif kind == "counterfactual":
            deltas = counterfactual(
                model,
                ds,
                q["node"],
                at=(q["location"], q["week"]),
                value=q["value"],
                horizon=q["horizon"],
            )
            results.append(
                {
                    "type": kind,
                    "node": q["node"],
                    "location": q["location"],
                    "week": q["week"],
                    "value": q["value"],
                    "deltas": {n: d.tolist() for n, d in sorted(deltas.items())},
                }
            )
        else:
            raise StcausalError(f"unknown query type {kind!r}")

    _write_json(rc, "query_results.json", {"queries": results}, dataset_hash=ds.dataset_hash)
    if trajectory_rows:
        _write_trajectories(rc.output / "trajectories.csv", trajectory_rows)
    print(f"ran {len(results)} queries")
    return 0


def _trajectory_rows(query_index: int, res) -> list[list]:
    rows = []
    for node in res.nodes:
        mean = res.mean[node]
        q05, q50, q95 = (res.quantiles[k][node] for k in ("q05", "q50", "q95"))
        dm = res.delta_mean[node] if res.delta_mean else None
        for t in range(mean.shape[0]):
            for l, loc in enumerate(res.loc_ids):
                row = [
                    query_index, node, t, loc,
                    repr(float(mean[t, l])),
                    repr(float(q05[t, l])),
                    repr(float(q50[t, l])),
                    repr(float(q95[t, l])),
                ]
                row.append("" if dm is None else repr(float(dm[t, l])))
                rows.append(row)
    return rows


def _write_trajectories(path: Path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["query", "node", "week", "location", "mean", "q05", "q50", "q95", "delta_mean"]
        )
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Argument parsing

_COMMANDS = {
    "ingest": _cmd_ingest,
    "simulate-data": _cmd_simulate_data,
    "learn": _cmd_learn,
    "score": _cmd_score,
    "diagnose": _cmd_diagnose,
    "predict": _cmd_predict,
    "query": _cmd_query,
}


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with defaults for any parameter")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--output", default=".", help="artifact directory")

    p = argparse.ArgumentParser(prog="stcausal", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("ingest", parents=[common])
    sp.add_argument("--data", help="panel CSV or dataset JSON")
    sp.add_argument("--schema", help="schema JSON (required for CSV input)")
    sp.add_argument("--max-missing", type=float, default=0.5, dest="max_missing")

    sp = sub.add_parser("simulate-data", parents=[common])
    sp.add_argument("--spec", required=True, help="GeneratorSpec JSON")

    sp = sub.add_parser("learn", parents=[common])
    sp.add_argument("--data")
    sp.add_argument("--schema")
    sp.add_argument("--constraints", help="ConstraintSet JSON (default: tier rules)")
    sp.add_argument("--c", type=float, default=2.0, help="penalty coefficient")
    sp.add_argument("--bootstrap", type=int, default=0, help="replicates (0 = single search)")
    sp.add_argument("--threshold", type=float, default=0.5)

    sp = sub.add_parser("score", parents=[common])
    sp.add_argument("--data")
    sp.add_argument("--schema")
    sp.add_argument("--models", nargs="+", required=True, help="model JSON files")
    sp.add_argument(
        "--c-grid", dest="c_grid", default=",".join(str(c) for c in DEFAULT_C_GRID)
    )

    sp = sub.add_parser("diagnose", parents=[common])
    sp.add_argument("--data")
    sp.add_argument("--schema")
    sp.add_argument("--model", required=True)
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--lags", type=int, default=8)
    sp.add_argument("--permutations", type=int, default=0)

    sp = sub.add_parser("predict", parents=[common])
    sp.add_argument("--data")
    sp.add_argument("--schema")
    sp.add_argument("--model", required=True)
    sp.add_argument("--train-end", dest="train_end", required=True)
    sp.add_argument("--val-start", dest="val_start", required=True)

    sp = sub.add_parser("query", parents=[common])
    sp.add_argument("--data")
    sp.add_argument("--schema")
    sp.add_argument("--model", required=True)
    sp.add_argument("--queries", required=True, help="query document JSON")
    sp.add_argument("--draws", type=int, default=500)

    return p


def _make_config(args: argparse.Namespace) -> RunConfig:
    file_cfg = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)

    params = {}
    skip = {"command", "config", "seed", "threads", "output"}
    for key, value in vars(args).items():
        if key in skip:
            continue
        if value is None and key in file_cfg:
            value = file_cfg[key]
        params[key] = value
    for key in ("fit", "search"):
        if key in file_cfg:
            params[key] = file_cfg[key]
    if "c_grid" in params and isinstance(params["c_grid"], str):
        params["c_grid"] = [float(x) for x in params["c_grid"].split(",") if x]

    seed = args.seed if args.seed is not None else file_cfg.get("seed")
    threads = args.threads if args.threads is not None else file_cfg.get("threads")
    return RunConfig(
        command=args.command,
        params=params,
        seed=seed,
        threads=threads,
        output=Path(args.output),
    )


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        rc = _make_config(args)
        return _COMMANDS[args.command](rc)
    except StcausalError as exc:
        _emit_error(exc, exc.exit_code)
        return exc.exit_code
    except np.linalg.LinAlgError as exc:
        _emit_error(exc, 3)
        return 3
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        _emit_error(exc, 2)
        return 2


def _emit_error(exc: BaseException, code: int):
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
