"""The fitted causal model: a two-slice DAG plus one estimate per node.

CausalModel is the unit of persistence (a single JSON document) and the
input to every downstream query and diagnostic.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaMismatchError
from .graphs import TwoSliceDag
from .nodefit import FitConfig, NodeEstimate, build_design, fit_node
from .panel import Location, PanelDataset, VariableSpec


@dataclass(frozen=True)
class CausalModel:
    """A structure, its per-node estimates, and the context they were fit in."""

    dag: TwoSliceDag
    estimates: dict[str, NodeEstimate]
    variables: tuple[VariableSpec, ...]
    locations: tuple[Location, ...]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "locations", tuple(self.locations))
        for node in self.dag.nodes:
            est = self.estimates.get(node)
            if est is None:
                raise SchemaMismatchError(f"node {node!r} has no estimate")
            want = self.dag.parents(node)
            if tuple(est.coefficients) != want:
                raise SchemaMismatchError(
                    f"node {node!r}: estimate terms {tuple(est.coefficients)} "
                    f"!= dag parents {want}"
                )

    @property
    def var_specs(self) -> dict[str, VariableSpec]:
        return {v.name: v for v in self.variables}

    def static_nodes(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables if v.static)

    def to_doc(self) -> dict:
        return {
            "dag": self.dag.to_doc(),
            "estimates": {n: e.to_doc() for n, e in sorted(self.estimates.items())},
            "variables": [
                {"name": v.name, "tier": v.tier, "static": v.static} for v in self.variables
            ],
            "locations": [
                {"id": l.id, "lat": l.lat, "lon": l.lon, "group": l.group}
                for l in self.locations
            ],
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_doc(cls, doc: dict) -> "CausalModel":
        return cls(
            dag=TwoSliceDag.from_doc(doc["dag"]),
            estimates={n: NodeEstimate.from_doc(e) for n, e in doc["estimates"].items()},
            variables=tuple(VariableSpec(**d) for d in doc["variables"]),
            locations=tuple(Location(**d) for d in doc["locations"]),
            provenance=doc.get("provenance", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "CausalModel":
        return cls.from_doc(json.loads(text))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "CausalModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def fit_model(
    ds: PanelDataset,
    dag: TwoSliceDag,
    config: FitConfig = FitConfig(),
    provenance: dict | None = None,
    threads: int | None = None,
) -> CausalModel:
    """Fit every node of ``dag`` on ``ds``.

    Node fits are independent; with ``threads`` > 1 they run concurrently on
    the shared read-only dataset, collected in node order so the result does
    not depend on scheduling.
    """
    nodes = list(dag.nodes)

    def one(node):
        return fit_node(ds, node, dag.parents(node), config)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fits = list(pool.map(one, nodes))
    else:
        fits = [one(n) for n in nodes]

    prov = {"dataset_hash": ds.dataset_hash, "fit_config": config.to_doc()}
    if provenance:
        prov.update(provenance)
    return CausalModel(
        dag=dag,
        estimates=dict(zip(nodes, fits)),
        variables=ds.variables,
        locations=ds.locations,
        provenance=prov,
    )


def fitted_values(est: NodeEstimate, ds: PanelDataset) -> np.ndarray:
    """Model predictions for one node on every locally complete cell.

    Returns a (locations, weeks) panel, NaN where any parent term or the
    node itself is unobserved.
    """
    terms = list(est.coefficients)
    _, X0, mask = build_design(ds, est.node, terms)
    beta = np.array([est.coefficients[t] for t in terms])
    pred = est.intercept + (X0 @ beta if terms else np.zeros(mask.shape))
    return np.where(mask, pred, np.nan)
