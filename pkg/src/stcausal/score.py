"""Network scoring: penalised node-averaged likelihood and Bayes factors.

The per-node score averages the Gaussian log-likelihood over that node's
locally complete rows and subtracts a complexity penalty

    pnal = loglik_avg - (c * log(n) / 2) * param_count / n_used

where n is the full panel cell count (locations x weeks), shared by every
node so penalties are comparable, and n_used is the node's own row count.
The network score is decomposable: one node's entry depends only on its own
parent set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import MismatchedScoresError
from .model import CausalModel
from .nodefit import NodeEstimate
from .panel import PanelDataset


@dataclass(frozen=True)
class ScoreBreakdown:
    """Per-node PNAL terms plus network totals for one (model, dataset, c)."""

    per_node: dict[str, dict]
    total: float
    total_normalized: float
    c: float
    n: int
    dataset_hash: str

    def to_doc(self) -> dict:
        return {
            "per_node": {k: dict(v) for k, v in sorted(self.per_node.items())},
            "total": self.total,
            "total_normalized": self.total_normalized,
            "c": self.c,
            "n": self.n,
            "dataset_hash": self.dataset_hash,
        }


def pnal_node(est: NodeEstimate, c: float, n: int) -> float:
    """One node's penalised average log-likelihood."""
    if est.n_used <= 0:
        raise ValueError(f"node {est.node!r} has no usable rows")
    if c <= 0.0:
        raise ValueError(f"penalty coefficient must be positive, got {c}")
    penalty = (c * math.log(n) / 2.0) * est.param_count / est.n_used
    return est.loglik_avg - penalty


def pnal_network(model: CausalModel, ds: PanelDataset, c: float) -> ScoreBreakdown:
    """Score a fitted model on the dataset it was fitted to."""
    n = ds.n_locations * ds.n_weeks
    per_node = {}
    total = 0.0
    weighted = 0.0
    for node in model.dag.nodes:
        est = model.estimates[node]
        penalty = (c * math.log(n) / 2.0) * est.param_count / est.n_used
        pnal = est.loglik_avg - penalty
        per_node[node] = {
            "loglik_avg": est.loglik_avg,
            "n_used": est.n_used,
            "param_count": est.param_count,
            "penalty": penalty,
            "pnal": pnal,
        }
        total += pnal
        weighted += est.n_used * pnal
    return ScoreBreakdown(
        per_node=per_node,
        total=total,
        total_normalized=weighted / n,
        c=c,
        n=n,
        dataset_hash=ds.dataset_hash,
    )


def log_bayes_factor(s1: ScoreBreakdown, s2: ScoreBreakdown) -> float:
    """log BF of model 1 over model 2 on the shared dataset."""
    if s1.n != s2.n or s1.c != s2.c or s1.dataset_hash != s2.dataset_hash:
        raise MismatchedScoresError(
            "score breakdowns come from different datasets or penalty settings"
        )
    return s1.n * (s1.total_normalized - s2.total_normalized)


def bayes_factor(s1: ScoreBreakdown, s2: ScoreBreakdown) -> float:
    """BF of model 1 over model 2; > 1 favors model 1.  Overflows to inf."""
    lbf = log_bayes_factor(s1, s2)
    try:
        return math.exp(lbf)
    except OverflowError:
        return math.inf
