"""Constrained structure search over two-slice DAGs with bootstrap averaging.

Tabu search over the move set {add, delete, reverse intra arc; add, delete
inter arc}, scored by the decomposable network PNAL with a per-parent-set
score cache.  Bootstrap averaging resamples whole locations with
replacement, learns a structure per replicate, and thresholds arc
inclusion frequencies into a consensus graph.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateVariogramError,
    RankDeficientError,
    SchemaMismatchError,
    SingularKernelError,
    TooFewRowsError,
    UnsatisfiableError,
)
from .graphs import (
    INTER,
    INTRA,
    AveragedDag,
    ConstraintSet,
    TwoSliceDag,
    consensus_dag,
    make_term,
    validate_constraints,
)
from .nodefit import FitConfig, fit_node
from .panel import Location, PanelDataset
from .score import ScoreBreakdown, pnal_node

_TIE_EPS = 1e-12
_IMPROVE_EPS = 1e-9


@dataclass(frozen=True)
class SearchConfig:
    """Tabu search and bootstrap knobs; all values are deliberate defaults,
    overridable from the CLI."""

    tenure: int = 10
    patience: int = 100
    restarts: int = 5
    max_steps: int = 1000
    perturb_moves: int = 4
    seed: int = 0
    threads: int | None = None
    fit: FitConfig = field(default_factory=FitConfig)

    def to_doc(self) -> dict:
        return {
            "tenure": self.tenure,
            "patience": self.patience,
            "restarts": self.restarts,
            "max_steps": self.max_steps,
            "perturb_moves": self.perturb_moves,
            "seed": self.seed,
            "threads": self.threads,
            "fit": self.fit.to_doc(),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "SearchConfig":
        doc = dict(doc)
        if "fit" in doc:
            doc["fit"] = FitConfig.from_doc(doc["fit"])
        return cls(**doc)


class LocalScoreCache:
    """Per-(node, parent set) PNAL scores, fitted lazily and memoized.

    ``fit_count`` counts actual fits, exposing the decomposability of the
    network score: rescoring after a single-arc move must fit at most the
    affected nodes.
    """

    def __init__(self, ds: PanelDataset, c: float, fit_config: FitConfig):
        self.ds = ds
        self.c = c
        self.fit_config = fit_config
        self.n = ds.n_locations * ds.n_weeks
        self.fit_count = 0
        self._store: dict = {}

    def entry(self, node: str, terms: tuple):
        key = (node, frozenset(terms))
        hit = self._store.get(key)
        if hit is None:
            self.fit_count += 1
            try:
                est = fit_node(self.ds, node, terms, self.fit_config)
                hit = (pnal_node(est, self.c, self.n), est)
            except (
                TooFewRowsError,
                RankDeficientError,
                SingularKernelError,
                DegenerateVariogramError,
            ):
                hit = (-math.inf, None)
            self._store[key] = hit
        return hit

    def score(self, node: str, terms) -> float:
        return self.entry(node, tuple(terms))[0]

    def estimate(self, node: str, terms):
        return self.entry(node, tuple(terms))[1]


class _SearchState:
    """Mutable arc sets with incremental parent-term and score bookkeeping."""

    def __init__(self, nodes, intra, inter, cache: LocalScoreCache):
        self.nodes = tuple(nodes)
        self.intra = set(intra)
        self.inter = set(inter)
        self.cache = cache
        self.scores = {n: cache.score(n, self.terms(n)) for n in self.nodes}

    def terms(self, node, intra=None, inter=None) -> tuple[str, ...]:
        intra = self.intra if intra is None else intra
        inter = self.inter if inter is None else inter
        ip = sorted(a for a, b in intra if b == node)
        lp = sorted(a for a, b in inter if b == node)
        return tuple([make_term(a, 0) for a in ip] + [make_term(a, 1) for a in lp])

    @property
    def total(self) -> float:
        return sum(self.scores.values())

    def has_intra_path(self, src, dst, skip_arc=None) -> bool:
        seen, frontier = {src}, [src]
        while frontier:
            n = frontier.pop()
            if n == dst:
                return True
            for a, b in self.intra:
                if a == n and (a, b) != skip_arc and b not in seen:
                    seen.add(b)
                    frontier.append(b)
        return False

    def dag(self) -> TwoSliceDag:
        return TwoSliceDag(
            nodes=self.nodes,
            intra_arcs=frozenset(self.intra),
            inter_arcs=frozenset(self.inter),
        )

    def apply(self, move):
        op, kind, a, b = move
        if kind == INTRA:
            if op == "add":
                self.intra.add((a, b))
                self._rescore(b)
            elif op == "del":
                self.intra.discard((a, b))
                self._rescore(b)
            else:  # rev
                self.intra.discard((a, b))
                self.intra.add((b, a))
                self._rescore(a)
                self._rescore(b)
        else:
            if op == "add":
                self.inter.add((a, b))
            else:
                self.inter.discard((a, b))
            self._rescore(b)

    def _rescore(self, node):
        self.scores[node] = self.cache.score(node, self.terms(node))


def _admissible_moves(state: _SearchState, cs: ConstraintSet):
    """All legal moves from the current graph, in lexicographic order."""
    moves = []
    nodes = sorted(state.nodes)
    for a in nodes:
        for b in nodes:
            if a != b:
                if (a, b) in state.intra:
                    if (a, b, INTRA) not in cs.whitelist:
                        moves.append(("del", INTRA, a, b))
                        if cs.arc_allowed(b, a, INTRA) and not state.has_intra_path(
                            a, b, skip_arc=(a, b)
                        ):
                            moves.append(("rev", INTRA, a, b))
                elif cs.arc_allowed(a, b, INTRA) and not state.has_intra_path(b, a):
                    moves.append(("add", INTRA, a, b))
            # inter arcs, self-loops included; static targets are constant
            # over time, so lagged arcs into them are never proposed
            if b in cs.static:
                continue
            if (a, b) in state.inter:
                if (a, b, INTER) not in cs.whitelist:
                    moves.append(("del", INTER, a, b))
            elif cs.arc_allowed(a, b, INTER):
                moves.append(("add", INTER, a, b))
    moves.sort()
    return moves


def _move_delta(state: _SearchState, move) -> float:
    op, kind, a, b = move
    if kind == INTRA and op == "rev":
        intra2 = (state.intra - {(a, b)}) | {(b, a)}
        new = state.cache.score(a, state.terms(a, intra=intra2)) + state.cache.score(
            b, state.terms(b, intra=intra2)
        )
        return new - state.scores[a] - state.scores[b]
    if kind == INTRA:
        intra2 = state.intra | {(a, b)} if op == "add" else state.intra - {(a, b)}
        return state.cache.score(b, state.terms(b, intra=intra2)) - state.scores[b]
    inter2 = state.inter | {(a, b)} if op == "add" else state.inter - {(a, b)}
    return state.cache.score(b, state.terms(b, inter=inter2)) - state.scores[b]


def _inverse(move):
    op, kind, a, b = move
    if op == "add":
        return ("del", kind, a, b)
    if op == "del":
        return ("add", kind, a, b)
    return ("rev", kind, b, a)


def _tabu_run(state: _SearchState, cs: ConstraintSet, cfg: SearchConfig, global_best: float):
    """One tabu descent from the current state; returns the best arcs seen."""
    best_arcs = (frozenset(state.intra), frozenset(state.inter))
    best_total = state.total
    tabu: dict = {}
    since_improve = 0
    for step in range(1, cfg.max_steps + 1):
        moves = _admissible_moves(state, cs)
        if not moves:
            break
        best_move = None
        best_delta = -math.inf
        current = state.total
        for move in moves:
            delta = _move_delta(state, move)
            blocked = tabu.get(move, 0) >= step
            if blocked and current + delta <= max(best_total, global_best) + _IMPROVE_EPS:
                continue  # tabu and no aspiration
            if delta > best_delta + _TIE_EPS:
                best_delta = delta
                best_move = move
        if best_move is None:
            break
        state.apply(best_move)
        tabu[_inverse(best_move)] = step + cfg.tenure
        if state.total > best_total + _IMPROVE_EPS:
            best_total = state.total
            best_arcs = (frozenset(state.intra), frozenset(state.inter))
            since_improve = 0
        else:
            since_improve += 1
            if since_improve > cfg.patience:
                break
    return best_arcs, best_total


def tabu_learn(
    ds: PanelDataset, cs: ConstraintSet, c: float, cfg: SearchConfig = SearchConfig()
):
    """Search for a high-PNAL admissible structure.

    Returns (dag, breakdown).  Starts from the whitelist-only graph, runs one
    tabu descent plus ``restarts`` descents from randomly perturbed copies of
    the incumbent, and keeps the best structure seen anywhere.
    """
    for name in ds.var_names:
        if name not in cs.tiers:
            raise SchemaMismatchError(f"variable {name!r} has no tier in the constraint set")

    intra0 = frozenset((a, b) for a, b, k in cs.whitelist if k == INTRA)
    inter0 = frozenset((a, b) for a, b, k in cs.whitelist if k == INTER)
    start = TwoSliceDag(nodes=ds.var_names, intra_arcs=intra0, inter_arcs=inter0)
    violations = validate_constraints(start, cs)
    if violations:
        raise UnsatisfiableError(
            "whitelist conflicts with the other constraints: "
            + "; ".join(str(v) for v in violations)
        )

    cache = LocalScoreCache(ds, c, cfg.fit)
    state = _SearchState(ds.var_names, intra0, inter0, cache)
    if not _admissible_moves(state, cs):
        raise UnsatisfiableError("no admissible move from the initial graph")

    rng = np.random.default_rng(cfg.seed)
    best_arcs, best_total = _tabu_run(state, cs, cfg, -math.inf)
    for _ in range(cfg.restarts):
        state.intra, state.inter = set(best_arcs[0]), set(best_arcs[1])
        for n in state.nodes:
            state._rescore(n)
        _perturb(state, cs, cfg.perturb_moves, rng)
        arcs, total = _tabu_run(state, cs, cfg, best_total)
        if total > best_total + _IMPROVE_EPS:
            best_arcs, best_total = arcs, total

    dag = TwoSliceDag(nodes=ds.var_names, intra_arcs=best_arcs[0], inter_arcs=best_arcs[1])
    return dag, _breakdown(dag, cache)


def _perturb(state: _SearchState, cs: ConstraintSet, k: int, rng):
    for _ in range(k):
        moves = _admissible_moves(state, cs)
        if not moves:
            return
        state.apply(moves[int(rng.integers(len(moves)))])


def _breakdown(dag: TwoSliceDag, cache: LocalScoreCache) -> ScoreBreakdown:
    per_node = {}
    total = 0.0
    weighted = 0.0
    for node in dag.nodes:
        est = cache.estimate(node, dag.parents(node))
        if est is None:
            raise UnsatisfiableError(f"final structure has an unscorable node {node!r}")
        penalty = (cache.c * math.log(cache.n) / 2.0) * est.param_count / est.n_used
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
        total_normalized=weighted / cache.n,
        c=cache.c,
        n=cache.n,
        dataset_hash=cache.ds.dataset_hash,
    )


# ---------------------------------------------------------------------------
# Bootstrap model averaging


def resample_locations(ds: PanelDataset, indices) -> PanelDataset:
    """Dataset with the given location rows, duplicates kept as distinct ids."""
    locs = []
    for k, i in enumerate(indices):
        src = ds.locations[i]
        locs.append(Location(id=f"{src.id}~{k}", lat=src.lat, lon=src.lon, group=src.group))
    idx = np.asarray(indices, dtype=int)
    return PanelDataset(
        locations=tuple(locs),
        weeks=ds.weeks,
        variables=ds.variables,
        values=ds.values[idx].copy(),
        missing=ds.missing[idx].copy(),
    )


def bootstrap_average(
    ds: PanelDataset,
    cs: ConstraintSet,
    c: float,
    B: int = 100,
    threshold: float = 0.5,
    cfg: SearchConfig = SearchConfig(),
) -> AveragedDag:
    """Arc inclusion frequencies over B location-bootstrap replicates.

    Each replicate resamples whole locations with replacement, learns a
    structure with its own spawned seed, and votes for its arcs.  The
    consensus keeps arcs at or above ``threshold``, repaired to acyclicity
    by dropping the weakest cycle-closing arcs.
    """
    if B < 1:
        raise ValueError(f"B must be >= 1, got {B}")
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")

    children = np.random.SeedSequence(cfg.seed).spawn(B)

    def one(b: int) -> TwoSliceDag:
        rng = np.random.default_rng(children[b])
        idx = np.sort(rng.integers(0, ds.n_locations, size=ds.n_locations))
        rcfg = replace(cfg, seed=int(children[b].generate_state(1)[0]), threads=None)
        dag, _ = tabu_learn(resample_locations(ds, idx), cs, c, rcfg)
        return dag

    if cfg.threads and cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            dags = list(pool.map(one, range(B)))
    else:
        dags = [one(b) for b in range(B)]

    counts: dict = {}
    for dag in dags:
        for a, b in dag.intra_arcs:
            counts[(a, b, INTRA)] = counts.get((a, b, INTRA), 0) + 1
        for a, b in dag.inter_arcs:
            counts[(a, b, INTER)] = counts.get((a, b, INTER), 0) + 1
    strengths = {arc: cnt / B for arc, cnt in counts.items()}
    return AveragedDag(
        arc_strengths=strengths,
        threshold=threshold,
        consensus=consensus_dag(ds.var_names, strengths, threshold),
    )
