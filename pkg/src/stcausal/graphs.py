"""Two-slice DAGs, arc constraints, and averaged (consensus) graphs.

Arcs come in two kinds: "intra" arcs act within a time slice and must stay
acyclic; "inter" arcs act from t-1 to t (self-loops allowed) and are always
forward in time.  Parent terms are rendered as "name@t" / "name@t-1".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

INTRA, INTER = "intra", "inter"

TIER_RANK = {"demographic": 0, "weather": 0, "pollutant": 1, "condition": 2}

# Within-tier arcs forbidden by default: demographics do not cause each
# other, and one pollutant cannot turn into another.
NO_CROSS_TIERS = ("demographic", "pollutant")


def make_term(name: str, lag: int) -> str:
    if lag not in (0, 1):
        raise ValueError(f"unsupported lag {lag}")
    return f"{name}@t" if lag == 0 else f"{name}@t-1"


def parse_term(term: str) -> tuple[str, int]:
    name, _, suffix = term.rpartition("@")
    if suffix == "t":
        return name, 0
    if suffix == "t-1":
        return name, 1
    raise ValueError(f"malformed parent term {term!r}")


@dataclass(frozen=True)
class TwoSliceDag:
    """Directed graph over one variable set at two adjacent time slices."""

    nodes: tuple[str, ...]
    intra_arcs: frozenset[tuple[str, str]] = frozenset()
    inter_arcs: frozenset[tuple[str, str]] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "intra_arcs", frozenset(self.intra_arcs))
        object.__setattr__(self, "inter_arcs", frozenset(self.inter_arcs))
        known = set(self.nodes)
        for a, b in self.intra_arcs | self.inter_arcs:
            if a not in known or b not in known:
                raise ValueError(f"arc ({a}, {b}) references an unknown node")
        for a, b in self.intra_arcs:
            if a == b:
                raise ValueError(f"intra-slice self-loop on {a}")
        cycle = find_intra_cycle(self)
        if cycle:
            raise ValueError(f"intra-slice arcs contain a cycle: {' -> '.join(cycle)}")

    def parents(self, node: str) -> tuple[str, ...]:
        """Parent terms of ``node``: contemporaneous first, then lagged."""
        intra = sorted(a for a, b in self.intra_arcs if b == node)
        inter = sorted(a for a, b in self.inter_arcs if b == node)
        return tuple([make_term(a, 0) for a in intra] + [make_term(a, 1) for a in inter])

    def children_intra(self, node: str) -> tuple[str, ...]:
        return tuple(sorted(b for a, b in self.intra_arcs if a == node))

    def topological_order(self) -> tuple[str, ...]:
        """Nodes ordered so every intra-slice arc points forward."""
        indeg = {n: 0 for n in self.nodes}
        for _, b in self.intra_arcs:
            indeg[b] += 1
        order, ready = [], sorted(n for n, d in indeg.items() if d == 0)
        while ready:
            n = ready.pop(0)
            order.append(n)
            changed = False
            for b in self.children_intra(n):
                indeg[b] -= 1
                if indeg[b] == 0:
                    ready.append(b)
                    changed = True
            if changed:
                ready.sort()
        return tuple(order)

    def arc_count(self) -> int:
        return len(self.intra_arcs) + len(self.inter_arcs)

    def to_doc(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "intra_arcs": sorted(list(a) for a in self.intra_arcs),
            "inter_arcs": sorted(list(a) for a in self.inter_arcs),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "TwoSliceDag":
        return cls(
            nodes=tuple(doc["nodes"]),
            intra_arcs=frozenset(tuple(a) for a in doc["intra_arcs"]),
            inter_arcs=frozenset(tuple(a) for a in doc["inter_arcs"]),
        )


def find_intra_cycle(dag: TwoSliceDag):
    """A cycle through intra arcs as a node list, or None."""
    color = {n: 0 for n in dag.nodes}
    stack: list[str] = []

    def visit(n):
        color[n] = 1
        stack.append(n)
        for b in dag.children_intra(n):
            if color[b] == 1:
                return stack[stack.index(b) :] + [b]
            if color[b] == 0:
                found = visit(b)
                if found:
                    return found
        stack.pop()
        color[n] = 2
        return None

    for n in dag.nodes:
        if color[n] == 0:
            found = visit(n)
            if found:
                return found
    return None


def would_create_cycle(dag: TwoSliceDag, frm: str, to: str) -> bool:
    """True if adding the intra arc frm -> to closes a cycle (path to -> frm)."""
    seen, frontier = {to}, [to]
    while frontier:
        n = frontier.pop()
        if n == frm:
            return True
        for b in dag.children_intra(n):
            if b not in seen:
                seen.add(b)
                frontier.append(b)
    return False


# ---------------------------------------------------------------------------
# Constraints


@dataclass(frozen=True)
class ConstraintSet:
    """Tier ordering, static-target rules, and arc black/whitelists.

    Black- and whitelist entries are (from, to, kind) with kind "intra" or
    "inter".  The tier ordering (demographic & weather before pollutant
    before condition) and the static rule are derived from ``tiers`` /
    ``static`` and always enforced.
    """

    tiers: dict[str, str]
    static: frozenset[str] = frozenset()
    blacklist: frozenset[tuple[str, str, str]] = frozenset()
    whitelist: frozenset[tuple[str, str, str]] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "static", frozenset(self.static))
        object.__setattr__(self, "blacklist", frozenset(self.blacklist))
        object.__setattr__(self, "whitelist", frozenset(self.whitelist))
        for tier in self.tiers.values():
            if tier not in TIER_RANK:
                raise ValueError(f"unknown tier {tier!r}")
        overlap = self.blacklist & self.whitelist
        if overlap:
            raise ValueError(f"blacklist and whitelist overlap: {sorted(overlap)}")
        for frm, to, kind in self.blacklist | self.whitelist:
            if kind not in (INTRA, INTER):
                raise ValueError(f"arc kind must be intra/inter, got {kind!r}")
            if frm == to and kind == INTRA:
                raise ValueError(f"intra self-loop ({frm}) cannot be listed")

    def arc_allowed(self, frm: str, to: str, kind: str) -> bool:
        """Admissibility of a single arc (ignores acyclicity)."""
        if (frm, to, kind) in self.blacklist:
            return False
        if to in self.static and frm not in self.static:
            return False
        if frm != to and TIER_RANK[self.tiers[frm]] > TIER_RANK[self.tiers[to]]:
            return False
        return True

    def to_doc(self) -> dict:
        return {
            "tiers": dict(sorted(self.tiers.items())),
            "static": sorted(self.static),
            "blacklist": sorted(list(a) for a in self.blacklist),
            "whitelist": sorted(list(a) for a in self.whitelist),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "ConstraintSet":
        return cls(
            tiers=dict(doc["tiers"]),
            static=frozenset(doc.get("static", [])),
            blacklist=frozenset(tuple(a) for a in doc.get("blacklist", [])),
            whitelist=frozenset(tuple(a) for a in doc.get("whitelist", [])),
        )

    @classmethod
    def from_file(cls, path) -> "ConstraintSet":
        with open(path, encoding="utf-8") as fh:
            return cls.from_doc(json.load(fh))


def default_constraints(variables) -> ConstraintSet:
    """Standard constraint set for a list of variable specs.

    Blacklists all within-tier arcs among demographics and among pollutants
    (both kinds, self-loops exempt); whitelists lag-1 self-loops on condition
    variables so autocorrelation is always modelled.
    """
    tiers = {v.name: v.tier for v in variables}
    static = frozenset(v.name for v in variables if v.static)
    blacklist = set()
    for tier in NO_CROSS_TIERS:
        members = sorted(n for n, t in tiers.items() if t == tier)
        for a in members:
            for b in members:
                if a != b:
                    blacklist.add((a, b, INTRA))
                    blacklist.add((a, b, INTER))
    whitelist = {
        (n, n, INTER)
        for n, t in tiers.items()
        if t == "condition" and n not in static
    }
    return ConstraintSet(
        tiers=tiers, static=static, blacklist=frozenset(blacklist), whitelist=frozenset(whitelist)
    )


@dataclass(frozen=True)
class Violation:
    kind: str  # "tier" | "blacklist" | "cycle" | "static"
    detail: str

    def __str__(self):
        return f"{self.kind}: {self.detail}"


def validate_constraints(dag: TwoSliceDag, cs: ConstraintSet) -> list[Violation]:
    """All constraint violations in ``dag``; empty list means fully admissible."""
    out = []
    arcs = [(a, b, INTRA) for a, b in sorted(dag.intra_arcs)] + [
        (a, b, INTER) for a, b in sorted(dag.inter_arcs)
    ]
    for frm, to, kind in arcs:
        if (frm, to, kind) in cs.blacklist:
            out.append(Violation("blacklist", f"{kind} arc {frm} -> {to} is blacklisted"))
        if frm != to and TIER_RANK[cs.tiers[frm]] > TIER_RANK[cs.tiers[to]]:
            out.append(
                Violation(
                    "tier",
                    f"{kind} arc {frm} -> {to} points from tier "
                    f"{cs.tiers[frm]} back to {cs.tiers[to]}",
                )
            )
        if to in cs.static and frm not in cs.static:
            out.append(Violation("static", f"{kind} arc {frm} -> {to} enters a static node"))
    cycle = find_intra_cycle(dag)
    if cycle:
        out.append(Violation("cycle", f"intra arcs form a cycle: {' -> '.join(cycle)}"))
    return out


# ---------------------------------------------------------------------------
# Averaged graphs


@dataclass(frozen=True)
class AveragedDag:
    """Bootstrap arc frequencies plus the thresholded consensus graph."""

    arc_strengths: dict[tuple[str, str, str], float]
    threshold: float
    consensus: TwoSliceDag

    def to_doc(self) -> dict:
        return {
            "arc_strengths": [
                {"from": a, "to": b, "kind": k, "strength": s}
                for (a, b, k), s in sorted(self.arc_strengths.items())
            ],
            "threshold": self.threshold,
            "consensus": self.consensus.to_doc(),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "AveragedDag":
        return cls(
            arc_strengths={
                (e["from"], e["to"], e["kind"]): e["strength"] for e in doc["arc_strengths"]
            },
            threshold=doc["threshold"],
            consensus=TwoSliceDag.from_doc(doc["consensus"]),
        )


def consensus_dag(nodes, arc_strengths, threshold: float) -> TwoSliceDag:
    """Arcs at or above threshold, repaired to acyclicity.

    Candidate intra arcs enter by descending strength (ties by arc name);
    any arc that would close a cycle is dropped.
    """
    inter = frozenset(
        (a, b) for (a, b, k), s in arc_strengths.items() if k == INTER and s >= threshold
    )
    candidates = sorted(
        ((a, b) for (a, b, k), s in arc_strengths.items() if k == INTRA and s >= threshold),
        key=lambda arc: (-arc_strengths[(arc[0], arc[1], INTRA)], arc),
    )
    dag = TwoSliceDag(nodes=tuple(nodes), inter_arcs=inter)
    kept = set()
    for a, b in candidates:
        if not would_create_cycle(dag, a, b):
            kept.add((a, b))
            dag = TwoSliceDag(nodes=tuple(nodes), intra_arcs=frozenset(kept), inter_arcs=inter)
    return dag


def shd(g1: TwoSliceDag, g2: TwoSliceDag) -> int:
    """Structural Hamming distance; an intra reversal counts once."""
    d = len(g1.inter_arcs ^ g2.inter_arcs)
    seen = set()
    for a, b in g1.intra_arcs ^ g2.intra_arcs:
        if (b, a) in seen:
            continue
        seen.add((a, b))
        d += 1
    return d
