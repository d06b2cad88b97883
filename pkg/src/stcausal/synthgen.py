"""Synthetic panel generator with known ground truth.

Generates data from an explicit two-slice linear model by solving the
contemporaneous system jointly each week:

    x_t = (I - A)^-1 (alpha + B x_{t-1} + eps_t)

with A the intra-slice and B the lag-1 coefficient matrix over dynamic
nodes, static variables folded into the per-location intercept, and eps_t
drawn per node jointly across locations through the node's kernel factor.
Week 0 is taken from the stationary distribution by discarding a burn-in.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass, field

import numpy as np

from .errors import UnstableSpecError
from .graphs import TwoSliceDag, make_term, parse_term
from .model import CausalModel
from .nodefit import NodeEstimate
from .panel import Location, PanelDataset, VariableSpec, WEEK_STEP
from .spatial import KernelParams, cholesky_factor, corr_from_distances, haversine_matrix

DEFAULT_BBOX = (35.0, 45.0, -105.0, -90.0)  # lat_min, lat_max, lon_min, lon_max
DEFAULT_START = datetime.date(2020, 1, 6)


@dataclass(frozen=True)
class GeneratorSpec:
    """Complete recipe for one synthetic panel.

    ``coefficients[node]`` maps parent terms ("x@t", "x@t-1") to weights and
    must cover exactly the node's parents in ``dag``.  ``group_variances``
    maps node -> group name -> noise variance, with groups "g0".."g{k-1}"
    assigned by longitude band.  Static nodes may only have static intra
    parents.
    """

    n_locations: int
    n_weeks: int
    dag: TwoSliceDag
    tiers: dict[str, str]
    intercepts: dict[str, float]
    coefficients: dict[str, dict[str, float]]
    kernels: dict[str, KernelParams]
    group_variances: dict[str, dict[str, float]]
    static: frozenset[str] = frozenset()
    n_groups: int = 1
    missing_rate: float = 0.0
    mechanism: str = "mcar"
    bbox: tuple[float, float, float, float] = DEFAULT_BBOX
    seed: int = 0
    start_week: datetime.date = DEFAULT_START
    burn_in: int = 100

    def __post_init__(self):
        object.__setattr__(self, "static", frozenset(self.static))
        if self.n_locations < 1 or self.n_weeks < 2:
            raise ValueError("need at least 1 location and 2 weeks")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError(f"missing_rate must be in [0, 1), got {self.missing_rate}")
        if self.mechanism != "mcar":
            raise ValueError(f"unsupported missingness mechanism {self.mechanism!r}")
        if self.n_groups < 1 or self.n_groups > self.n_locations:
            raise ValueError(f"n_groups {self.n_groups} out of range")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        lat_min, lat_max, lon_min, lon_max = self.bbox
        if not (lat_min < lat_max and lon_min < lon_max):
            raise ValueError(f"degenerate bounding box {self.bbox}")
        groups = group_names(self.n_groups)
        for node in self.dag.nodes:
            if node not in self.tiers:
                raise ValueError(f"node {node!r} has no tier")
            if node not in self.intercepts:
                raise ValueError(f"node {node!r} has no intercept")
            if node not in self.kernels:
                raise ValueError(f"node {node!r} has no kernel")
            want = set(self.dag.parents(node))
            got = set(self.coefficients.get(node, {}))
            if want != got:
                raise ValueError(
                    f"node {node!r}: coefficient terms {sorted(got)} != parents {sorted(want)}"
                )
            gv = self.group_variances.get(node)
            if gv is None or set(gv) != set(groups):
                raise ValueError(f"node {node!r}: group_variances must cover {groups}")
            for g, v in gv.items():
                if not v > 0.0:
                    raise ValueError(f"node {node!r}, group {g!r}: variance must be > 0")
        for node in self.static:
            for term in self.dag.parents(node):
                pname, lag = parse_term(term)
                if lag != 0 or pname not in self.static:
                    raise ValueError(
                        f"static node {node!r} has non-static or lagged parent {term!r}"
                    )

    def to_doc(self) -> dict:
        return {
            "n_locations": self.n_locations,
            "n_weeks": self.n_weeks,
            "dag": self.dag.to_doc(),
            "tiers": dict(sorted(self.tiers.items())),
            "intercepts": dict(sorted(self.intercepts.items())),
            "coefficients": {n: dict(c) for n, c in sorted(self.coefficients.items())},
            "kernels": {
                n: {"range_km": k.range_km, "nugget": k.nugget}
                for n, k in sorted(self.kernels.items())
            },
            "group_variances": {
                n: dict(sorted(gv.items())) for n, gv in sorted(self.group_variances.items())
            },
            "static": sorted(self.static),
            "n_groups": self.n_groups,
            "missing_rate": self.missing_rate,
            "mechanism": self.mechanism,
            "bbox": list(self.bbox),
            "seed": self.seed,
            "start_week": self.start_week.isoformat(),
            "burn_in": self.burn_in,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "GeneratorSpec":
        return cls(
            n_locations=doc["n_locations"],
            n_weeks=doc["n_weeks"],
            dag=TwoSliceDag.from_doc(doc["dag"]),
            tiers=dict(doc["tiers"]),
            intercepts=dict(doc["intercepts"]),
            coefficients={n: dict(c) for n, c in doc["coefficients"].items()},
            kernels={n: KernelParams(**k) for n, k in doc["kernels"].items()},
            group_variances={n: dict(gv) for n, gv in doc["group_variances"].items()},
            static=frozenset(doc.get("static", [])),
            n_groups=doc.get("n_groups", 1),
            missing_rate=doc.get("missing_rate", 0.0),
            mechanism=doc.get("mechanism", "mcar"),
            bbox=tuple(doc.get("bbox", DEFAULT_BBOX)),
            seed=doc.get("seed", 0),
            start_week=datetime.date.fromisoformat(doc.get("start_week", DEFAULT_START.isoformat())),
            burn_in=doc.get("burn_in", 100),
        )


def group_names(k: int) -> tuple[str, ...]:
    return tuple(f"g{i}" for i in range(k))


def _place_locations(spec: GeneratorSpec, rng) -> tuple[Location, ...]:
    """Uniform points in the bounding box, grouped into longitude bands."""
    lat_min, lat_max, lon_min, lon_max = spec.bbox
    lat = rng.uniform(lat_min, lat_max, spec.n_locations)
    lon = rng.uniform(lon_min, lon_max, spec.n_locations)
    width = max(3, len(str(spec.n_locations - 1)))
    names = group_names(spec.n_groups)
    group = np.empty(spec.n_locations, dtype=object)
    for k, band in enumerate(np.array_split(np.argsort(lon, kind="stable"), spec.n_groups)):
        group[band] = names[k]
    return tuple(
        Location(id=f"L{i:0{width}d}", lat=float(lat[i]), lon=float(lon[i]), group=str(group[i]))
        for i in range(spec.n_locations)
    )


def stability_matrix(spec: GeneratorSpec) -> np.ndarray:
    """Reduced-form lag-1 transition matrix (I - A)^-1 B over dynamic nodes."""
    dyn = [n for n in spec.dag.nodes if n not in spec.static]
    k = len(dyn)
    idx = {n: i for i, n in enumerate(dyn)}
    A = np.zeros((k, k))
    B = np.zeros((k, k))
    for node in dyn:
        for term, beta in spec.coefficients[node].items():
            pname, lag = parse_term(term)
            if pname not in idx:
                continue
            (A if lag == 0 else B)[idx[node], idx[pname]] = beta
    return np.linalg.solve(np.eye(k) - A, B)


def generate(spec: GeneratorSpec) -> tuple[PanelDataset, CausalModel]:
    """Draw one panel plus the exactly-true model behind it.

    Deterministic per seed.  Raises UnstableSpec when the implied lag-1
    dynamics have spectral radius >= 1.
    """
    M = stability_matrix(spec)
    if M.size:
        radius = float(np.max(np.abs(np.linalg.eigvals(M))))
        if radius >= 1.0:
            raise UnstableSpecError(
                f"dynamics are unstable: spectral radius {radius:.4f} >= 1"
            )

    rng = np.random.default_rng(spec.seed)
    locations = _place_locations(spec, rng)
    L = spec.n_locations
    dist = haversine_matrix(locations)
    groups = group_names(spec.n_groups)
    gidx = {g: i for i, g in enumerate(groups)}
    loc_group = np.array([gidx[loc.group] for loc in locations])

    def noise_scale(node):
        var = np.array([spec.group_variances[node][g] for g in groups])
        sd = np.sqrt(var)[loc_group]
        chol = cholesky_factor(corr_from_distances(dist, spec.kernels[node]))
        return chol, sd

    # statics first, in intra topological order
    order = spec.dag.topological_order()
    static_vals: dict[str, np.ndarray] = {}
    for node in order:
        if node not in spec.static:
            continue
        chol, sd = noise_scale(node)
        val = np.full(L, spec.intercepts[node])
        for term, beta in spec.coefficients[node].items():
            val = val + beta * static_vals[parse_term(term)[0]]
        static_vals[node] = val + (chol @ rng.standard_normal(L)) * sd

    dyn = [n for n in order if n not in spec.static]
    k = len(dyn)
    didx = {n: i for i, n in enumerate(dyn)}
    A = np.zeros((k, k))
    B = np.zeros((k, k))
    alpha = np.tile(np.array([spec.intercepts[n] for n in dyn])[:, None], (1, L))
    for node in dyn:
        for term, beta in spec.coefficients[node].items():
            pname, lag = parse_term(term)
            if pname in didx:
                (A if lag == 0 else B)[didx[node], didx[pname]] = beta
            else:
                # constant static parent: same value at t and t-1
                alpha[didx[node]] += beta * static_vals[pname]
    IA = np.eye(k) - A

    shapers = [noise_scale(n) for n in dyn]
    total = spec.burn_in + spec.n_weeks
    eps_std = rng.standard_normal((total, k, L))

    state = np.linalg.solve(IA - B, alpha) if k else np.zeros((0, L))
    kept = np.empty((spec.n_weeks, k, L))
    for t in range(total):
        eps = np.stack([(chol @ eps_std[t, j]) * sd for j, (chol, sd) in enumerate(shapers)]) \
            if k else np.zeros((0, L))
        state = np.linalg.solve(IA, alpha + B @ state + eps)
        if t >= spec.burn_in:
            kept[t - spec.burn_in] = state

    weeks = tuple(spec.start_week + i * WEEK_STEP for i in range(spec.n_weeks))
    variables = tuple(
        VariableSpec(name=n, tier=spec.tiers[n], static=n in spec.static)
        for n in spec.dag.nodes
    )
    values = np.empty((L, spec.n_weeks, len(variables)))
    for j, var in enumerate(variables):
        if var.name in spec.static:
            values[:, :, j] = static_vals[var.name][:, None]
        else:
            values[:, :, j] = kept[:, didx[var.name], :].T

    missing = np.zeros_like(values, dtype=bool)
    if spec.missing_rate > 0.0:
        missing = _mcar_mask(rng, values.shape, spec.missing_rate)
        values = np.where(missing, np.nan, values)
    ds = PanelDataset(locations, weeks, variables, values, missing)

    estimates = {}
    for node in spec.dag.nodes:
        parents = spec.dag.parents(node)
        estimates[node] = NodeEstimate(
            node=node,
            intercept=float(spec.intercepts[node]),
            coefficients={t: float(spec.coefficients[node][t]) for t in parents},
            std_errors={},
            kernel=spec.kernels[node],
            group_variances={g: float(v) for g, v in spec.group_variances[node].items()},
            n_variance_params=spec.n_groups,
            n_used=L * spec.n_weeks,
            loglik_avg=0.0,
            converged=True,
            iterations=0,
        )
    truth = CausalModel(
        dag=spec.dag,
        estimates=estimates,
        variables=variables,
        locations=locations,
        provenance={"generator_seed": spec.seed},
    )
    return ds, truth


def _mcar_mask(rng, shape, rate: float) -> np.ndarray:
    return rng.random(shape) < rate


def inject_missing(ds: PanelDataset, rate: float, mechanism: str = "mcar", seed: int = 0) -> PanelDataset:
    """Overlay a completely-at-random missingness mask on a panel."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"rate must be in [0, 1), got {rate}")
    if mechanism != "mcar":
        raise ValueError(f"unsupported missingness mechanism {mechanism!r}")
    if rate == 0.0:
        return ds
    rng = np.random.default_rng(seed)
    missing = ds.missing | _mcar_mask(rng, ds.values.shape, rate)
    values = np.where(missing, np.nan, ds.values)
    return PanelDataset(ds.locations, ds.weeks, ds.variables, values, missing)
