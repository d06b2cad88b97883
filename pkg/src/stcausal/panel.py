"""Spatio-temporal panel data: loading, fusion checks, filtering, splitting.

A :class:`PanelDataset` is a dense (location, week, variable) tensor with an
explicit missingness mask, per-location metadata (coordinates, group label)
and per-variable metadata (tier, static flag).  Weeks are ISO week-start
dates on a strict 7-day grid.

Core operations:
  - load_panel_csv / write_panel_csv: the CSV ingestion contract
  - filter_coverage: greedy coverage filter (variables, then locations,
    then weeks) against a maximum missing fraction
  - split_temporal: train/validation split with an explicit buffer
  - split_spatial_folds: geographically clustered folds with a distance
    buffer between training and validation locations
  - to_json / from_json: bit-exact single-document serialization
"""

from __future__ import annotations

import csv
import datetime
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import (
    CoordinateBoundsError,
    DuplicateKeyError,
    ExhaustedDatasetError,
    InvalidFoldsError,
    InvalidSplitError,
    NonUniformWeeksError,
    UnknownColumnError,
)

TIERS = ("demographic", "weather", "pollutant", "condition")
WEEK_STEP = datetime.timedelta(days=7)


@dataclass(frozen=True)
class Location:
    """One spatial unit (county role): id, coordinates, heteroscedasticity group."""

    id: str
    lat: float
    lon: float
    group: str

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise CoordinateBoundsError(
                f"location {self.id!r}: coordinates ({self.lat}, {self.lon}) out of bounds"
            )


@dataclass(frozen=True)
class VariableSpec:
    """A named panel variable with its causal tier and static flag."""

    name: str
    tier: str
    static: bool = False

    def __post_init__(self):
        if self.tier not in TIERS:
            raise UnknownColumnError(f"variable {self.name!r}: unknown tier {self.tier!r}")


@dataclass
class PanelDataset:
    """Immutable locations x weeks x variables panel with a missingness mask.

    ``values[l, w, v]`` is NaN exactly where ``missing[l, w, v]`` is True.
    Instances must not be mutated after construction; all derived datasets
    are fresh copies.
    """

    locations: tuple[Location, ...]
    weeks: tuple[datetime.date, ...]
    variables: tuple[VariableSpec, ...]
    values: np.ndarray
    missing: np.ndarray

    def __post_init__(self):
        self.locations = tuple(self.locations)
        self.weeks = tuple(self.weeks)
        self.variables = tuple(self.variables)
        ids = [loc.id for loc in self.locations]
        if len(set(ids)) != len(ids):
            raise DuplicateKeyError("duplicate location ids")
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise DuplicateKeyError("duplicate variable names")
        for a, b in zip(self.weeks, self.weeks[1:]):
            if b - a != WEEK_STEP:
                raise NonUniformWeeksError(f"weeks {a} -> {b} are not 7 days apart")
        shape = (len(self.locations), len(self.weeks), len(self.variables))
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.missing = np.ascontiguousarray(self.missing, dtype=bool)
        if self.values.shape != shape or self.missing.shape != shape:
            raise ValueError(f"tensor shape {self.values.shape} != {shape}")
        # mask and NaN pattern must agree
        nan = np.isnan(self.values)
        if not np.array_equal(nan, self.missing):
            raise ValueError("missing mask does not match NaN pattern in values")
        self._check_static()
        self.values.flags.writeable = False
        self.missing.flags.writeable = False

    def _check_static(self):
        for j, var in enumerate(self.variables):
            if not var.static:
                continue
            for i in range(len(self.locations)):
                col = self.values[i, :, j]
                obs = col[~np.isnan(col)]
                if obs.size > 1 and not np.all(obs == obs[0]):
                    raise ValueError(
                        f"static variable {var.name!r} varies over time for "
                        f"location {self.locations[i].id!r}"
                    )

    # -- lookups ---------------------------------------------------------

    @cached_property
    def loc_index(self) -> dict[str, int]:
        return {loc.id: i for i, loc in enumerate(self.locations)}

    @cached_property
    def var_index(self) -> dict[str, int]:
        return {v.name: j for j, v in enumerate(self.variables)}

    @cached_property
    def week_index(self) -> dict[datetime.date, int]:
        return {w: t for t, w in enumerate(self.weeks)}

    @property
    def n_locations(self) -> int:
        return len(self.locations)

    @property
    def n_weeks(self) -> int:
        return len(self.weeks)

    @property
    def var_names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    def variable(self, name: str) -> VariableSpec:
        return self.variables[self.var_index[name]]

    @cached_property
    def distance_matrix(self) -> np.ndarray:
        """Pairwise haversine distances (km) between locations, cached."""
        from .spatial import haversine_matrix

        return haversine_matrix(self.locations)

    @cached_property
    def dataset_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self._schema_doc(), sort_keys=True).encode())
        h.update(np.nan_to_num(self.values).tobytes())
        h.update(self.missing.tobytes())
        return h.hexdigest()[:16]

    # -- derived datasets ------------------------------------------------

    def subset(self, loc_idx=None, week_idx=None, var_idx=None) -> "PanelDataset":
        """New dataset restricted to the given index lists (order preserved)."""
        li = np.arange(self.n_locations) if loc_idx is None else np.asarray(loc_idx, dtype=int)
        wi = np.arange(self.n_weeks) if week_idx is None else np.asarray(week_idx, dtype=int)
        vi = np.arange(len(self.variables)) if var_idx is None else np.asarray(var_idx, dtype=int)
        return PanelDataset(
            locations=tuple(self.locations[i] for i in li),
            weeks=tuple(self.weeks[i] for i in wi),
            variables=tuple(self.variables[i] for i in vi),
            values=self.values[np.ix_(li, wi, vi)].copy(),
            missing=self.missing[np.ix_(li, wi, vi)].copy(),
        )

    # -- serialization ---------------------------------------------------

    def _schema_doc(self):
        return {
            "locations": [
                {"id": l.id, "lat": l.lat, "lon": l.lon, "group": l.group}
                for l in self.locations
            ],
            "weeks": [w.isoformat() for w in self.weeks],
            "variables": [
                {"name": v.name, "tier": v.tier, "static": v.static} for v in self.variables
            ],
        }

    def to_json(self) -> str:
        flat = self.values.reshape(-1)
        vals = [None if math.isnan(x) else x for x in flat.tolist()]
        doc = {
            "schema": self._schema_doc(),
            "values": vals,
            "mask_rle": mask_to_rle(self.missing.reshape(-1)),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "PanelDataset":
        doc = json.loads(text)
        schema = doc["schema"]
        locations = tuple(Location(**d) for d in schema["locations"])
        weeks = tuple(datetime.date.fromisoformat(w) for w in schema["weeks"])
        variables = tuple(VariableSpec(**d) for d in schema["variables"])
        shape = (len(locations), len(weeks), len(variables))
        values = np.array(
            [np.nan if x is None else x for x in doc["values"]], dtype=np.float64
        ).reshape(shape)
        missing = rle_to_mask(doc["mask_rle"], values.size).reshape(shape)
        return cls(locations, weeks, variables, values, missing)


def mask_to_rle(mask: np.ndarray) -> list[int]:
    """Run-length encode a flat boolean mask; first run counts False entries."""
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.size == 0:
        return []
    changes = np.flatnonzero(np.diff(mask.view(np.int8)))
    bounds = np.concatenate(([0], changes + 1, [mask.size]))
    runs = np.diff(bounds).tolist()
    if mask[0]:
        runs = [0] + runs
    return runs


def rle_to_mask(runs: list[int], size: int) -> np.ndarray:
    mask = np.zeros(size, dtype=bool)
    pos = 0
    val = False
    for run in runs:
        if val:
            mask[pos : pos + run] = True
        pos += run
        val = not val
    if pos != size:
        raise ValueError(f"mask run lengths sum to {pos}, expected {size}")
    return mask


# ---------------------------------------------------------------------------
# CSV ingestion contract

_ROLES = ("id", "week_start", "lat", "lon", "group")


def load_panel_csv(path, schema: dict) -> PanelDataset:
    """Load the standard panel CSV into a validated :class:`PanelDataset`.

    ``schema`` maps the five role columns and declares every variable column:

        {"id": "fips", "week_start": "week", "lat": "lat", "lon": "lon",
         "group": "state",
         "variables": {"no2": {"tier": "pollutant"},
                       "anxiety": {"tier": "condition", "static": false}}}

    Empty cells are missing values.  Every CSV column must be covered by the
    schema and vice versa.
    """
    for role in _ROLES:
        if role not in schema:
            raise UnknownColumnError(f"schema is missing the {role!r} role")
    var_schema = schema.get("variables") or {}
    if not var_schema:
        raise UnknownColumnError("schema declares no variable columns")

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)

    role_cols = {schema[r] for r in _ROLES}
    declared = role_cols | set(var_schema)
    for col in declared:
        if col not in header:
            raise UnknownColumnError(f"schema column {col!r} not present in CSV")
    for col in header:
        if col not in declared:
            raise UnknownColumnError(f"CSV column {col!r} not declared in schema")

    variables = tuple(
        VariableSpec(name=name, tier=spec["tier"], static=bool(spec.get("static", False)))
        for name, spec in sorted(var_schema.items())
    )

    loc_meta: dict[str, Location] = {}
    cells: dict[tuple[str, datetime.date], list] = {}
    for row in rows:
        lid = row[schema["id"]]
        week = datetime.date.fromisoformat(row[schema["week_start"]])
        key = (lid, week)
        if key in cells:
            raise DuplicateKeyError(f"duplicate (id, week) key {key}")
        loc = Location(
            id=lid,
            lat=float(row[schema["lat"]]),
            lon=float(row[schema["lon"]]),
            group=row[schema["group"]],
        )
        if lid in loc_meta and loc_meta[lid] != loc:
            raise DuplicateKeyError(f"conflicting metadata for location {lid!r}")
        loc_meta[lid] = loc
        cells[key] = [
            float(row[v.name]) if row[v.name] not in ("", None) else np.nan
            for v in variables
        ]

    if not cells:
        raise ExhaustedDatasetError(f"no data rows in {path}")

    locations = tuple(loc_meta[k] for k in sorted(loc_meta))
    all_weeks = sorted({w for _, w in cells})
    first, last = all_weeks[0], all_weeks[-1]
    span = (last - first).days
    if span % 7 != 0 or any(((w - first).days % 7) != 0 for w in all_weeks):
        raise NonUniformWeeksError("week starts do not lie on a 7-day grid")
    weeks = tuple(first + i * WEEK_STEP for i in range(span // 7 + 1))

    shape = (len(locations), len(weeks), len(variables))
    values = np.full(shape, np.nan)
    widx = {w: t for t, w in enumerate(weeks)}
    lidx = {loc.id: i for i, loc in enumerate(locations)}
    for (lid, week), vals in cells.items():
        values[lidx[lid], widx[week], :] = vals
    return PanelDataset(locations, weeks, variables, values, np.isnan(values))


def write_panel_csv(ds: PanelDataset, path, schema: dict | None = None):
    """Write ``ds`` in the standard CSV contract (inverse of load_panel_csv)."""
    cols = {"id": "id", "week_start": "week_start", "lat": "lat", "lon": "lon", "group": "group"}
    if schema:
        cols = {r: schema[r] for r in _ROLES}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(cols.values()) + list(ds.var_names))
        for i, loc in enumerate(ds.locations):
            for t, week in enumerate(ds.weeks):
                row = [loc.id, week.isoformat(), repr(loc.lat), repr(loc.lon), loc.group]
                for j in range(len(ds.variables)):
                    x = ds.values[i, t, j]
                    row.append("" if math.isnan(x) else repr(float(x)))
                writer.writerow(row)


def default_schema(ds: PanelDataset) -> dict:
    """Schema document matching write_panel_csv's default column names."""
    return {
        "id": "id",
        "week_start": "week_start",
        "lat": "lat",
        "lon": "lon",
        "group": "group",
        "variables": {
            v.name: {"tier": v.tier, "static": v.static} for v in ds.variables
        },
    }


# ---------------------------------------------------------------------------
# Coverage filtering

def missing_fractions(ds: PanelDataset):
    """Per-variable, per-location, per-week missing fractions."""
    m = ds.missing
    return m.mean(axis=(0, 1)), m.mean(axis=(1, 2)), m.mean(axis=(0, 2))


def filter_coverage(ds: PanelDataset, max_missing: float = 0.5) -> PanelDataset:
    """Greedily drop variables, then locations, then weeks whose missing
    fraction exceeds ``max_missing``, until everything passes.

    Ties break by name/id order (the tensor order, which is sorted at load
    time).  Deterministic and idempotent.
    """
    if not 0.0 < max_missing <= 1.0:
        raise ValueError(f"max_missing must be in (0, 1], got {max_missing}")
    keep_v = list(range(len(ds.variables)))
    keep_l = list(range(ds.n_locations))
    keep_w = list(range(ds.n_weeks))
    miss = ds.missing
    while True:
        if not keep_v or not keep_l or not keep_w:
            raise ExhaustedDatasetError("coverage filter removed the whole dataset")
        sub = miss[np.ix_(keep_l, keep_w, keep_v)]
        by_var = sub.mean(axis=(0, 1))
        worst = int(np.argmax(by_var))
        if by_var[worst] > max_missing:
            del keep_v[worst]
            continue
        by_loc = sub.mean(axis=(1, 2))
        worst = int(np.argmax(by_loc))
        if by_loc[worst] > max_missing:
            del keep_l[worst]
            continue
        by_week = sub.mean(axis=(0, 2))
        worst = int(np.argmax(by_week))
        if by_week[worst] > max_missing:
            del keep_w[worst]
            continue
        break
    return ds.subset(keep_l, keep_w, keep_v)


# ---------------------------------------------------------------------------
# Splits

def split_temporal(ds: PanelDataset, train_end: datetime.date, val_start: datetime.date):
    """Split weeks into train (<= train_end) and validation (>= val_start).

    Weeks strictly between the two dates form the buffer and appear in
    neither side.
    """
    if isinstance(train_end, str):
        train_end = datetime.date.fromisoformat(train_end)
    if isinstance(val_start, str):
        val_start = datetime.date.fromisoformat(val_start)
    if train_end >= val_start:
        raise InvalidSplitError(f"train_end {train_end} must precede val_start {val_start}")
    train_idx = [t for t, w in enumerate(ds.weeks) if w <= train_end]
    val_idx = [t for t, w in enumerate(ds.weeks) if w >= val_start]
    if not train_idx or not val_idx:
        raise InvalidSplitError("temporal split leaves an empty side")
    return ds.subset(week_idx=train_idx), ds.subset(week_idx=val_idx)


def _tangent_plane_km(locations) -> np.ndarray:
    """Project (lat, lon) to local-tangent-plane km coordinates."""
    R = 6371.0
    lat = np.array([l.lat for l in locations])
    lon = np.array([l.lon for l in locations])
    lat0 = math.radians(float(lat.mean()))
    x = R * math.cos(lat0) * np.radians(lon)
    y = R * np.radians(lat)
    return np.column_stack([x, y])


def split_spatial_folds(ds: PanelDataset, k: int = 6, buffer_km: float = 110.0):
    """Geographically clustered k-fold splits with a distance buffer.

    Locations are clustered by k-means on tangent-plane km coordinates
    (fixed seed, 50 restarts).  Each cluster serves once as the validation
    set; training locations closer than ``buffer_km`` to any validation
    location are dropped from that split.
    """
    from sklearn.cluster import KMeans

    if k < 2 or k > ds.n_locations:
        raise InvalidFoldsError(f"cannot build {k} folds from {ds.n_locations} locations")
    xy = _tangent_plane_km(ds.locations)
    km = KMeans(n_clusters=k, n_init=50, random_state=0)
    labels = km.fit_predict(xy)
    if len(set(labels.tolist())) < k:
        raise InvalidFoldsError("k-means produced an empty fold")
    dist = ds.distance_matrix
    folds = []
    for c in range(k):
        val_idx = np.flatnonzero(labels == c)
        train_idx = np.flatnonzero(labels != c)
        min_d = dist[np.ix_(train_idx, val_idx)].min(axis=1)
        train_idx = train_idx[min_d > buffer_km]
        if train_idx.size == 0:
            raise InvalidFoldsError(f"buffer {buffer_km} km leaves fold {c} without training data")
        folds.append((ds.subset(loc_idx=train_idx), ds.subset(loc_idx=val_idx)))
    return folds
