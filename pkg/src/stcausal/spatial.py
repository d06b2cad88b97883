"""Spatial correlation machinery: haversine distances, the exponential
correlation kernel, Cholesky whitening, and variogram estimation.

Core functions:
    haversine_km        -- great-circle distance between two locations
    haversine_matrix    -- pairwise distance matrix for a location list
    exp_correlation     -- nugget-discounted exponential correlation
    correlation_matrix  -- kernel matrix for a set of locations
    decorrelate         -- whiten residual vectors by the Cholesky factor
    fit_variogram       -- kernel parameters from binned residual variograms
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DegenerateVariogramError, SingularKernelError

EARTH_RADIUS_KM = 6371.0

# Cholesky jitter ladder: start tiny, escalate x10, never past the bound.
_JITTER_START = 1e-10
_JITTER_MAX = 1e-8


@dataclass(frozen=True)
class KernelParams:
    """Exponential kernel parameters: correlation decay range and nugget.

    corr(0) = 1 exactly; for d > 0,

        corr(d) = (1 - nugget) * exp(-d / range_km)

    so the nugget is a discontinuous drop at zero distance.
    """

    range_km: float
    nugget: float

    def __post_init__(self):
        if not (np.isfinite(self.range_km) and self.range_km > 0.0):
            raise ValueError(f"range_km must be finite and positive, got {self.range_km}")
        if not 0.0 <= self.nugget < 1.0:
            raise ValueError(f"nugget must be in [0, 1), got {self.nugget}")


#: Kernel numerically indistinguishable from the identity matrix; used when
#: spatial structure is deliberately disabled.
IDENTITY_KERNEL = KernelParams(range_km=1e-6, nugget=0.0)


def _haversine(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = (
        np.radians(np.asarray(x, dtype=float)) for x in (lat1, lon1, lat2, lon2)
    )
    a = (
        np.sin((lat2 - lat1) / 2.0) ** 2
        + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2
    )
    return EARTH_RADIUS_KM * 2.0 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def haversine_km(a, b) -> float:
    """Great-circle distance in km between two objects with lat/lon degrees."""
    return float(_haversine(a.lat, a.lon, b.lat, b.lon))


def haversine_matrix(locations) -> np.ndarray:
    """Symmetric pairwise distance matrix (km) with an exactly zero diagonal."""
    lat = np.array([l.lat for l in locations], dtype=float)
    lon = np.array([l.lon for l in locations], dtype=float)
    d = _haversine(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def exp_correlation(d, params: KernelParams):
    """Kernel correlation at distance d (scalar or array).  corr(0) = 1 exactly."""
    d = np.asarray(d, dtype=float)
    out = np.where(d == 0.0, 1.0, (1.0 - params.nugget) * np.exp(-d / params.range_km))
    return float(out) if out.ndim == 0 else out


def corr_from_distances(dist_matrix: np.ndarray, params: KernelParams) -> np.ndarray:
    """Raw kernel correlation matrix for a precomputed distance matrix.

    Raises :class:`SingularKernelError` when two distinct points coincide and
    the nugget is zero: the matrix is then exactly singular and jitter would
    only mask the modelling problem.
    """
    dist_matrix = np.asarray(dist_matrix, dtype=float)
    n = dist_matrix.shape[0]
    if params.nugget == 0.0 and n > 1:
        off = dist_matrix[~np.eye(n, dtype=bool)]
        if off.size and off.min() == 0.0:
            raise SingularKernelError(
                "duplicate coordinates with a zero nugget give a singular kernel"
            )
    return exp_correlation(dist_matrix, params)


@dataclass(frozen=True)
class SpatialMatrix:
    """Correlation matrix over an ordered set of locations, factor cached."""

    order: tuple[str, ...]
    corr: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.ascontiguousarray(self.corr, dtype=np.float64)
        c.flags.writeable = False
        object.__setattr__(self, "corr", c)

    @cached_property
    def chol(self) -> np.ndarray:
        """Lower Cholesky factor under the bounded jitter policy."""
        return cholesky_factor(self.corr)


def correlation_matrix(locations, params: KernelParams) -> SpatialMatrix:
    """Kernel correlation matrix for a list of locations (distinct ids)."""
    ids = tuple(loc.id for loc in locations)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate location ids in correlation_matrix")
    return SpatialMatrix(order=ids, corr=corr_from_distances(haversine_matrix(locations), params))


def cholesky_factor(corr: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, adding diagonal jitter from 1e-10 up to 1e-8 if
    factorization fails.  Raises :class:`SingularKernelError` past the bound."""
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(corr.shape[0])
    jitter = _JITTER_START
    while jitter <= _JITTER_MAX:
        try:
            return np.linalg.cholesky(corr + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SingularKernelError(
        f"correlation matrix is not positive definite even with {_JITTER_MAX} jitter"
    )


def decorrelate(residuals: np.ndarray, m: SpatialMatrix) -> np.ndarray:
    """Whiten residuals: solve L z = r against the matrix's Cholesky factor.

    Accepts a single vector or a (k, n) stack of residual rows.  Output has
    identity covariance when the input has covariance ``m.corr``.
    """
    r = np.asarray(residuals, dtype=float)
    n = len(m.order)
    if r.shape[-1] != n:
        raise ValueError(f"residual length {r.shape[-1]} != matrix order {n}")
    if r.ndim == 1:
        return np.linalg.solve(m.chol, r)
    return np.linalg.solve(m.chol, r.T).T


# ---------------------------------------------------------------------------
# Variogram estimation

MIN_PAIRS_PER_BIN = 30
N_BINS = 15
MIN_VARIOGRAM_LOCATIONS = 10


@dataclass(frozen=True)
class Variogram:
    """Binned empirical semivariogram pooled over time points."""

    bin_centers: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray
    merged_bins: bool


def empirical_variogram(
    residuals: np.ndarray,
    dist_matrix: np.ndarray,
    n_bins: int = N_BINS,
    min_pairs: int = MIN_PAIRS_PER_BIN,
) -> Variogram:
    """Empirical semivariogram of residual fields.

    ``residuals`` is (weeks, locations), NaN at missing entries.  Half squared
    pairwise differences are pooled across weeks into ``n_bins`` equal-width
    distance bins spanning (0, max_distance / 2].  Bins with fewer than
    ``min_pairs`` pairs merge into their right neighbor (trailing leftovers
    merge left), with a warning.
    """
    r = np.asarray(residuals, dtype=float)
    if r.ndim == 1:
        r = r[None, :]
    obs = ~np.isnan(r)
    filled = np.where(obs, r, 0.0)

    # Pooled over weeks with pairwise deletion:
    #   sum_w (r_iw - r_jw)^2 = sum_w r_i^2 o_j + sum_w r_j^2 o_i - 2 sum_w r_i r_j
    # restricted to weeks where both ends are observed.
    o = obs.astype(float)
    sq_obs = (filled**2).T @ o
    ssd = sq_obs + sq_obs.T - 2.0 * (filled.T @ filled)
    pair_counts = o.T @ o

    n = dist_matrix.shape[0]
    iu = np.triu_indices(n, k=1)
    d, ssd_u, cnt_u = dist_matrix[iu], ssd[iu], pair_counts[iu]
    keep = cnt_u > 0
    d, ssd_u, cnt_u = d[keep], ssd_u[keep], cnt_u[keep]
    if d.size == 0:
        raise DegenerateVariogramError("no co-observed location pairs for the variogram")

    d_max = float(dist_matrix.max()) / 2.0
    if d_max <= 0.0:
        raise DegenerateVariogramError("all locations coincide; variogram undefined")
    edges = np.linspace(0.0, d_max, n_bins + 1)
    which = np.clip(np.digitize(d, edges[1:-1]), 0, n_bins - 1)
    in_range = d <= d_max

    bin_ssd = np.zeros(n_bins)
    bin_cnt = np.zeros(n_bins)
    bin_dsum = np.zeros(n_bins)
    np.add.at(bin_ssd, which[in_range], ssd_u[in_range])
    np.add.at(bin_cnt, which[in_range], cnt_u[in_range])
    np.add.at(bin_dsum, which[in_range], (d * cnt_u)[in_range])

    centers, gammas, counts = [], [], []
    carry_ssd = carry_cnt = carry_dsum = 0.0
    merged = False
    for b in range(n_bins):
        carry_ssd += bin_ssd[b]
        carry_cnt += bin_cnt[b]
        carry_dsum += bin_dsum[b]
        if carry_cnt >= min_pairs:
            centers.append(carry_dsum / carry_cnt)
            gammas.append(carry_ssd / (2.0 * carry_cnt))
            counts.append(carry_cnt)
            carry_ssd = carry_cnt = carry_dsum = 0.0
        elif carry_cnt > 0:
            merged = True
    if carry_cnt > 0:
        if centers:
            tot = counts[-1] + carry_cnt
            centers[-1] = (centers[-1] * counts[-1] + carry_dsum) / tot
            gammas[-1] = (gammas[-1] * counts[-1] + carry_ssd / 2.0) / tot
            counts[-1] = tot
        else:
            centers.append(carry_dsum / carry_cnt)
            gammas.append(carry_ssd / (2.0 * carry_cnt))
            counts.append(carry_cnt)
        merged = True
    if merged:
        warnings.warn(
            f"variogram bins with fewer than {min_pairs} pairs were merged", stacklevel=2
        )
    return Variogram(
        bin_centers=np.array(centers),
        gamma=np.array(gammas),
        counts=np.array(counts),
        merged_bins=merged,
    )


def fit_exponential_variogram(vg: Variogram, n_starts: int = 16):
    """Weighted LS fit of gamma(h) = a + b(1 - exp(-h / rho)).

    Profiles (a, b) in closed form over a geometric grid of rho values.
    Returns (nugget_variance a, partial_sill b, rho).
    """
    h, g, w = vg.bin_centers, vg.gamma, vg.counts.astype(float)
    if h.size < 3:
        raise DegenerateVariogramError(f"only {h.size} usable variogram bins; need 3")
    if not np.any(g > 0.0):
        raise DegenerateVariogramError("flat zero variogram; kernel unidentifiable")

    h_max = float(h.max())
    sw = np.sqrt(w)
    # pure-nugget reference: a flat variogram must resolve to nugget, not to a
    # range too short for the bins to see (where the design goes collinear and
    # the a/b split is arbitrary)
    a_flat = float(np.sum(w * g) / np.sum(w))
    sse_flat = float(np.sum(w * (g - a_flat) ** 2))
    best = (sse_flat, a_flat, 1e-12, h_max)
    for rho in np.geomspace(h_max / 20.0, h_max * 4.0, n_starts):
        x = 1.0 - np.exp(-h / rho)
        if float(x.max() - x.min()) < 0.05:
            continue
        X = np.column_stack([np.ones_like(x), x])
        coef, *_ = np.linalg.lstsq(X * sw[:, None], g * sw, rcond=None)
        a = max(float(coef[0]), 0.0)
        b = max(float(coef[1]), 1e-12)
        sse = float(np.sum(w * (g - (a + b * x)) ** 2))
        # strict improvement required, so SSE ties keep the flatter model
        if sse < best[0] * (1.0 - 1e-9):
            best = (sse, a, b, float(rho))
    return best[1], best[2], best[3]


def fit_variogram(residuals: np.ndarray, locations_or_distances):
    """Estimate kernel parameters from residual fields.

    ``residuals`` is (weeks, locations) with NaN at missing entries; the
    second argument is a location list or a precomputed distance matrix.
    Returns (KernelParams, sill, spatial_fraction) where the sill is the
    fitted total variance a + b and spatial_fraction = 1 - nugget.
    """
    dist = locations_or_distances
    if not (isinstance(dist, np.ndarray) and dist.ndim == 2):
        dist = haversine_matrix(locations_or_distances)
    dist = np.asarray(dist, dtype=float)
    r = np.asarray(residuals, dtype=float)
    if r.ndim == 1:
        r = r[None, :]
    n_obs_locs = int(np.sum(np.any(~np.isnan(r), axis=0)))
    if n_obs_locs < MIN_VARIOGRAM_LOCATIONS:
        raise DegenerateVariogramError(
            f"variogram needs >= {MIN_VARIOGRAM_LOCATIONS} locations with values, "
            f"got {n_obs_locs}"
        )
    vg = empirical_variogram(r, dist)
    a, b, rho = fit_exponential_variogram(vg)
    sill = a + b
    nugget = min(a / sill, 1.0 - 1e-9) if sill > 0.0 else 0.0
    return KernelParams(range_km=rho, nugget=float(nugget)), float(sill), float(1.0 - nugget)
