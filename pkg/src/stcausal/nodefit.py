"""Per-node regression with spatially correlated, group-heteroscedastic noise.

One node's model over locations i and weeks t:

    y_it = intercept + sum_j beta_j * parent_j(i, t) + e_it

where parent terms are contemporaneous ("x@t") or lagged ("x@t-1"), and the
noise vector across locations at a fixed week has covariance

    D^{1/2} Sigma D^{1/2},   D = diag(group variance),  Sigma = kernel corr.

Estimation alternates GLS (via Cholesky whitening), a multiplicative
group-variance update from the whitened residuals, and a variogram-based
kernel refit, accepting an update only if the exact negative log-likelihood
does not increase.  Rows that are not locally complete (node, every parent
term, coordinates all observed) carry zero weight throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateVariogramError,
    RankDeficientError,
    SchemaMismatchError,
    SingularKernelError,
    TooFewRowsError,
)
from .graphs import parse_term
from .panel import PanelDataset
from .spatial import (
    IDENTITY_KERNEL,
    KernelParams,
    cholesky_factor,
    corr_from_distances,
    fit_variogram,
)

_VAR_FLOOR = 1e-12
_NUGGET_FLOOR = 1e-6
_NLL_SLACK = 1e-10
INTERCEPT_KEY = "(intercept)"


@dataclass(frozen=True)
class FitConfig:
    """Knobs for the iterative node fit.

    ``estimate_weights=False`` pools all groups into one variance parameter;
    ``estimate_kernel=False`` freezes the kernel at ``kernel_init`` (or the
    identity-like kernel when no init is given), which is how deliberately
    misspecified comparison models are built.
    """

    tolerance: float = 1e-6
    max_iterations: int = 50
    min_rows: int = 5
    kernel_init: KernelParams | None = None
    estimate_kernel: bool = True
    estimate_weights: bool = True

    def to_doc(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "max_iterations": self.max_iterations,
            "min_rows": self.min_rows,
            "kernel_init": None
            if self.kernel_init is None
            else {"range_km": self.kernel_init.range_km, "nugget": self.kernel_init.nugget},
            "estimate_kernel": self.estimate_kernel,
            "estimate_weights": self.estimate_weights,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "FitConfig":
        doc = dict(doc)
        ki = doc.get("kernel_init")
        if ki is not None:
            doc["kernel_init"] = KernelParams(**ki)
        return cls(**doc)


@dataclass(frozen=True)
class NodeEstimate:
    """Fitted parameters and fit statistics for one node."""

    node: str
    intercept: float
    coefficients: dict[str, float]
    std_errors: dict[str, float]
    kernel: KernelParams
    group_variances: dict[str, float]
    n_variance_params: int
    n_used: int
    loglik_avg: float
    converged: bool
    iterations: int

    def __post_init__(self):
        for g, v in self.group_variances.items():
            if v < 0.0:
                raise ValueError(f"negative variance {v} for group {g!r}")

    @property
    def param_count(self) -> int:
        """Free parameters: intercept, coefficients, 2 kernel, variances."""
        return 1 + len(self.coefficients) + 2 + self.n_variance_params

    @property
    def terms(self) -> tuple[str, ...]:
        return tuple(self.coefficients)

    def to_doc(self) -> dict:
        # coefficient order is load-bearing (it must match the dag's parent
        # order), so ordered mappings serialize as pair lists, immune to
        # key-sorting JSON writers
        return {
            "node": self.node,
            "intercept": self.intercept,
            "coefficients": [[t, b] for t, b in self.coefficients.items()],
            "std_errors": [[t, s] for t, s in self.std_errors.items()],
            "kernel": {"range_km": self.kernel.range_km, "nugget": self.kernel.nugget},
            "group_variances": dict(self.group_variances),
            "n_variance_params": self.n_variance_params,
            "n_used": self.n_used,
            "loglik_avg": self.loglik_avg,
            "converged": self.converged,
            "iterations": self.iterations,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "NodeEstimate":
        doc = dict(doc)
        doc["kernel"] = KernelParams(**doc["kernel"])
        doc["coefficients"] = {t: b for t, b in doc["coefficients"]}
        doc["std_errors"] = {t: s for t, s in doc["std_errors"]}
        return cls(**doc)


@dataclass(frozen=True)
class ResidualPanel:
    """Residual tensors for one node on its locally complete cells.

    All arrays are (locations, weeks) with NaN off-mask.  ``weighted`` is
    raw / group sd; ``decorrelated`` additionally whitens across locations
    week by week through the kernel's Cholesky factor.
    """

    node: str
    loc_ids: tuple[str, ...]
    groups: tuple[str, ...]
    weeks: tuple
    mask: np.ndarray
    raw: np.ndarray
    weighted: np.ndarray
    decorrelated: np.ndarray


# ---------------------------------------------------------------------------
# Plain GLS on one explicit covariance matrix


def gls_fit(y: np.ndarray, X: np.ndarray, omega: np.ndarray):
    """Generalized least squares for known error covariance ``omega``.

    Returns (beta, se, loglik): the whitened-LS coefficient vector, standard
    errors sqrt(diag((X' omega^-1 X)^-1)), and the exact Gaussian
    log-likelihood of y at the fit.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.size or omega.shape != (y.size, y.size):
        raise ValueError("gls_fit shapes disagree")
    L = cholesky_factor(omega)
    Z = scipy.linalg.solve_triangular(L, X, lower=True)
    z = scipy.linalg.solve_triangular(L, y, lower=True)
    beta = _checked_lstsq(Z, z)
    resid = z - Z @ beta
    n = y.size
    loglik = (
        -0.5 * n * math.log(2.0 * math.pi)
        - float(np.sum(np.log(np.diag(L))))
        - 0.5 * float(resid @ resid)
    )
    se = np.sqrt(np.diag(np.linalg.inv(Z.T @ Z)))
    return beta, se, loglik


def _checked_lstsq(Z: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Least squares that names the collinear columns on rank deficiency."""
    p = Z.shape[1]
    beta, _, rank, _ = np.linalg.lstsq(Z, z, rcond=None)
    if rank < p:
        _, R, piv = scipy.linalg.qr(Z, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        tol = (diag[0] if diag.size else 0.0) * max(Z.shape) * np.finfo(float).eps
        eff_rank = int(np.sum(diag > tol))
        raise RankDeficientError(
            f"design matrix has rank {eff_rank} < {p}",
            columns=tuple(int(c) for c in sorted(piv[eff_rank:])),
        )
    return beta


# ---------------------------------------------------------------------------
# Design assembly


def build_design(ds: PanelDataset, node: str, terms):
    """Y (L, W), X (L, W, p) for the parent terms, and the locally-complete mask."""
    if node not in ds.var_index:
        raise SchemaMismatchError(f"node {node!r} not in dataset")
    Y = ds.values[:, :, ds.var_index[node]]
    L, W = Y.shape
    p = len(terms)
    X = np.full((L, W, p), np.nan)
    for j, term in enumerate(terms):
        name, lag = parse_term(term)
        if name not in ds.var_index:
            raise SchemaMismatchError(f"parent variable {name!r} not in dataset")
        col = ds.values[:, :, ds.var_index[name]]
        if lag == 0:
            X[:, :, j] = col
        else:
            X[:, lag:, j] = col[:, :-lag]
    mask = np.isfinite(Y)
    if p:
        mask &= np.all(np.isfinite(X), axis=2)
    return Y, X, mask


def _group_ids(ds: PanelDataset):
    names = sorted({loc.group for loc in ds.locations})
    index = {g: k for k, g in enumerate(names)}
    per_loc = np.array([index[loc.group] for loc in ds.locations])
    return names, per_loc


class _WeekBlocks:
    """Week-by-week observation layout, padded to a rectangular stack.

    Slot (w, k) holds the k-th observed location in week w; padded slots
    carry zero rows and identity covariance so they drop out of every sum.
    """

    def __init__(self, mask: np.ndarray):
        Mw = mask.T  # (W, L)
        self.n_weeks, self.n_locs = Mw.shape
        self.m_per_week = Mw.sum(axis=1)
        self.width = int(self.m_per_week.max()) if self.n_weeks else 0
        order = np.argsort(~Mw, axis=1, kind="stable")
        self.idx = order[:, : self.width]
        self.valid = np.arange(self.width)[None, :] < self.m_per_week[:, None]

    def gather(self, panel_lw: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """(L, W) panel -> (W, width) stack with padded slots set to fill."""
        g = np.take_along_axis(panel_lw.T, self.idx, axis=1)
        return np.where(self.valid, g, fill)

    def scatter(self, stack: np.ndarray) -> np.ndarray:
        """(W, width) stack -> (L, W) panel with NaN in unobserved cells."""
        panel = np.full((self.n_weeks, self.n_locs), np.nan)
        np.put_along_axis(panel, self.idx, np.where(self.valid, stack, np.nan), axis=1)
        return panel.T

    def chol_stack(self, corr: np.ndarray) -> np.ndarray:
        """Cholesky factors of each week's observed-submatrix, identity-padded."""
        S = corr[self.idx[:, :, None], self.idx[:, None, :]]
        keep = self.valid[:, :, None] & self.valid[:, None, :]
        S = np.where(keep, S, 0.0)
        ar = np.arange(self.width)
        S[:, ar, ar] = np.where(self.valid, S[:, ar, ar], 1.0)
        try:
            return np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            pass
        jitter = 1e-10
        while jitter <= 1e-8:
            S2 = S.copy()
            S2[:, ar, ar] += jitter
            try:
                return np.linalg.cholesky(S2)
            except np.linalg.LinAlgError:
                jitter *= 10.0
        raise SingularKernelError("weekly correlation blocks are not positive definite")


def _gls_pass(Y, X, blocks: _WeekBlocks, corr, sd_per_loc):
    """One whitened least-squares solve under the given covariance.

    Returns (beta, loglik, v, A) where v is the (W, width) weighted residual
    stack (raw residual / group sd, zeros in padded slots).  The variance
    update consumes v rather than the fully whitened residuals: whitened
    coordinates mix locations through the triangular factor, which would make
    per-group pooling depend on location order.  Weighted residuals have unit
    marginal variance under the model and are exactly relabeling-equivariant.
    """
    W, width = blocks.idx.shape
    p = X.shape[2]
    Lst = blocks.chol_stack(corr)

    sdg = np.where(blocks.valid, sd_per_loc[blocks.idx], 1.0)
    Yg = blocks.gather(Y) / sdg
    Xg = np.empty((W, width, p))
    for j in range(p):
        Xg[:, :, j] = blocks.gather(X[:, :, j]) / sdg

    Zy = np.linalg.solve(Lst, Yg[..., None])[..., 0]
    ZX = np.linalg.solve(Lst, Xg) if p else Xg

    A = ZX.reshape(W * width, p)
    b = Zy.reshape(-1)
    if p:
        beta = _checked_lstsq(A, b)
        u = b - A @ beta
        v = Yg - Xg @ beta
    else:
        beta = np.zeros(0)
        u = b
        v = Yg
    n_used = int(blocks.valid.sum())
    ar = np.arange(width)
    logdet = 2.0 * float(np.sum(np.log(Lst[:, ar, ar]))) + 2.0 * float(
        np.sum(np.log(sdg), where=blocks.valid)
    )
    loglik = (
        -0.5 * n_used * math.log(2.0 * math.pi) - 0.5 * logdet - 0.5 * float(u @ u)
    )
    return beta, loglik, np.where(blocks.valid, v, 0.0), A


def fit_node(ds: PanelDataset, node: str, parents, config: FitConfig = FitConfig()) -> NodeEstimate:
    """Fit one node's regression by guarded iterative reweighting.

    ``parents`` is a list of terms ("x@t", "x@t-1"); an intercept is always
    included.  Raises TooFewRows when locally complete rows < p + min_rows.
    """
    parents = tuple(parents)
    terms = (INTERCEPT_KEY,) + parents
    Y, X0, mask = build_design(ds, node, parents)
    X = np.concatenate([np.ones(Y.shape + (1,)), X0], axis=2)
    n_used = int(mask.sum())
    p = X.shape[2]
    if n_used < p + config.min_rows:
        raise TooFewRowsError(
            f"node {node!r}: {n_used} locally complete rows < {p} params + {config.min_rows}"
        )

    group_names, group_of_loc = _group_ids(ds)
    n_groups = len(group_names) if config.estimate_weights else 1
    variances = np.ones(len(group_names))
    kernel = config.kernel_init
    if kernel is None:
        kernel = IDENTITY_KERNEL if not config.estimate_kernel else _default_kernel(ds)

    blocks = _WeekBlocks(mask)
    gidx = np.where(blocks.valid, group_of_loc[blocks.idx], -1)
    dist = ds.distance_matrix

    Ym = np.where(mask, Y, 0.0)
    Xm = np.where(mask[:, :, None], X, 0.0)

    def run(kern, var):
        sd = np.sqrt(np.maximum(var[group_of_loc], _VAR_FLOOR))
        return _gls_pass(Ym, Xm, blocks, corr_from_distances(dist, kern), sd)

    beta, loglik, u, A = run(kernel, variances)
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        new_var = _update_variances(variances, u, gidx, len(group_names), config.estimate_weights)
        new_kernel = kernel
        if config.estimate_kernel:
            new_kernel = _refit_kernel(Y, X, beta, mask, group_of_loc, variances, dist, kernel)

        accepted = None
        for cand_kernel, cand_var in ((new_kernel, new_var), (kernel, new_var)):
            try:
                cand = run(cand_kernel, cand_var)
            except (SingularKernelError, RankDeficientError):
                continue
            if -cand[1] <= -loglik + _NLL_SLACK:
                accepted = (cand_kernel, cand_var, cand)
                break
            if cand_kernel is kernel:
                break
        if accepted is None:
            converged = True
            break

        prev = _param_vector(beta, variances, kernel)
        kernel, variances, (beta, loglik, u, A) = accepted
        delta = _relative_change(prev, _param_vector(beta, variances, kernel))
        if delta < config.tolerance:
            converged = True
            break

    se = np.sqrt(np.diag(np.linalg.inv(A.T @ A)))
    var_map = {g: float(max(variances[k], _VAR_FLOOR)) for k, g in enumerate(group_names)}
    return NodeEstimate(
        node=node,
        intercept=float(beta[0]),
        coefficients={t: float(b) for t, b in zip(parents, beta[1:])},
        std_errors={t: float(s) for t, s in zip(terms, se)},
        kernel=kernel,
        group_variances=var_map,
        n_variance_params=n_groups,
        n_used=n_used,
        loglik_avg=float(loglik) / n_used,
        converged=converged,
        iterations=iterations,
    )


def _default_kernel(ds: PanelDataset) -> KernelParams:
    d = ds.distance_matrix
    off = d[np.triu_indices(d.shape[0], k=1)]
    off = off[off > 0.0]
    rng = float(np.median(off)) if off.size else 1.0
    return KernelParams(range_km=max(rng, 1e-6), nugget=0.5)


def _update_variances(variances, u, gidx, n_groups, per_group):
    usq = u**2
    if not per_group:
        factor = float(usq[gidx >= 0].mean())
        return np.maximum(variances * factor, _VAR_FLOOR)
    out = variances.copy()
    for g in range(n_groups):
        sel = gidx == g
        if np.any(sel):
            out[g] = variances[g] * float(usq[sel].mean())
    return np.maximum(out, _VAR_FLOOR)


def _refit_kernel(Y, X, beta, mask, group_of_loc, variances, dist, current):
    sd = np.sqrt(np.maximum(variances[group_of_loc], _VAR_FLOOR))
    resid = np.where(mask, Y - X @ beta, np.nan) / sd[:, None]
    try:
        fitted, _, _ = fit_variogram(resid.T, dist)
    except DegenerateVariogramError:
        return current
    return KernelParams(
        range_km=fitted.range_km, nugget=max(fitted.nugget, _NUGGET_FLOOR)
    )


def _param_vector(beta, variances, kernel):
    return np.concatenate([beta, variances, [kernel.range_km, kernel.nugget]])


def _relative_change(a, b):
    return float(np.max(np.abs(b - a) / np.maximum(1.0, np.abs(a))))


# ---------------------------------------------------------------------------
# Residual extraction


def node_residuals(est: NodeEstimate, ds: PanelDataset) -> ResidualPanel:
    """Raw, weighted, and decorrelated residual panels for a fitted node.

    Weighted divides by the location's group sd; decorrelated additionally
    whitens across the locations observed at each week.
    """
    terms = list(est.coefficients)
    Y, X0, mask = build_design(ds, est.node, terms)
    beta = np.array([est.coefficients[t] for t in terms])
    fitted = est.intercept + (X0 @ beta if terms else 0.0)
    raw = np.where(mask, Y - fitted, np.nan)

    mean_var = (
        float(np.mean(list(est.group_variances.values()))) if est.group_variances else 1.0
    )
    sd = np.array(
        [
            math.sqrt(max(est.group_variances.get(loc.group, mean_var), _VAR_FLOOR))
            for loc in ds.locations
        ]
    )
    weighted = raw / sd[:, None]

    blocks = _WeekBlocks(mask)
    corr = corr_from_distances(ds.distance_matrix, est.kernel)
    Lst = blocks.chol_stack(corr)
    wg = blocks.gather(np.where(mask, weighted, 0.0))
    dec = np.linalg.solve(Lst, wg[..., None])[..., 0]
    decorrelated = blocks.scatter(dec)

    return ResidualPanel(
        node=est.node,
        loc_ids=tuple(loc.id for loc in ds.locations),
        groups=tuple(loc.group for loc in ds.locations),
        weeks=tuple(ds.weeks),
        mask=mask,
        raw=raw,
        weighted=weighted,
        decorrelated=decorrelated,
    )
