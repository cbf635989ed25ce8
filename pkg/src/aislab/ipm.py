"""Integral probability metrics on finite supports and the constants that scale them.

Distributions are either plain probability vectors on the common index support
``0..n-1`` or :class:`DiscreteDist` objects carrying explicit support points.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.optimize import linprog

from .exceptions import InputError, KernelValidityError, SizeError

PROB_TOL = 1e-12
MMD_CLAMP = 1e-12
EXACT_OT_LIMIT = 64
RKHS_RIDGE = 1e-10


@dataclass(frozen=True, eq=False)
class DiscreteDist:
    support: np.ndarray  # (n,) ids or (n, d) points
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        support = np.asarray(self.support)
        if support.ndim == 1 and support.dtype.kind == "f":
            support = support[:, None]
        if len(support) != len(probs):
            raise InputError("support and probs differ in length")
        _check_probs(probs)
        keys = [tuple(np.atleast_1d(x).tolist()) for x in support]
        if len(set(keys)) != len(keys):
            raise InputError("support entries must be distinct")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "support", support)

    @classmethod
    def on_indices(cls, probs) -> "DiscreteDist":
        probs = np.asarray(probs, dtype=np.float64)
        return cls(np.arange(len(probs)), probs)


Dist = Union[DiscreteDist, np.ndarray, list]


def _check_probs(probs: np.ndarray) -> None:
    if probs.ndim != 1 or np.any(probs < 0) or abs(probs.sum() - 1.0) > PROB_TOL:
        raise InputError("not a probability vector")


def _as_dist(p: Dist) -> DiscreteDist:
    return p if isinstance(p, DiscreteDist) else DiscreteDist.on_indices(p)


def _union(p: Dist, q: Dist):
    """Both distributions as probability vectors on the union of their supports."""
    p, q = _as_dist(p), _as_dist(q)
    keys = {}
    points = []
    for x in list(p.support) + list(q.support):
        k = tuple(np.atleast_1d(x).tolist())
        if k not in keys:
            keys[k] = len(points)
            points.append(x)
    pv = np.zeros(len(points))
    qv = np.zeros(len(points))
    for x, w in zip(p.support, p.probs):
        pv[keys[tuple(np.atleast_1d(x).tolist())]] += w
    for x, w in zip(q.support, q.probs):
        qv[keys[tuple(np.atleast_1d(x).tolist())]] += w
    return np.array(points), pv, qv


# ---------------------------------------------------------------------------
# ground metrics


@dataclass(frozen=True, eq=False)
class MetricSpec:
    kind: str = "discrete"  # discrete | euclidean | table
    table: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("discrete", "euclidean", "table"):
            raise InputError(f"unknown metric kind {self.kind!r}")
        if self.kind == "table":
            d = np.asarray(self.table, dtype=np.float64)
            if d.ndim != 2 or d.shape[0] != d.shape[1]:
                raise InputError("metric table must be square")
            if np.any(d < 0) or np.any(np.diag(d) != 0) or not np.allclose(d, d.T, atol=0):
                raise InputError("metric table must be symmetric, nonnegative, zero on the diagonal")
            # d[i, k] <= d[i, j] + d[j, k]
            if np.any(d[:, None, :] > d[:, :, None] + d[None, :, :] + 1e-12):
                raise InputError("metric table violates the triangle inequality")
            object.__setattr__(self, "table", d)

    def pairwise(self, xs, ys=None) -> np.ndarray:
        xs = np.asarray(xs)
        ys = xs if ys is None else np.asarray(ys)
        if self.kind == "table":
            return self.table[np.ix_(xs.astype(int).ravel(), ys.astype(int).ravel())]
        xa = xs.reshape(len(xs), -1).astype(np.float64)
        ya = ys.reshape(len(ys), -1).astype(np.float64)
        if self.kind == "discrete":
            return np.any(xa[:, None, :] != ya[None, :, :], axis=2).astype(np.float64)
        return np.sqrt(np.sum((xa[:, None, :] - ya[None, :, :]) ** 2, axis=2))


DISCRETE = MetricSpec("discrete")
EUCLIDEAN = MetricSpec("euclidean")


# ---------------------------------------------------------------------------
# total variation


def tv_ipm(p: Dist, q: Dist) -> float:
    """IPM over {f : span(f)/2 <= 1}; equals the L1 distance."""
    _, pv, qv = _union(p, q)
    return float(np.abs(pv - qv).sum())


def tv_std(p: Dist, q: Dist) -> float:
    """Classical total variation, half the L1 distance."""
    return 0.5 * tv_ipm(p, q)


# ---------------------------------------------------------------------------
# Wasserstein


def _w1_sorted(points: np.ndarray, pv: np.ndarray, qv: np.ndarray) -> float:
    x = points.ravel().astype(np.float64)
    order = np.argsort(x)
    x, pv, qv = x[order], pv[order], qv[order]
    cdf_gap = np.cumsum(pv - qv)[:-1]
    return float(np.sum(np.abs(cdf_gap) * np.diff(x)))


def transport_lp(pv: np.ndarray, qv: np.ndarray, cost: np.ndarray) -> float:
    """Optimal transport cost by linear programming (HiGHS dual simplex)."""
    n, m = cost.shape
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([pv, qv])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = np.maximum(res.x, 0.0)
    return float(plan @ cost.ravel())


def wasserstein_exact(p: Dist, q: Dist, metric: MetricSpec = DISCRETE) -> float:
    points, pv, qv = _union(p, q)
    if metric.kind == "euclidean" and points.reshape(len(points), -1).shape[1] == 1:
        return _w1_sorted(points, pv, qv)
    keep = (pv > 0) | (qv > 0)
    if keep.sum() > EXACT_OT_LIMIT:
        raise SizeError(f"exact transport limited to {EXACT_OT_LIMIT} support points")
    # mass shared at the same point never moves; transport only the excess
    common = np.minimum(pv, qv)
    src, dst = pv - common, qv - common
    mass = src.sum()
    if mass <= 0:
        return 0.0
    si, di = np.flatnonzero(src > 0), np.flatnonzero(dst > 0)
    if len(si) == 0 or len(di) == 0:
        return 0.0  # excess is pure rounding noise
    cost = metric.pairwise(points[si], points[di])
    # equalise the two excess masses, which differ only by rounding
    d = dst[di] * (src[si].sum() / dst[di].sum())
    return transport_lp(src[si], d, cost)


# ---------------------------------------------------------------------------
# kernels and MMD


@dataclass(frozen=True, eq=False)
class KernelSpec:
    kind: str  # energy | gaussian | laplace | distance_induced
    param: float = 1.0
    anchor: Optional[object] = None
    metric: MetricSpec = EUCLIDEAN

    def __post_init__(self):
        if self.kind in ("energy", "distance_induced"):
            if not 0.0 < self.param <= 2.0:
                raise InputError("distance-kernel exponent must lie in (0, 2]")
        elif self.kind in ("gaussian", "laplace"):
            if self.param <= 0:
                raise InputError("bandwidth/scale must be positive")
        else:
            raise InputError(f"unknown kernel kind {self.kind!r}")

    def _anchor_dist(self, xs: np.ndarray) -> np.ndarray:
        anchor = self.anchor
        if anchor is None:
            # energy kernel: anchor at the origin (or id 0 for index supports)
            anchor = np.zeros(xs.reshape(len(xs), -1).shape[1]) if self.metric.kind == "euclidean" else 0
        anc = np.asarray(anchor)
        anc = anc.reshape(1, -1) if self.metric.kind != "table" else anc.reshape(1)
        return self.metric.pairwise(xs, anc)[:, 0] ** self.param

    def gram(self, xs, ys=None) -> np.ndarray:
        xs = np.asarray(xs)
        ys = xs if ys is None else np.asarray(ys)
        d = self.metric.pairwise(xs, ys)
        if self.kind == "gaussian":
            return np.exp(-(d**2) / (2.0 * self.param**2))
        if self.kind == "laplace":
            return np.exp(-d / self.param)
        return 0.5 * (self._anchor_dist(xs)[:, None] + self._anchor_dist(ys)[None, :] - d**self.param)

    def __call__(self, x, y) -> float:
        return float(self.gram(np.asarray([x]), np.asarray([y]))[0, 0])


def distance_kernel(p_exponent: float, anchor=None, metric: MetricSpec = EUCLIDEAN) -> KernelSpec:
    """k(x, x') = (d(x, x0)^p + d(x', x0)^p - d(x, x')^p) / 2."""
    return KernelSpec("distance_induced", p_exponent, anchor, metric)


def energy_kernel(p_exponent: float = 1.0, metric: MetricSpec = EUCLIDEAN) -> KernelSpec:
    return KernelSpec("energy", p_exponent, None, metric)


def mmd_squared(p: Dist, q: Dist, kernel: KernelSpec) -> float:
    points, pv, qv = _union(p, q)
    k = kernel.gram(points)
    w = pv - qv
    return float(w @ k @ w)


def mmd_closed(p: Dist, q: Dist, kernel: KernelSpec) -> float:
    sq = mmd_squared(p, q, kernel)
    if sq < -MMD_CLAMP:
        raise KernelValidityError(f"squared MMD {sq:.3e} is negative; kernel is not positive semidefinite")
    return math.sqrt(max(sq, 0.0))


def mmd_u_statistic(xs, ys, kernel: KernelSpec) -> float:
    """Unbiased estimate of the squared MMD (diagonal terms excluded)."""
    xs, ys = np.asarray(xs), np.asarray(ys)
    n, m = len(xs), len(ys)
    if n < 2 or m < 2:
        raise SizeError("need at least two samples on each side")
    both = np.concatenate([xs.reshape(n, -1), ys.reshape(m, -1)])
    uniq, inv = np.unique(both, axis=0, return_inverse=True)
    inv = inv.ravel()
    if len(uniq) < min(n + m, 2000):
        # few distinct points: evaluate the Gram once per pair of distinct points
        pts = uniq if xs.ndim > 1 else uniq[:, 0]
        cx = np.bincount(inv[:n], minlength=len(uniq)).astype(np.float64)
        cy = np.bincount(inv[n:], minlength=len(uniq)).astype(np.float64)
        k = kernel.gram(pts)
        dk = np.diag(k)
        within_x = (cx @ k @ cx - cx @ dk) / (n * (n - 1))
        within_y = (cy @ k @ cy - cy @ dk) / (m * (m - 1))
        return float(within_x + within_y - 2.0 * (cx @ k @ cy) / (n * m))
    kxx, kyy, kxy = kernel.gram(xs), kernel.gram(ys), kernel.gram(xs, ys)
    within_x = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    within_y = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(within_x + within_y - 2.0 * kxy.mean())


def energy_surrogate(xs, model: Dist, p_exponent: float = 1.0, metric: MetricSpec = EUCLIDEAN) -> float:
    """Sample estimate of the part of the squared energy distance that depends on the
    model: mean cross distance minus half the model's within distance."""
    model = _as_dist(model)
    d_cross = metric.pairwise(np.asarray(xs), model.support) ** p_exponent
    d_within = metric.pairwise(model.support) ** p_exponent
    return float(np.mean(d_cross @ model.probs) - 0.5 * model.probs @ d_within @ model.probs)


def mmd_mean_surrogate(m, x):
    """Loss ``(m - 2x)^T m`` and its gradient ``2m - 2x`` with respect to ``m``."""
    m = np.asarray(m, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if m.shape != x.shape:
        raise InputError("m and x differ in shape")
    return float((m - 2.0 * x) @ m), 2.0 * m - 2.0 * x


# ---------------------------------------------------------------------------
# KL / Pinsker


@dataclass(frozen=True)
class PinskerChain:
    kl: float
    tv_std: float
    w_upper: float
    infinite: bool = False

    def __iter__(self):
        return iter((self.kl, self.tv_std, self.w_upper))


def kl_and_pinsker(p: Dist, q: Dist, diameter: float = 1.0) -> PinskerChain:
    _, pv, qv = _union(p, q)
    tv = 0.5 * float(np.abs(pv - qv).sum())
    mask = pv > 0
    if np.any(qv[mask] <= 0):
        return PinskerChain(math.inf, tv, math.inf, infinite=True)
    kl = float(np.sum(pv[mask] * np.log(pv[mask] / qv[mask])))
    kl = max(kl, 0.0)
    return PinskerChain(kl, tv, diameter * math.sqrt(kl / 2.0))


# ---------------------------------------------------------------------------
# Minkowski-functional constants


def span(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.max() - values.min())


def rkhs_norm(values, gram, return_residual: bool = False):
    """RKHS norm of the function taking ``values`` on the points whose Gram matrix is given.

    Uses the minimum-norm representer; eigen-directions with eigenvalue below
    ``RKHS_RIDGE`` times the largest are treated as null. A component of ``values``
    in that null space cannot be represented; its size is the residual and a warning
    is issued when it exceeds 1e-8.
    """
    values = np.asarray(values, dtype=np.float64)
    k = np.asarray(gram, dtype=np.float64)
    if k.shape != (len(values), len(values)) or not np.allclose(k, k.T, atol=1e-12):
        raise InputError("gram must be a symmetric matrix matching values")
    if not np.any(values):
        return (0.0, 0.0) if return_residual else 0.0
    lam, u = np.linalg.eigh(k)
    if lam.min() < -1e-9 * max(1.0, abs(lam.max())):
        raise KernelValidityError("gram matrix is not positive semidefinite")
    cutoff = RKHS_RIDGE * max(lam.max(), RKHS_RIDGE)
    coords = u.T @ values
    keep = lam > cutoff
    norm = math.sqrt(float(np.sum(coords[keep] ** 2 / lam[keep])))
    residual = float(np.linalg.norm(coords[~keep]))
    if residual > 1e-8:
        warnings.warn(f"values lie {residual:.2e} outside the RKHS span; norm is of the projection", RuntimeWarning)
    return (norm, residual) if return_residual else norm


def lipschitz_fn(values, metric: MetricSpec = DISCRETE, points=None) -> float:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        raise InputError("need at least two points")
    points = np.arange(len(values)) if points is None else np.asarray(points)
    d = metric.pairwise(points)
    diff = np.abs(values[:, None] - values[None, :])
    iu = np.triu_indices(len(values), 1)
    d, diff = d[iu], diff[iu]
    if np.any((d == 0) & (diff > 0)):
        return math.inf
    ok = d > 0
    return float(np.max(diff[ok] / d[ok])) if ok.any() else 0.0


def lipschitz_kernel(rows, point_metric: MetricSpec = DISCRETE, state_metric: MetricSpec = DISCRETE, points=None) -> float:
    """Largest ``W(rows[z1, a], rows[z2, a]) / d(z1, z2)`` over pairs and actions.

    ``rows`` has shape (points, actions, states) of next-state distributions.
    """
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    if n < 2:
        raise InputError("need at least two points")
    points = np.arange(n) if points is None else np.asarray(points)
    d = point_metric.pairwise(points)
    best = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            for a in range(rows.shape[1]):
                if state_metric.kind == "discrete":
                    w = 0.5 * float(np.abs(rows[i, a] - rows[j, a]).sum())
                else:
                    w = wasserstein_exact(rows[i, a], rows[j, a], state_metric)
                if w == 0:
                    continue
                if d[i, j] == 0:
                    return math.inf
                best = max(best, w / d[i, j])
    return best
