"""Weighted discrete probability measures and transport-style distances.

Conventions used throughout the package:

* points are stored as an (n, dim) float array; d = 1 inputs may be given
  as flat arrays and are reshaped,
* scalar test functions are vectorized: they take an (n, dim) array and
  return an (n,) array,
* atoms are merged only under exact coordinate equality (no snapping).

Distances between measures with supports ``mu`` and ``nu``:

* ``wasserstein(ell)``: order-ell transport distance.  The reported value
  is ``cost ** (1 / max(ell, 1))`` where cost is the optimal expected
  ``|x - y| ** ell``; for ell < 1 the cost itself is the metric.
* ``total_variation()``: half the mass of ``|mu - nu|``.
* ``bounded_wasserstein()``: optimal expected ``min(|x - y|, 1)``.
* ``weighted_tv(ell)``: ``integral (1 + |y|**ell) d|mu - nu|``.

One-dimensional transport with ell >= 1 uses the quantile coupling; every
other transport case is solved as an explicit linear program on supports
capped at ``support_cap`` atoms per side.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from scipy.optimize import linprog

WEIGHT_SUM_TOL = 1e-12
WEIGHT_PRUNE_TOL = 1e-15
DEFAULT_SUPPORT_CAP = 512

# HiGHS rejects tolerances below 1e-10 with an "Invalid option value" warning
_LP_OPTIONS = {
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
}


class MeasureError(ValueError):
    """Invalid measure data or an unsupported distance request."""


def _as_points(points: object, dim: int | None = None) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts.reshape(-1, 1) if dim in (None, 1) else pts.reshape(1, -1)
    elif pts.ndim != 2:
        raise MeasureError(f"points must be (n, dim), got shape {pts.shape}")
    if dim is not None and pts.shape[1] != dim:
        raise MeasureError(f"expected dim={dim}, got {pts.shape[1]}")
    return pts


@dataclass(frozen=True)
class DiscreteMeasure:
    """Finitely supported probability measure sum_i w_i delta_{x_i}."""

    points: np.ndarray
    weights: np.ndarray

    def __init__(self, points: object, weights: object | None = None):
        pts = _as_points(points)
        if weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = np.asarray(weights, dtype=float).reshape(-1)
        if pts.shape[0] == 0:
            raise MeasureError("a measure needs at least one atom")
        if pts.shape[0] != w.shape[0]:
            raise MeasureError("points and weights length mismatch")
        if not np.all(np.isfinite(pts)):
            raise MeasureError("non-finite atom coordinates")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise MeasureError("weights must be finite and nonnegative")
        total = float(w.sum())
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise MeasureError(f"weights sum to {total!r}, not 1")
        w = w / total
        keep = w >= WEIGHT_PRUNE_TOL
        if not np.any(keep):
            raise MeasureError("all weights below prune tolerance")
        if not np.all(keep):
            pts, w = pts[keep], w[keep]
            w = w / w.sum()
        pts = pts.copy()
        w = w.copy()
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    # -- basic queries ---------------------------------------------------

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def natoms(self) -> int:
        return self.points.shape[0]

    def expect(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        """integral fn d(mu) for a vectorized scalar function fn."""
        vals = np.asarray(fn(self.points), dtype=float).reshape(-1)
        if vals.shape[0] != self.natoms:
            raise MeasureError("integrand returned wrong length")
        return float(self.weights @ vals)

    def moment(self, ell: float) -> float:
        """integral |x|**ell d(mu), Euclidean norm, ell >= 0."""
        if ell < 0:
            raise MeasureError("moment order must be nonnegative")
        if ell == 0:
            return 1.0
        norms = np.linalg.norm(self.points, axis=1)
        return float(self.weights @ norms**ell)

    def mean(self) -> np.ndarray:
        return np.asarray(self.weights @ self.points, dtype=float)

    # -- one-dimensional distribution functions --------------------------

    def _sorted_1d(self) -> tuple[np.ndarray, np.ndarray]:
        if self.dim != 1:
            raise MeasureError("cdf/quantile require dim=1")
        order = np.argsort(self.points[:, 0], kind="stable")
        return self.points[order, 0], self.weights[order]

    def cdf(self, x: object) -> np.ndarray | float:
        xs, ws = self._sorted_1d()
        cum = np.cumsum(ws)
        x_arr = np.asarray(x, dtype=float)
        idx = np.searchsorted(xs, x_arr, side="right")
        out = np.where(idx > 0, cum[np.minimum(idx, len(cum)) - 1], 0.0)
        out = np.where(idx == 0, 0.0, out)
        return float(out) if np.isscalar(x) or x_arr.ndim == 0 else out

    def quantile(self, v: float) -> float:
        """Left-continuous generalized inverse: inf{x : F(x) >= v}."""
        if not 0.0 < v <= 1.0:
            raise MeasureError("quantile level must be in (0, 1]")
        xs, ws = self._sorted_1d()
        cum = np.cumsum(ws)
        idx = int(np.searchsorted(cum, v, side="left"))
        return float(xs[min(idx, len(xs) - 1)])

    # -- canonical form ---------------------------------------------------

    def merged(self) -> "DiscreteMeasure":
        """Atoms merged under exact coordinate equality, sorted lexicographically."""
        order = np.lexsort(self.points.T[::-1])
        pts, w = self.points[order], self.weights[order]
        new_group = np.ones(len(pts), dtype=bool)
        new_group[1:] = np.any(pts[1:] != pts[:-1], axis=1)
        group_ids = np.cumsum(new_group) - 1
        gpts = pts[new_group]
        gw = np.zeros(len(gpts))
        np.add.at(gw, group_ids, w)
        return DiscreteMeasure(gpts, gw)

    def same_as(self, other: "DiscreteMeasure", tol: float = 0.0) -> bool:
        a, b = self.merged(), other.merged()
        if a.natoms != b.natoms or a.dim != b.dim:
            return False
        return bool(
            np.array_equal(a.points, b.points)
            and np.all(np.abs(a.weights - b.weights) <= tol + 1e-15)
        )

    # -- serialization -----------------------------------------------------

    def to_text(self) -> str:
        lines = [f"dim={self.dim} atoms={self.natoms}"]
        for w, row in zip(self.weights, self.points):
            coords = " ".join(format(c, ".17g") for c in row)
            lines.append(f"{format(w, '.17g')} {coords}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "DiscreteMeasure":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if not lines:
            raise MeasureError("empty measure text")
        header = lines[0].split()
        try:
            fields = dict(part.split("=") for part in header)
            dim, natoms = int(fields["dim"]), int(fields["atoms"])
        except (ValueError, KeyError) as exc:
            raise MeasureError(f"bad measure header {lines[0]!r}") from exc
        if len(lines) - 1 != natoms:
            raise MeasureError(f"expected {natoms} atom lines, got {len(lines) - 1}")
        rows = []
        for ln in lines[1:]:
            vals = [float(tok) for tok in ln.split()]
            if len(vals) != dim + 1:
                raise MeasureError(f"atom line {ln!r} needs 1 weight + {dim} coords")
            rows.append(vals)
        arr = np.asarray(rows, dtype=float)
        return DiscreteMeasure(arr[:, 1:], arr[:, 0])


def empirical_from_samples(samples: object) -> DiscreteMeasure:
    """Uniform-weight empirical measure of a sample array (n,) or (n, d)."""
    return DiscreteMeasure(_as_points(samples))


def interpolate(mu: DiscreteMeasure, nu: DiscreteMeasure, s: float) -> DiscreteMeasure:
    """Mixture (1 - s) mu + s nu, atoms merged under exact equality."""
    if mu.dim != nu.dim:
        raise MeasureError("dimension mismatch")
    if not 0.0 <= s <= 1.0:
        raise MeasureError("mixture parameter must lie in [0, 1]")
    if s == 0.0:
        return mu
    if s == 1.0:
        return nu
    pts = np.vstack([mu.points, nu.points])
    w = np.concatenate([(1.0 - s) * mu.weights, s * nu.weights])
    return DiscreteMeasure(pts, w).merged()


# -- metric kinds ---------------------------------------------------------


@dataclass(frozen=True)
class MetricKind:
    """Which distance between measures to compute."""

    tag: str
    ell: float | None = None

    @staticmethod
    def wasserstein(ell: float) -> "MetricKind":
        if not ell > 0:
            raise MeasureError("wasserstein order must be positive")
        return MetricKind("wasserstein", float(ell))

    @staticmethod
    def total_variation() -> "MetricKind":
        return MetricKind("total_variation")

    @staticmethod
    def bounded_wasserstein() -> "MetricKind":
        return MetricKind("bounded_wasserstein")

    @staticmethod
    def weighted_tv(ell: float) -> "MetricKind":
        if ell < 0:
            raise MeasureError("weighted TV order must be nonnegative")
        return MetricKind("weighted_tv", float(ell))


def _signed_atom_difference(
    mu: DiscreteMeasure, nu: DiscreteMeasure
) -> tuple[np.ndarray, np.ndarray]:
    """Union support and net weights of mu - nu (exact-equality merging)."""
    a, b = mu.merged(), nu.merged()
    pts = np.vstack([a.points, b.points])
    w = np.concatenate([a.weights, -b.weights])
    order = np.lexsort(pts.T[::-1])
    pts, w = pts[order], w[order]
    new_group = np.ones(len(pts), dtype=bool)
    new_group[1:] = np.any(pts[1:] != pts[:-1], axis=1)
    gids = np.cumsum(new_group) - 1
    gpts = pts[new_group]
    gw = np.zeros(len(gpts))
    np.add.at(gw, gids, w)
    return gpts, gw


def _pairwise_abs_diff(mu: DiscreteMeasure, nu: DiscreteMeasure) -> np.ndarray:
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    return np.linalg.norm(diff, axis=2)


def _lp_transport_cost(
    cost: np.ndarray, w_mu: np.ndarray, w_nu: np.ndarray
) -> float:
    """Exact optimal transport cost between discrete marginals via an LP."""
    n, m = cost.shape
    a_rows = []
    for i in range(n):
        row = np.zeros(n * m)
        row[i * m : (i + 1) * m] = 1.0
        a_rows.append(row)
    for j in range(m):
        row = np.zeros(n * m)
        row[j::m] = 1.0
        a_rows.append(row)
    a_eq = np.asarray(a_rows)
    b_eq = np.concatenate([w_mu, w_nu])
    # one marginal constraint is redundant; dropping it keeps HiGHS happy
    res = linprog(
        cost.ravel(),
        A_eq=a_eq[:-1],
        b_eq=b_eq[:-1],
        bounds=(0, None),
        method="highs",
        options=_LP_OPTIONS,
    )
    if not res.success:
        raise MeasureError(f"transport LP failed: {res.message}")
    return float(res.fun)


def _quantile_coupling_cost(
    mu: DiscreteMeasure, nu: DiscreteMeasure, ell: float
) -> float:
    """Optimal expected |x-y|**ell in d=1 for convex cost (ell >= 1)."""
    a, b = mu.merged(), nu.merged()
    xs, ws = a._sorted_1d()
    ys, vs = b._sorted_1d()
    ca, cb = np.cumsum(ws), np.cumsum(vs)
    ca[-1] = cb[-1] = 1.0
    bounds = np.concatenate([[0.0], np.union1d(ca, cb)])
    widths = np.diff(bounds)
    mids = 0.5 * (bounds[:-1] + bounds[1:])
    ia = np.searchsorted(ca, mids, side="left")
    ib = np.searchsorted(cb, mids, side="left")
    gaps = np.abs(xs[np.minimum(ia, len(xs) - 1)] - ys[np.minimum(ib, len(ys) - 1)])
    return float(widths @ gaps**ell)


def distance(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    kind: MetricKind,
    support_cap: int = DEFAULT_SUPPORT_CAP,
) -> float:
    """Distance between two discrete measures under the requested metric."""
    if mu.dim != nu.dim:
        raise MeasureError("dimension mismatch")

    if kind.tag == "total_variation":
        _, net = _signed_atom_difference(mu, nu)
        return 0.5 * float(np.abs(net).sum())

    if kind.tag == "weighted_tv":
        pts, net = _signed_atom_difference(mu, nu)
        norms = np.linalg.norm(pts, axis=1)
        weight = 1.0 + (norms**kind.ell if kind.ell > 0 else np.ones_like(norms))
        return float(weight @ np.abs(net))

    if kind.tag == "bounded_wasserstein":
        _check_cap(mu, nu, support_cap)
        cost = np.minimum(_pairwise_abs_diff(mu, nu), 1.0)
        return _lp_transport_cost(cost, mu.weights, nu.weights)

    if kind.tag == "wasserstein":
        ell = kind.ell
        if mu.dim == 1 and ell >= 1.0:
            return _quantile_coupling_cost(mu, nu, ell) ** (1.0 / ell)
        _check_cap(mu, nu, support_cap)
        cost = _pairwise_abs_diff(mu, nu) ** ell
        opt = _lp_transport_cost(cost, mu.weights, nu.weights)
        return opt ** (1.0 / max(ell, 1.0))

    raise MeasureError(f"unknown metric kind {kind.tag!r}")


def _check_cap(mu: DiscreteMeasure, nu: DiscreteMeasure, cap: int) -> None:
    if mu.natoms > cap or nu.natoms > cap:
        raise MeasureError(
            f"transport LP supports capped at {cap} atoms per side "
            f"(got {mu.natoms} and {nu.natoms}); raise support_cap explicitly"
        )


# -- validation suites ----------------------------------------------------


@dataclass(frozen=True)
class AxiomReport:
    triples: int
    symmetry_failures: int
    identity_failures: int
    triangle_failures: int
    max_violation: float

    @property
    def ok(self) -> bool:
        return (
            self.symmetry_failures == 0
            and self.identity_failures == 0
            and self.triangle_failures == 0
        )


def _random_measure(
    rng: np.random.Generator, dim: int, max_atoms: int = 5
) -> DiscreteMeasure:
    n = int(rng.integers(1, max_atoms + 1))
    pts = rng.normal(size=(n, dim))
    w = rng.gamma(1.0, 1.0, size=n) + 1e-3
    return DiscreteMeasure(pts, w / w.sum())


def metric_axiom_suite(
    kind: MetricKind,
    rng: np.random.Generator,
    n_triples: int = 200,
    tol: float = 1e-10,
    dim: int = 1,
) -> AxiomReport:
    """Check symmetry, identity, and the triangle inequality on random triples."""
    sym = ident = tri = 0
    worst = 0.0
    for _ in range(n_triples):
        m1 = _random_measure(rng, dim)
        m2 = _random_measure(rng, dim)
        m3 = _random_measure(rng, dim)
        d12 = distance(m1, m2, kind)
        d21 = distance(m2, m1, kind)
        if abs(d12 - d21) > tol:
            sym += 1
        worst = max(worst, abs(d12 - d21))
        # distance to an atom-shuffled copy of itself must vanish
        perm = rng.permutation(m1.natoms)
        copy = DiscreteMeasure(m1.points[perm], m1.weights[perm])
        d_self = distance(m1, copy, kind)
        if d_self > tol:
            ident += 1
        worst = max(worst, d_self)
        if d12 <= tol and not m1.same_as(m2, tol=tol):
            ident += 1
        d13 = distance(m1, m3, kind)
        d23 = distance(m2, m3, kind)
        violation = d13 - (d12 + d23)
        if violation > tol:
            tri += 1
        worst = max(worst, violation)
    return AxiomReport(n_triples, sym, ident, tri, worst)


def weighted_variation_integral(
    mu: DiscreteMeasure, nu: DiscreteMeasure, ell: float
) -> float:
    """integral |y|**ell d|mu - nu|(y)."""
    pts, net = _signed_atom_difference(mu, nu)
    norms = np.linalg.norm(pts, axis=1)
    return float((norms**ell) @ np.abs(net))


def tv_wasserstein_inequality_check(
    mu: DiscreteMeasure, nu: DiscreteMeasure, ell: float, tol: float = 1e-10
) -> bool:
    """Check W_ell^(ell v 1) <= 2^((ell-1)+) * integral |y|^ell d|mu-nu| + tol.

    Proof sketch: couple the common mass mu ^ nu on the diagonal and the
    residuals (mu - nu)+ and (nu - mu)+ by an independent product; bounding
    |x - y|^ell by 2^((ell-1)+) (|x|^ell + |y|^ell) on the residual part
    gives exactly the right-hand side.  The bound is tight, e.g. for
    delta_{-1} against (delta_{-1} + delta_{1}) / 2 with ell = 1.
    """
    if ell <= 0:
        raise MeasureError("inequality check requires ell > 0")
    w_ell = distance(mu, nu, MetricKind.wasserstein(ell))
    var_int = weighted_variation_integral(mu, nu, ell)
    lhs = w_ell ** max(ell, 1.0)
    rhs = 2.0 ** max(ell - 1.0, 0.0) * var_int
    return lhs <= rhs + tol
