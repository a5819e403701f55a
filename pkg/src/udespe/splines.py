"""Monotone spline basis: M-splines and their integrated (I-spline) family.

I-splines of order k rise from 0 at the left boundary knot to 1 at the right
boundary knot and are nondecreasing in between, which makes a nonnegative
combination of them a monotone regression curve. Evaluation follows the
corrected partial-sum formula over M-splines of order k + 1.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidParameterError


def _mspline_design_on_knots(x: np.ndarray, knots: np.ndarray, order: int) -> np.ndarray:
    """M-spline design matrix on an explicit (already augmented) knot vector.

    Returns shape (len(knots) - order, len(x)). Uses the half-open convention
    t_i <= x < t_{i+1}.
    """
    n_funcs = len(knots) - 1
    width = knots[1:] - knots[:-1]
    with np.errstate(divide="ignore"):
        inv = np.where(width > 0, 1.0 / np.where(width > 0, width, 1.0), 0.0)
    m = ((knots[:-1, None] <= x[None, :]) & (x[None, :] < knots[1:, None])) * inv[:, None]
    for p in range(2, order + 1):
        n_funcs = len(knots) - p
        span = knots[p:] - knots[:-p]
        with np.errstate(divide="ignore"):
            inv_span = np.where(span > 0, 1.0 / np.where(span > 0, span, 1.0), 0.0)
        left = (x[None, :] - knots[:n_funcs, None]) * m[:n_funcs]
        right = (knots[p:, None] - x[None, :]) * m[1:n_funcs + 1]
        m = p * (left + right) * inv_span[:, None] / (p - 1)
    return m


def _augment(mesh: np.ndarray, order: int) -> np.ndarray:
    return np.concatenate([np.full(order, mesh[0]), mesh[1:-1], np.full(order, mesh[-1])])


def mspline_basis(z, knots, order: int = 3) -> np.ndarray:
    """M-spline basis values at ``z``; shape (..., len(knots) - 2 + order)."""
    mesh = _validate_mesh(knots)
    z_arr = np.atleast_1d(np.asarray(z, dtype=float)).ravel()
    design = _mspline_design_on_knots(z_arr, _augment(mesh, order), order).T
    return design[0] if np.ndim(z) == 0 else design


def _validate_mesh(knots) -> np.ndarray:
    mesh = np.asarray(knots, dtype=float)
    if mesh.ndim != 1 or len(mesh) < 2:
        raise InvalidParameterError("knots must be a 1-D sequence with at least 2 values")
    if not np.all(np.isfinite(mesh)):
        raise InvalidParameterError("knots must be finite")
    if np.any(np.diff(mesh) <= 0):
        raise InvalidParameterError("knots must be strictly increasing")
    return mesh


class ISplineBasis:
    """Cubic (by default) I-spline family on a mesh of boundary + interior knots.

    The family has ``len(knots) - 2 + order`` members. Outside the mesh the
    basis is clamped flat: zeros below the left boundary, ones above the
    right boundary.
    """

    def __init__(self, knots, order: int = 3):
        self.mesh = _validate_mesh(knots)
        if order < 1:
            raise InvalidParameterError("order must be >= 1")
        self.order = order
        self.df = len(self.mesh) - 2 + order
        self._knots_hi = _augment(self.mesh, order + 1)

    def design(self, z) -> np.ndarray:
        """Basis matrix I_l(z), shape (..., df); each column in [0, 1]."""
        scalar = np.ndim(z) == 0
        z_arr = np.atleast_1d(np.asarray(z, dtype=float)).ravel()
        if not np.all(np.isfinite(z_arr)):
            raise InvalidParameterError("spline inputs must be finite")
        z_clip = np.clip(z_arr, self.mesh[0], self.mesh[-1])

        k = self.order
        t = self._knots_hi
        m_hi = _mspline_design_on_knots(z_clip, t, k + 1)   # (df + 1, N)
        n_hi = m_hi.shape[0]
        # one-based index j of the knot span containing each point
        j = np.searchsorted(t, z_clip, side="right")
        # partial-sum terms: row m-1 holds (t_{m+k+1} - t_m) M_m / (k+1), 1-based m
        widths = (t[k + 1:k + 1 + n_hi] - t[:n_hi])[:, None]
        terms = widths * m_hi / (k + 1)

        out = np.empty((len(z_clip), self.df))
        m_idx = np.arange(1, n_hi + 1)[:, None]
        include = (m_idx <= j[None, :])
        suffix = np.where(include, terms, 0.0)
        # suffix sums over m >= i+1 for each basis index i
        csum = np.cumsum(suffix[::-1], axis=0)[::-1]
        for i in range(1, self.df + 1):
            vals = csum[i] if i < n_hi else np.zeros(len(z_clip))
            vals = np.where(i > j, 0.0, np.where(i < j - k, 1.0, vals))
            out[:, i - 1] = vals
        out[z_arr >= self.mesh[-1]] = 1.0
        out[z_arr <= self.mesh[0]] = 0.0
        np.clip(out, 0.0, 1.0, out=out)
        return out[0] if scalar else out


def ispline_basis(z, knots, df: int | None = None, order: int = 3) -> np.ndarray:
    """I-spline basis values at ``z`` for the given mesh.

    ``df``, when given, must equal the family size implied by the knots
    (len(knots) - 2 + order); it exists as a consistency check.
    """
    basis = ISplineBasis(knots, order=order)
    if df is not None and df != basis.df:
        raise InvalidParameterError(
            f"df={df} inconsistent with {len(np.atleast_1d(knots))} knots of order "
            f"{order} (expected {basis.df})")
    return basis.design(z)


def knots_from_exposures(exposures, small_n_cutoff: int = 60) -> np.ndarray:
    """Mesh rule used by the efficacy model: boundary knots at the 1st/99th
    percentiles, one interior knot at the median for small samples, interior
    knots at the terciles otherwise."""
    z = np.asarray(exposures, dtype=float)
    if z.size < 2:
        raise InvalidParameterError("need at least 2 exposures to place knots")
    lo, hi = np.percentile(z, [1.0, 99.0])
    if hi - lo <= 1e-9 * max(abs(hi), 1.0):
        mid = 0.5 * (lo + hi)
        spread = max(abs(mid), 1.0) * 0.1
        lo, hi = mid - spread, mid + spread
    if z.size < small_n_cutoff:
        interior = np.percentile(z, [50.0])
    else:
        interior = np.percentile(z, [100.0 / 3.0, 200.0 / 3.0])
    interior = interior[(interior > lo) & (interior < hi)]
    # drop interior knots that collide with a boundary or each other
    keep = []
    prev = lo
    for v in interior:
        if v - prev > 1e-6 * (hi - lo):
            keep.append(v)
            prev = v
    keep = [v for v in keep if hi - v > 1e-6 * (hi - lo)]
    return np.array([lo, *keep, hi])
