"""Squared-exponential kernels over space-time inputs.

Inputs live in (s1, s2, t). The kernel is anisotropic with one length-scale
per axis, so the full covariance factorises into a spatial and a temporal
part (separable structure); isotropic use just sets all scales equal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SpaceTimePoint",
    "KernelParams",
    "point_array",
    "axis_sq_dists",
    "sq_dist_axes",
    "rbf",
    "gram_from_sq_dists",
    "separable_gram",
    "lengthscale_from_correlation",
]


@dataclass(frozen=True)
class SpaceTimePoint:
    """A single input x = (s1, s2, t)."""

    s1: float
    s2: float
    t: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.s1, self.s2, self.t])):
            raise ValueError(f"coordinates must be finite, got {self!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.s1, self.s2, self.t], dtype=float)


@dataclass(frozen=True)
class KernelParams:
    """Signal variance and per-axis length-scales of a squared-exponential kernel."""

    signal_variance: float
    lengthscale_s1: float
    lengthscale_s2: float
    lengthscale_t: float

    def __post_init__(self):
        vals = np.array(
            [
                self.signal_variance,
                self.lengthscale_s1,
                self.lengthscale_s2,
                self.lengthscale_t,
            ],
            dtype=float,
        )
        if not (np.all(np.isfinite(vals)) and np.all(vals > 0.0)):
            raise ValueError(f"kernel parameters must be strictly positive and finite: {self!r}")

    @property
    def lengthscales(self) -> np.ndarray:
        return np.array(
            [self.lengthscale_s1, self.lengthscale_s2, self.lengthscale_t], dtype=float
        )

    @classmethod
    def isotropic(cls, signal_variance: float, lengthscale: float) -> "KernelParams":
        return cls(signal_variance, lengthscale, lengthscale, lengthscale)


def point_array(points) -> np.ndarray:
    """Coerce points to an (n, 3) float array.

    Accepts an (n, 3) array, a single SpaceTimePoint, or a sequence of
    SpaceTimePoint / 3-tuples.
    """
    if isinstance(points, SpaceTimePoint):
        arr = points.as_array()[None, :]
    else:
        seq = list(points) if not isinstance(points, np.ndarray) else points
        if isinstance(seq, list) and seq and isinstance(seq[0], SpaceTimePoint):
            arr = np.array([p.as_array() for p in seq], dtype=float)
        else:
            arr = np.atleast_2d(np.asarray(seq, dtype=float))
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected points of shape (n, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("point set must be nonempty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("points contain non-finite coordinates")
    return arr


def axis_sq_dists(points_a, points_b) -> np.ndarray:
    """Per-axis squared distances between two point sets, shape (n, m, 3)."""
    a = point_array(points_a)
    b = point_array(points_b)
    diff = a[:, None, :] - b[None, :, :]
    return diff * diff


def rbf(sq_dists, params: KernelParams):
    """Squared-exponential covariance from per-axis squared distances.

    ``sq_dists`` holds (d_s1^2, d_s2^2, d_t^2) in its last axis; the result is
    signal_variance * exp(-0.5 * sum_axis d^2 / lengthscale^2), which equals
    the product of spatial and temporal factors.
    """
    d2 = np.asarray(sq_dists, dtype=float)
    if d2.shape[-1] != 3:
        raise ValueError(f"expected per-axis squared distances with last dim 3, got {d2.shape}")
    if not np.all(np.isfinite(d2)):
        raise ValueError("squared distances contain non-finite values")
    if np.any(d2 < 0.0):
        raise ValueError("squared distances must be nonnegative")
    inv_two_lsq = 0.5 / params.lengthscales**2
    return params.signal_variance * np.exp(-(d2 @ inv_two_lsq))


def gram_from_sq_dists(sq_dist_axes, params: KernelParams) -> np.ndarray:
    """Gram matrix from three precomputed per-axis squared-distance matrices.

    Hot-path variant of separable_gram for repeated evaluation at different
    parameters over fixed locations; no input validation.
    """
    d1, d2, d3 = sq_dist_axes
    w = -0.5 / params.lengthscales**2
    out = d1 * w[0]
    out += d2 * w[1]
    out += d3 * w[2]
    np.exp(out, out=out)
    out *= params.signal_variance
    return out


def sq_dist_axes(points_a, points_b):
    """Per-axis squared-distance matrices ((n,m) each) between two point sets."""
    a = point_array(points_a)
    b = point_array(points_b)
    return tuple((a[:, k : k + 1] - b[None, :, k]) ** 2 for k in range(3))


def separable_gram(points_a, points_b, params: KernelParams) -> np.ndarray:
    """Gram matrix of the separable space-time kernel between two point sets.

    Entry (i, j) is the product of the spatial and temporal squared-exponential
    factors; on identical point sets the result is symmetric and PSD up to
    round-off.
    """
    return gram_from_sq_dists(sq_dist_axes(points_a, points_b), params)


def lengthscale_from_correlation(d: float, c: float) -> float:
    """Length-scale for which the unit-variance kernel has correlation c at distance d."""
    if not (np.isfinite(d) and d > 0.0):
        raise ValueError(f"distance must be positive and finite, got {d}")
    if not (np.isfinite(c) and 0.0 < c < 1.0):
        raise ValueError(f"target correlation must lie in (0, 1), got {c}")
    return float(d / np.sqrt(-2.0 * np.log(c)))
