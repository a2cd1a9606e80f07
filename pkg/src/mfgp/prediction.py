"""Co-kriging posterior prediction of the HF field, with gridded export."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg as sla

from .covariance import ModelParams, assemble_joint, jittered_cholesky
from .data import FidelityDataset
from .kernels import point_array, separable_gram

__all__ = ["Prediction", "GridSummary", "predict_hf", "krige_grid"]

_VAR_CLAMP_TOL = -1e-8


@dataclass
class Prediction:
    """Posterior mean and variance of the latent HF field at query points."""

    mean: np.ndarray
    variance: np.ndarray
    points: np.ndarray
    n_clamped: int = 0


@dataclass
class GridSummary:
    """Per-cell temporal mean and standard deviation over the supplied times."""

    lon: np.ndarray
    lat: np.ndarray
    times: np.ndarray
    mean: np.ndarray      # (n_lat, n_lon, n_times)
    sd: np.ndarray        # (n_lat, n_lon, n_times) predictive sd
    temporal_mean: np.ndarray  # (n_lat, n_lon)
    temporal_sd: np.ndarray    # (n_lat, n_lon) sd of the mean field across times

    def to_frame(self) -> pd.DataFrame:
        """Row-major long format with columns (lon, lat, t, mean, sd)."""
        n_lat, n_lon, n_t = self.mean.shape
        lon = np.tile(np.repeat(self.lon, n_t), n_lat)
        lat = np.repeat(self.lat, n_lon * n_t)
        t = np.tile(self.times, n_lat * n_lon)
        return pd.DataFrame(
            {
                "lon": lon,
                "lat": lat,
                "t": t,
                "mean": self.mean.reshape(-1),
                "sd": self.sd.reshape(-1),
            }
        )


def predict_hf(
    dataset: FidelityDataset,
    theta: ModelParams,
    query,
    eps0: float = 1e-8,
    chunk: int = 4096,
) -> Prediction:
    """Gaussian conditioning of the joint two-fidelity model at query points.

    The prior variance of the latent HF field is rho^2 sigma_L^2 +
    sigma_delta^2; the predictive variance never exceeds it and is clamped
    at zero when round-off drives it slightly negative.
    """
    q = point_array(query)
    blocks = assemble_joint(dataset, theta, eps0=eps0, with_b=False)
    L, _ = jittered_cholesky(blocks.Sigma, eps0)
    y = np.concatenate([dataset.lf_values, dataset.hf_values])
    alpha = sla.cho_solve((L, True), y, check_finite=False)

    rho = theta.rho
    prior_var = rho**2 * theta.kernel_L.signal_variance + theta.kernel_delta.signal_variance

    n_q = q.shape[0]
    mean = np.empty(n_q)
    var = np.empty(n_q)
    n_clamped = 0
    for lo in range(0, n_q, chunk):
        hi = min(lo + chunk, n_q)
        qc = q[lo:hi]
        k_lf = rho * separable_gram(qc, dataset.lf_points, theta.kernel_L)
        k_hf = rho**2 * separable_gram(qc, dataset.hf_points, theta.kernel_L) + separable_gram(
            qc, dataset.hf_points, theta.kernel_delta
        )
        k_star = np.hstack([k_lf, k_hf])
        mean[lo:hi] = k_star @ alpha
        v = sla.solve_triangular(L, k_star.T, lower=True, check_finite=False)
        var[lo:hi] = prior_var - np.einsum("ij,ij->j", v, v)

    neg = var < 0.0
    if np.any(neg):
        worst = float(var[neg].min())
        if worst < _VAR_CLAMP_TOL * max(prior_var, 1.0):
            warnings.warn(
                f"clamped {int(neg.sum())} negative predictive variances (min {worst:.3e})",
                RuntimeWarning,
                stacklevel=2,
            )
        n_clamped = int(neg.sum())
        var = np.where(neg, 0.0, var)
    return Prediction(mean=mean, variance=var, points=q, n_clamped=n_clamped)


def krige_grid(
    dataset: FidelityDataset,
    theta: ModelParams,
    bbox: Sequence[float],
    resolution: Sequence[int],
    times: Sequence[float],
    eps0: float = 1e-8,
) -> GridSummary:
    """Predict the HF field on a lon/lat grid of cell centres at the given times."""
    lon_min, lon_max, lat_min, lat_max = map(float, bbox)
    n_lon, n_lat = int(resolution[0]), int(resolution[1])
    times = np.asarray(list(times), dtype=float)
    if times.size == 0:
        raise ValueError("krige_grid needs at least one time")
    if n_lon < 1 or n_lat < 1:
        raise ValueError("grid resolution must be at least 1x1")

    dlon = (lon_max - lon_min) / n_lon
    dlat = (lat_max - lat_min) / n_lat
    lon = lon_min + dlon * (np.arange(n_lon) + 0.5) if n_lon > 1 else np.array([(lon_min + lon_max) / 2.0])
    lat = lat_min + dlat * (np.arange(n_lat) + 0.5) if n_lat > 1 else np.array([(lat_min + lat_max) / 2.0])

    # row-major: lat outermost, then lon, then time
    pts = np.empty((n_lat * n_lon * times.size, 3))
    pts[:, 0] = np.tile(np.repeat(lon, times.size), n_lat)
    pts[:, 1] = np.repeat(lat, n_lon * times.size)
    pts[:, 2] = np.tile(times, n_lat * n_lon)

    pred = predict_hf(dataset, theta, pts, eps0=eps0)
    mean = pred.mean.reshape(n_lat, n_lon, times.size)
    sd = np.sqrt(pred.variance).reshape(n_lat, n_lon, times.size)
    return GridSummary(
        lon=lon,
        lat=lat,
        times=times,
        mean=mean,
        sd=sd,
        temporal_mean=mean.mean(axis=2),
        temporal_sd=mean.std(axis=2, ddof=0),
    )
