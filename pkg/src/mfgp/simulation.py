"""Separable spatiotemporal multi-fidelity data generator and contamination tools.

The default generator draws two latent Gaussian fields on a regular station
lattice times an equispaced time grid (time varying fastest within station),
forms the LF signal as latent-plus-noise and couples the HF signal to it
through a scalar autoregressive factor plus an independent discrepancy field.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from .covariance import ModelParams, jittered_cholesky
from .data import FidelityDataset
from .estimation import (
    EstimationError,
    HuberConfig,
    OptimizerOptions,
    fit,
    heuristic_init,
)
from .evaluation import mae as _mae
from .evaluation import relative_efficiency, rmse as _rmse
from .kernels import KernelParams, lengthscale_from_correlation, separable_gram
from .prediction import predict_hf

__all__ = [
    "DgpConfig",
    "ContaminationSpec",
    "SimulatedData",
    "dgp_model_params",
    "simulate_mf",
    "simulate_at_sites",
    "inject_outliers",
    "inject_level_shift",
    "apply_contamination",
    "station_split",
    "train_test_datasets",
    "McCell",
    "McReport",
    "run_mc_study",
]

# fixed offsets deriving the per-replication child seeds from base_seed + rep
_SPLIT_SEED_OFFSET = 3_333
_CONTAM_SEED_OFFSET = 7_777
_INIT_SEED_OFFSET = 11_111


@dataclass(frozen=True)
class DgpConfig:
    """Data-generating configuration for the lattice design.

    ``hf_from_noisy_lf`` couples the HF signal to the noisy LF signal
    (latent + LF noise); setting it False couples to the latent field only,
    which is exactly the fitted model family and is used by the estimator
    consistency oracles.
    """

    grid_side: int = 4
    n_times: int = 15
    sigma_L_sq: float = 2.0
    sigma_delta_sq: float = 0.8
    noise_L: float = 0.3
    noise_delta: float = 0.3
    rho: float = 0.6
    c_t: float = 0.8
    c_s_L: float = 0.8
    c_s_delta: float = 0.95
    jitter: float = 1e-8
    train_fraction: float = 0.5
    seed: int = 0
    hf_from_noisy_lf: bool = True

    def __post_init__(self):
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError("train_fraction must lie in (0, 1)")
        for name in ("sigma_L_sq", "sigma_delta_sq"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("c_t", "c_s_L", "c_s_delta"):
            c = getattr(self, name)
            if not (0.0 < c < 1.0):
                raise ValueError(f"{name} must lie in (0, 1)")


@dataclass(frozen=True)
class ContaminationSpec:
    """Perturbation description: sparse outliers or a block level shift."""

    kind: str
    magnitude: float = 0.0
    frequency: float = 0.0
    changepoint: Optional[float] = None
    stations: Optional[tuple] = None
    seed: Optional[int] = None
    mechanism: str = "additive_sign"

    def __post_init__(self):
        if self.kind not in ("outlier", "level_shift"):
            raise ValueError(f"unknown contamination kind {self.kind!r}")
        if self.magnitude < 0.0:
            raise ValueError("magnitude must be nonnegative")
        if not (0.0 <= self.frequency <= 1.0):
            raise ValueError("frequency must lie in [0, 1]")
        if self.mechanism not in ("additive_sign", "gaussian"):
            raise ValueError(f"unknown outlier mechanism {self.mechanism!r}")


@dataclass
class SimulatedData:
    """Generated dataset plus the latent fields the theory oracles need."""

    dataset: FidelityDataset
    latent_lf: np.ndarray
    latent_delta: np.ndarray
    noise_lf: np.ndarray
    noise_delta: np.ndarray
    station_coords: np.ndarray
    config: DgpConfig

    @property
    def lf_signal(self) -> np.ndarray:
        return self.latent_lf + self.noise_lf


def dgp_model_params(config: DgpConfig) -> ModelParams:
    """Model parameters matching the generator (length-scales from the
    nearest-neighbour correlation targets)."""
    dt = 1.0 / (config.n_times - 1)
    ls_sL = lengthscale_from_correlation(1.0, config.c_s_L)
    ls_sd = lengthscale_from_correlation(1.0, config.c_s_delta)
    ls_t = lengthscale_from_correlation(dt, config.c_t)
    return ModelParams(
        rho=config.rho,
        kernel_L=KernelParams(config.sigma_L_sq, ls_sL, ls_sL, ls_t),
        kernel_delta=KernelParams(config.sigma_delta_sq, ls_sd, ls_sd, ls_t),
        tau_L_sq=config.noise_L,
        tau_H_sq=config.noise_delta,
    )


def _lattice_points(config: DgpConfig):
    side = config.grid_side
    coords = np.array([(i, j) for i in range(1, side + 1) for j in range(1, side + 1)], float)
    times = np.linspace(0.0, 1.0, config.n_times)
    n_stat = coords.shape[0]
    pts = np.empty((n_stat * config.n_times, 3))
    station = np.repeat(np.arange(n_stat), config.n_times)
    pts[:, 0] = np.repeat(coords[:, 0], config.n_times)
    pts[:, 1] = np.repeat(coords[:, 1], config.n_times)
    pts[:, 2] = np.tile(times, n_stat)
    return coords, pts, station


def simulate_mf(config: DgpConfig) -> SimulatedData:
    """Draw one replication of the lattice design, both fidelities at all stations."""
    params = dgp_model_params(config)
    coords, pts, station = _lattice_points(config)
    n = pts.shape[0]
    rng = np.random.default_rng(config.seed)

    K_L = separable_gram(pts, pts, params.kernel_L)
    K_d = separable_gram(pts, pts, params.kernel_delta)
    L_L, _ = jittered_cholesky(K_L, config.jitter)
    L_d, _ = jittered_cholesky(K_d, config.jitter)

    d_L = L_L @ rng.standard_normal(n)
    d_d = L_d @ rng.standard_normal(n)
    eps_L = np.sqrt(config.noise_L) * rng.standard_normal(n)
    eps_d = np.sqrt(config.noise_delta) * rng.standard_normal(n)

    f_L = d_L + eps_L
    hf_base = f_L if config.hf_from_noisy_lf else d_L
    f_H = config.rho * hf_base + d_d + eps_d

    dataset = FidelityDataset(
        lf_points=pts,
        lf_values=f_L,
        hf_points=pts.copy(),
        hf_values=f_H,
        lf_station=station,
        hf_station=station.copy(),
    )
    return SimulatedData(
        dataset=dataset,
        latent_lf=d_L,
        latent_delta=d_d,
        noise_lf=eps_L,
        noise_delta=eps_d,
        station_coords=coords,
        config=config,
    )


def simulate_at_sites(
    lf_sites: np.ndarray,
    hf_sites: np.ndarray,
    times: np.ndarray,
    params: ModelParams,
    seed: Optional[int] = None,
    jitter: float = 1e-8,
) -> SimulatedData:
    """General-geometry draw from the fitted model family itself.

    Sites are (s1, s2) rows; every site gets the full time grid (time
    fastest). The HF signal couples to the latent LF field, so the joint
    distribution is exactly the one the estimators assume.
    """
    lf_sites = np.atleast_2d(np.asarray(lf_sites, float))
    hf_sites = np.atleast_2d(np.asarray(hf_sites, float))
    times = np.asarray(times, float).ravel()
    all_sites = np.vstack([lf_sites, hf_sites])
    n_sites, n_t = all_sites.shape[0], times.size

    pts = np.empty((n_sites * n_t, 3))
    pts[:, 0] = np.repeat(all_sites[:, 0], n_t)
    pts[:, 1] = np.repeat(all_sites[:, 1], n_t)
    pts[:, 2] = np.tile(times, n_sites)
    station = np.repeat(np.arange(n_sites), n_t)

    rng = np.random.default_rng(seed)
    K_L = separable_gram(pts, pts, params.kernel_L)
    L_L, _ = jittered_cholesky(K_L, jitter)
    d_L = L_L @ rng.standard_normal(pts.shape[0])

    lf_rows = station < lf_sites.shape[0]
    hf_rows = ~lf_rows
    n_hf_rows = int(hf_rows.sum())

    hf_pts = pts[hf_rows]
    K_d = separable_gram(hf_pts, hf_pts, params.kernel_delta)
    L_d, _ = jittered_cholesky(K_d, jitter)
    d_d_h = L_d @ rng.standard_normal(n_hf_rows)

    eps_L = np.sqrt(params.tau_L_sq) * rng.standard_normal(int(lf_rows.sum()))
    eps_d = np.sqrt(params.tau_H_sq) * rng.standard_normal(n_hf_rows)

    y_L = d_L[lf_rows] + eps_L
    y_H = params.rho * d_L[hf_rows] + d_d_h + eps_d

    dataset = FidelityDataset(
        lf_points=pts[lf_rows],
        lf_values=y_L,
        hf_points=hf_pts,
        hf_values=y_H,
        lf_station=station[lf_rows],
        hf_station=station[hf_rows],
    )
    noise_lf_full = np.zeros(pts.shape[0])
    noise_lf_full[lf_rows] = eps_L
    latent_delta_full = np.zeros(pts.shape[0])
    latent_delta_full[hf_rows] = d_d_h
    return SimulatedData(
        dataset=dataset,
        latent_lf=d_L,
        latent_delta=latent_delta_full,
        noise_lf=noise_lf_full,
        noise_delta=eps_d,
        station_coords=all_sites,
        config=None,
    )


# ---------------------------------------------------------------------------
# contamination
# ---------------------------------------------------------------------------

_BURST_MEAN_LENGTH = 4.0


def _burst_mask(station: np.ndarray, times: np.ndarray, eta: float, rng) -> np.ndarray:
    """Run-structured selection: faulty episodes of geometric mean length
    within each station's series, with marginal rate eta."""
    mask = np.zeros(station.size, dtype=bool)
    if eta <= 0.0:
        return mask
    length = _BURST_MEAN_LENGTH
    start_prob = min(eta / (length * max(1.0 - eta, 1e-9)), 1.0)
    for stn in np.unique(station):
        rows = np.where(station == stn)[0]
        rows = rows[np.argsort(times[rows], kind="stable")]
        t = 0
        while t < rows.size:
            if rng.random() < start_prob:
                run = 1 + rng.geometric(1.0 / length)
                mask[rows[t : t + run]] = True
                t += run
            else:
                t += 1
    return mask


def inject_outliers(
    dataset: FidelityDataset, m: float, eta: float, seed: Optional[int] = None, mechanism: str = "additive_sign"
):
    """Perturb LF values with marginal probability eta.

    Mechanisms: ``additive_sign`` selects rows independently and adds
    +-m*sd(lf_values) with equiprobable sign; ``gaussian`` adds
    N(0, (m*sd)^2) to independently selected rows; ``burst`` contaminates
    short consecutive stretches of each station's series (faulty-sensor
    episodes; geometric run lengths, one sign per run). Returns (dataset,
    mask); unselected rows are bit-identical to the input.
    """
    if m < 0.0:
        raise ValueError("magnitude must be nonnegative")
    if not (0.0 <= eta <= 1.0):
        raise ValueError("frequency must lie in [0, 1]")
    if mechanism not in ("additive_sign", "gaussian", "burst"):
        raise ValueError(f"unknown outlier mechanism {mechanism!r}")
    rng = np.random.default_rng(seed)
    values = dataset.lf_values.copy()
    scale = m * float(np.std(dataset.lf_values))
    if mechanism == "burst":
        mask = _burst_mask(dataset.lf_station, dataset.lf_times, eta, rng)
        if mask.any() and scale > 0.0:
            for stn in np.unique(dataset.lf_station[mask]):
                rows = mask & (dataset.lf_station == stn)
                # one sign per faulty episode is the typical failure mode;
                # station-level sign keeps the bookkeeping simple
                values[rows] += rng.choice([-1.0, 1.0]) * scale
        return dataset.with_lf_values(values), mask
    mask = rng.random(dataset.n_lf) < eta
    k = int(mask.sum())
    if k and scale > 0.0:
        if mechanism == "additive_sign":
            values[mask] += rng.choice([-1.0, 1.0], size=k) * scale
        else:
            values[mask] += rng.normal(0.0, scale, size=k)
    return dataset.with_lf_values(values), mask


def inject_level_shift(
    dataset: FidelityDataset,
    delta: float,
    tau: float,
    stations: Sequence[int],
    seed: Optional[int] = None,
):
    """Add delta to the LF rows with t > tau at the selected stations."""
    stations = np.asarray(list(stations), dtype=int)
    if stations.size == 0:
        raise ValueError("level shift requires a nonempty station set")
    mask = np.isin(dataset.lf_station, stations) & (dataset.lf_times > tau)
    values = dataset.lf_values.copy()
    values[mask] += delta
    return dataset.with_lf_values(values), mask


def apply_contamination(dataset: FidelityDataset, spec: ContaminationSpec):
    """Dispatch a ContaminationSpec onto a dataset; returns (dataset, mask)."""
    if spec.kind == "outlier":
        return inject_outliers(dataset, spec.magnitude, spec.frequency, spec.seed, spec.mechanism)
    stations = spec.stations if spec.stations is not None else tuple(np.unique(dataset.lf_station))
    if spec.changepoint is None:
        raise ValueError("level shift requires a changepoint")
    return inject_level_shift(dataset, spec.magnitude, spec.changepoint, stations, spec.seed)


# ---------------------------------------------------------------------------
# station split and train/test assembly
# ---------------------------------------------------------------------------

def station_split(dataset: FidelityDataset, fraction: float, seed: Optional[int] = None):
    """Whole-station train/test partition: |train| = floor(fraction * n_stations)."""
    if not (0.0 < fraction < 1.0):
        raise ValueError("fraction must lie in (0, 1)")
    ids = np.unique(np.concatenate([dataset.lf_station, dataset.hf_station]))
    n_train = int(np.floor(fraction * ids.size))
    if n_train == 0 or n_train == ids.size:
        raise ValueError(f"fraction {fraction} leaves an empty train or test set")
    rng = np.random.default_rng(seed)
    train = np.sort(rng.choice(ids, size=n_train, replace=False))
    test = np.setdiff1d(ids, train)
    return train, test


def train_test_datasets(dataset: FidelityDataset, train_ids, test_ids):
    """Training set keeps all LF rows plus HF rows at train stations; the
    held-out HF rows (points and truth) at test stations are returned for
    evaluation."""
    train_ids = np.asarray(train_ids, int)
    test_ids = np.asarray(test_ids, int)
    hf_train_mask = np.isin(dataset.hf_station, train_ids)
    hf_test_mask = np.isin(dataset.hf_station, test_ids)
    train = dataset.select(lf_mask=None, hf_mask=hf_train_mask)
    return train, dataset.hf_points[hf_test_mask], dataset.hf_values[hf_test_mask]


# ---------------------------------------------------------------------------
# Monte Carlo study
# ---------------------------------------------------------------------------

@dataclass
class McCell:
    m: float
    eta: float
    estimator: str
    n_ok: int
    n_failed: int
    mae_mean: float
    mae_se: float
    rmse_mean: float
    rmse_se: float
    rho_mean: float


@dataclass
class McReport:
    rows: list
    cells: list

    def cell(self, m: float, eta: float, estimator: str) -> McCell:
        for c in self.cells:
            if c.m == m and c.eta == eta and c.estimator == estimator:
                return c
        raise KeyError(f"no cell ({m}, {eta}, {estimator})")

    def eff_rel(self, m: float, eta: float) -> float:
        return relative_efficiency(
            self.cell(m, eta, "gaussian").rmse_mean, self.cell(m, eta, "huber").rmse_mean
        )

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame(self.rows)

    def cells_frame(self):
        import pandas as pd

        recs = []
        for c in self.cells:
            rec = vars(c).copy()
            if c.estimator == "huber":
                rec["eff_rel"] = self.eff_rel(c.m, c.eta)
            recs.append(rec)
        return pd.DataFrame(recs)


def _mc_replication(
    config: DgpConfig,
    m: float,
    eta: float,
    rep: int,
    base_seed: int,
    estimators: Sequence[str],
    huber_config: HuberConfig,
    opts: OptimizerOptions,
):
    seed = base_seed + rep
    sim = simulate_mf(replace(config, seed=seed))
    train_ids, test_ids = station_split(
        sim.dataset, sim.config.train_fraction, seed + _SPLIT_SEED_OFFSET
    )
    train, test_points, test_values = train_test_datasets(sim.dataset, train_ids, test_ids)
    contaminated, _ = inject_outliers(train, m, eta, seed + _CONTAM_SEED_OFFSET)
    init = heuristic_init(contaminated, seed + _INIT_SEED_OFFSET)

    rows = []
    for estimator in estimators:
        row = {"m": m, "eta": eta, "rep": rep, "estimator": estimator}
        try:
            result = fit(contaminated, init, loss=estimator if estimator == "gaussian" else "huber",
                         config=huber_config, opts=opts)
            pred = predict_hf(contaminated, result.theta_hat, test_points)
            row.update(
                mae=_mae(pred.mean, test_values),
                rmse=_rmse(pred.mean, test_values),
                rho_hat=result.theta_hat.rho,
                converged=result.converged,
                error="",
            )
        except (EstimationError, Exception) as exc:  # noqa: BLE001 - failures are data
            row.update(mae=np.nan, rmse=np.nan, rho_hat=np.nan, converged=False, error=repr(exc))
        rows.append(row)
    return rows


def run_mc_study(
    scenarios: Iterable[tuple],
    n_runs: int = 100,
    estimators: Sequence[str] = ("gaussian", "huber"),
    config: Optional[DgpConfig] = None,
    base_seed: int = 20_240,
    huber_config: Optional[HuberConfig] = None,
    opts: Optional[OptimizerOptions] = None,
    n_jobs: int = -1,
) -> McReport:
    """Contamination study over a grid of (magnitude, frequency) scenarios.

    Per replication: simulate, split stations, contaminate the training LF
    values, fit every estimator from one shared random initialisation, and
    score HF predictions at the held-out stations. Failed fits are excluded
    from the aggregates and counted.
    """
    config = config or DgpConfig(train_fraction=0.8)
    huber_config = huber_config or HuberConfig()
    opts = opts or OptimizerOptions(max_iter=150)
    scenarios = [(float(m), float(eta)) for m, eta in scenarios]

    tasks = [
        delayed(_mc_replication)(config, m, eta, rep, base_seed, estimators, huber_config, opts)
        for (m, eta) in scenarios
        for rep in range(n_runs)
    ]
    nested = Parallel(n_jobs=n_jobs)(tasks)
    rows = [row for batch in nested for row in batch]

    cells = []
    for m, eta in scenarios:
        for estimator in estimators:
            sel = [
                r
                for r in rows
                if r["m"] == m and r["eta"] == eta and r["estimator"] == estimator
            ]
            ok = [r for r in sel if np.isfinite(r["rmse"])]
            if not ok:
                raise EstimationError(f"all replications failed in cell ({m}, {eta}, {estimator})")
            maes = np.array([r["mae"] for r in ok])
            rmses = np.array([r["rmse"] for r in ok])
            rhos = np.array([r["rho_hat"] for r in ok])
            n = len(ok)
            cells.append(
                McCell(
                    m=m,
                    eta=eta,
                    estimator=estimator,
                    n_ok=n,
                    n_failed=len(sel) - n,
                    mae_mean=float(maes.mean()),
                    mae_se=float(maes.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
                    rmse_mean=float(rmses.mean()),
                    rmse_se=float(rmses.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
                    rho_mean=float(rhos.mean()),
                )
            )
    return McReport(rows=rows, cells=cells)
