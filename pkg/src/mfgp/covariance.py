"""Joint two-fidelity covariance assembly, conditional operators, whitening."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.linalg as sla

from .data import FidelityDataset
from .kernels import KernelParams, gram_from_sq_dists

__all__ = [
    "CovarianceError",
    "ModelParams",
    "CovarianceBlocks",
    "WhiteningMode",
    "WhiteningOperator",
    "jittered_cholesky",
    "assemble_joint",
    "whitening_root",
]

#: jitter escalation: {0, eps0, 10*eps0, ..., 1e6*eps0}
JITTER_LADDER_STEPS = 7


class CovarianceError(RuntimeError):
    """Covariance assembly or factorisation failure."""


@dataclass(frozen=True)
class ModelParams:
    """Full parameter set: coupling rho, LF kernel, discrepancy kernel, noise variances."""

    rho: float
    kernel_L: KernelParams
    kernel_delta: KernelParams
    tau_L_sq: float
    tau_H_sq: float

    def __post_init__(self):
        if not np.isfinite(self.rho):
            raise ValueError("rho must be finite")
        for name, tau in (("tau_L_sq", self.tau_L_sq), ("tau_H_sq", self.tau_H_sq)):
            if not (np.isfinite(tau) and tau >= 0.0):
                raise ValueError(f"{name} must be nonnegative and finite, got {tau}")


@dataclass
class CovarianceBlocks:
    """Assembled covariance blocks for one dataset at one parameter point.

    ``Sigma`` stacks both fidelities; ``B`` maps LF residuals to the HF
    conditional mean scale (before multiplying by rho) and ``Omega`` is the
    HF conditional covariance K_delta + tau_H^2 I.
    """

    K_LL: np.ndarray
    K_delta: np.ndarray
    K_LL_HH: np.ndarray
    K_LH: np.ndarray
    Sigma: np.ndarray
    Sigma_LL: np.ndarray
    Sigma_HH: np.ndarray
    Omega: np.ndarray
    chol_Sigma_LL: Optional[np.ndarray]
    jitter_LL: float
    B: Optional[np.ndarray]

    @property
    def n_lf(self) -> int:
        return self.K_LL.shape[0]

    @property
    def n_hf(self) -> int:
        return self.K_delta.shape[0]


@dataclass(frozen=True)
class WhiteningMode:
    """Whitening flavour: exact (full), elementwise (diagonal), or regularized."""

    variant: str = "diagonal"
    lam: Optional[float] = None

    def __post_init__(self):
        if self.variant not in ("diagonal", "full", "regularized"):
            raise ValueError(f"unknown whitening variant {self.variant!r}")
        if self.variant == "regularized":
            if self.lam is None or not (np.isfinite(self.lam) and self.lam >= 0.0):
                raise ValueError("regularized whitening requires a nonnegative lambda")
        elif self.lam is not None:
            raise ValueError("lambda is only meaningful for the regularized variant")


@dataclass
class WhiteningOperator:
    """Root T of a precision matrix, with T^T T = M^{-1} for the full variant.

    ``log_norm`` is -sum(log diag(T)), i.e. half the log-determinant of the
    covariance implied by the variant (exact for full/regularized, the
    product of marginal variances for diagonal).
    """

    T: np.ndarray
    mode: WhiteningMode
    log_norm: float

    def apply(self, v: np.ndarray) -> np.ndarray:
        if self.mode.variant == "diagonal":
            return np.diag(self.T) * v
        return self.T @ v

    @property
    def operator_norm(self) -> float:
        if self.mode.variant == "diagonal":
            return float(np.max(np.diag(self.T)))
        return float(np.linalg.norm(self.T, 2))


def jittered_cholesky(M: np.ndarray, eps0: float = 1e-8):
    """Lower Cholesky factor of M + eps*I for the smallest workable eps.

    eps runs over {0, eps0, 10*eps0, ..., 1e6*eps0}; returns (L, eps) or
    raises CovarianceError if the largest rung still fails.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise CovarianceError("matrix contains non-finite entries")
    n = M.shape[0]
    try:
        return sla.cholesky(M, lower=True, check_finite=False), 0.0
    except np.linalg.LinAlgError:
        pass
    diag = np.diag_indices(n)
    eps = 0.0
    for step in range(JITTER_LADDER_STEPS):
        eps = eps0 * 10.0**step
        jittered = M.copy()
        jittered[diag] += eps
        try:
            return sla.cholesky(jittered, lower=True, check_finite=False), eps
        except np.linalg.LinAlgError:
            pass
    raise CovarianceError(f"Cholesky failed for a {n}x{n} matrix even with jitter {eps:g}")


def assemble_joint(
    dataset: FidelityDataset,
    theta: ModelParams,
    eps0: float = 1e-8,
    with_b: bool = True,
) -> CovarianceBlocks:
    """Build the stacked two-fidelity covariance and conditional operators.

    The joint matrix is
        [[K_LL + tau_L^2 I,          rho K_LH],
         [rho K_LH^T,  rho^2 K_LL(x_H,x_H) + K_delta + tau_H^2 I]],
    with the LF kernel evaluated between the LF and HF location sets for the
    cross block. ``with_b=False`` skips the Sigma_LL factorisation used for B
    (cheaper when only the joint matrix is needed).
    """
    if dataset.n_lf == 0 or dataset.n_hf == 0:
        raise ValueError("dataset must contain observations at both fidelities")
    rho = theta.rho
    d2 = dataset.sq_dists()
    K_LL = gram_from_sq_dists(d2["ll"], theta.kernel_L)
    K_LH = gram_from_sq_dists(d2["lh"], theta.kernel_L)
    K_LL_HH = gram_from_sq_dists(d2["hh"], theta.kernel_L)
    K_delta = gram_from_sq_dists(d2["hh"], theta.kernel_delta)

    Sigma_LL = K_LL + theta.tau_L_sq * np.eye(dataset.n_lf)
    Omega = K_delta + theta.tau_H_sq * np.eye(dataset.n_hf)
    Sigma_HH = rho**2 * K_LL_HH + Omega

    n_l, n_h = dataset.n_lf, dataset.n_hf
    Sigma = np.empty((n_l + n_h, n_l + n_h))
    Sigma[:n_l, :n_l] = Sigma_LL
    Sigma[:n_l, n_l:] = rho * K_LH
    Sigma[n_l:, :n_l] = Sigma[:n_l, n_l:].T
    Sigma[n_l:, n_l:] = Sigma_HH

    chol_LL = None
    jitter_LL = 0.0
    B = None
    if with_b:
        chol_LL, jitter_LL = jittered_cholesky(Sigma_LL, eps0)
        B = sla.cho_solve((chol_LL, True), K_LH, check_finite=False).T

    return CovarianceBlocks(
        K_LL=K_LL,
        K_delta=K_delta,
        K_LL_HH=K_LL_HH,
        K_LH=K_LH,
        Sigma=Sigma,
        Sigma_LL=Sigma_LL,
        Sigma_HH=Sigma_HH,
        Omega=Omega,
        chol_Sigma_LL=chol_LL,
        jitter_LL=jitter_LL,
        B=B,
    )


def whitening_root(
    target: Union[CovarianceBlocks, np.ndarray],
    mode: WhiteningMode = WhiteningMode("diagonal"),
    eps0: float = 1e-8,
) -> WhiteningOperator:
    """Root T of the precision of a covariance matrix.

    ``target`` is either the matrix itself or assembled blocks, in which case
    the HF marginal block Sigma_HH is whitened. Full mode returns T = L^{-1}
    from the Cholesky factor, so T^T T equals the inverse; diagonal mode
    standardises elementwise; regularized mode whitens (M + lambda I).
    """
    M = target.Sigma_HH if isinstance(target, CovarianceBlocks) else np.asarray(target, float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"whitening target must be square, got {M.shape}")

    if mode.variant == "diagonal":
        d = np.diag(M)
        if np.any(d <= 0.0):
            raise CovarianceError("diagonal whitening needs strictly positive variances")
        T = np.diag(1.0 / np.sqrt(d))
        return WhiteningOperator(T=T, mode=mode, log_norm=float(0.5 * np.sum(np.log(d))))

    M_eff = M if mode.variant == "full" else M + mode.lam * np.eye(M.shape[0])
    L, _ = jittered_cholesky(M_eff, eps0)
    T = sla.solve_triangular(L, np.eye(M.shape[0]), lower=True, check_finite=False)
    log_norm = float(np.sum(np.log(np.diag(L))))
    return WhiteningOperator(T=T, mode=mode, log_norm=log_norm)
