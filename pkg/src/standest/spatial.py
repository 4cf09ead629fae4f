"""Spatial correlation kernels, coregionalized cross-covariance assembly,
Gaussian conditionals (kriging), and effective-range solvers.

All distances and decay parameters are in kilometers / km^-1.  Multivariate
matrices are stored location-major: the latent vector stacks the m outcome
values of location 1, then location 2, and so on, so the (i, j) location pair
occupies an m x m block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist

from .errors import DomainError, NumericalError, ValidationError

LOG20 = math.log(20.0)

# escalating diagonal jitter, relative to mean(diag)
_JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


# ---------------------------------------------------------------------------
# kernels and covariance assembly
# ---------------------------------------------------------------------------

def exp_corr(d, phi: float):
    """Exponential correlation exp(-phi * d); equals 1 iff d == 0."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise DomainError("exp_corr: distance must be nonnegative")
    if not phi > 0:
        raise DomainError("exp_corr: decay must be positive")
    out = np.exp(-phi * d)
    return float(out) if out.ndim == 0 else out


def pairwise_distances(coords_a: np.ndarray, coords_b: np.ndarray | None = None) -> np.ndarray:
    coords_a = np.atleast_2d(np.asarray(coords_a, dtype=float))
    if coords_b is None:
        coords_b = coords_a
    else:
        coords_b = np.atleast_2d(np.asarray(coords_b, dtype=float))
    return cdist(coords_a, coords_b)


def build_corr_matrix(coords_km: np.ndarray, phi: float) -> np.ndarray:
    """n x n exponential correlation matrix with exact unit diagonal."""
    dist = pairwise_distances(coords_km)
    n = dist.shape[0]
    if n > 1:
        off = dist + np.diag(np.full(n, np.inf))
        if np.min(off) <= 0.0:
            raise ValidationError("build_corr_matrix: duplicate coordinates")
    return exp_corr(dist, phi)


@dataclass(frozen=True)
class LmcSpec:
    """Coregionalization: lower-triangular A (positive diagonal) and per-
    outcome decays.  AA^T is the within-location covariance of the m latent
    processes."""

    A: np.ndarray
    phis: np.ndarray

    def __post_init__(self) -> None:
        A = np.asarray(self.A, dtype=float)
        phis = np.asarray(self.phis, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValidationError("LmcSpec: A must be square")
        if not np.allclose(A, np.tril(A), atol=0.0):
            raise ValidationError("LmcSpec: A must be lower triangular")
        if np.any(np.diag(A) <= 0):
            raise ValidationError("LmcSpec: diag(A) must be strictly positive")
        if phis.shape != (A.shape[0],) or np.any(phis <= 0):
            raise ValidationError("LmcSpec: need one positive decay per outcome")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "phis", phis)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def cross_cov(self) -> np.ndarray:
        return self.A @ self.A.T


def build_lmc_cross(
    coords_a: np.ndarray, coords_b: np.ndarray, lmc: LmcSpec
) -> np.ndarray:
    """(na*m) x (nb*m) coregionalized cross-covariance, location-major.

    Block (i, j) equals sum_q exp(-phi_q d_ij) a_q a_q^T with a_q the q-th
    column of A.
    """
    dist = pairwise_distances(coords_a, coords_b)
    na, nb = dist.shape
    m = lmc.m
    corr = np.exp(-lmc.phis[:, None, None] * dist[None, :, :])
    outer = np.stack([np.outer(lmc.A[:, q], lmc.A[:, q]) for q in range(m)])
    out = np.empty((na * m, nb * m))
    for a in range(m):
        for b in range(m):
            out[a::m, b::m] = np.tensordot(outer[:, a, b], corr, axes=(0, 0))
    return out


def build_lmc_cov(coords_km: np.ndarray, lmc: LmcSpec) -> np.ndarray:
    """(n*m) x (n*m) coregionalized covariance; diagonal blocks are AA^T."""
    coords_km = np.atleast_2d(np.asarray(coords_km, dtype=float))
    n = coords_km.shape[0]
    if n > 1:
        dist = pairwise_distances(coords_km)
        off = dist + np.diag(np.full(n, np.inf))
        if np.min(off) <= 0.0:
            raise ValidationError("build_lmc_cov: duplicate coordinates")
    return build_lmc_cross(coords_km, coords_km, lmc)


# ---------------------------------------------------------------------------
# factorization helpers
# ---------------------------------------------------------------------------

def chol_with_jitter(cov: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating diagonal jitter up to 1e-6*mean(diag).

    Returns (L, jitter_used).  Raises NumericalError once the ladder is
    exhausted.
    """
    cov = np.asarray(cov, dtype=float)
    mean_diag = float(np.mean(np.diag(cov))) if cov.size else 0.0
    scale = mean_diag if mean_diag > 0 else 1.0
    eye = np.eye(cov.shape[0])
    for rel in _JITTER_LADDER:
        eps = rel * scale
        try:
            L = sla.cholesky(cov + eps * eye, lower=True, check_finite=False)
            return L, eps
        except sla.LinAlgError:
            continue
    raise NumericalError(
        f"Cholesky failed after jitter ladder (mean diag {mean_diag:.3e})"
    )


def gaussian_loglik(resid: np.ndarray, cov: np.ndarray) -> float:
    """log N(resid; 0, cov) via Cholesky (with the standard jitter ladder)."""
    resid = np.asarray(resid, dtype=float)
    L, _ = chol_with_jitter(cov)
    alpha = sla.solve_triangular(L, resid, lower=True, check_finite=False)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    k = resid.shape[0]
    return -0.5 * (k * math.log(2.0 * math.pi) + logdet + float(alpha @ alpha))


def sample_mvn(rng: np.random.Generator, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """One draw from N(mean, cov) tolerating PSD-singular covariance.

    Conditional covariances at (near-)interpolating configurations are
    legitimately rank deficient, so after the Cholesky jitter ladder fails we
    fall back to an eigendecomposition with small negative eigenvalues
    clipped to zero.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    cov = 0.5 * (cov + cov.T)
    z = rng.standard_normal(mean.shape[0])
    try:
        L, _ = chol_with_jitter(cov)
        return mean + L @ z
    except NumericalError:
        evals, evecs = np.linalg.eigh(cov)
        floor = -1e-8 * max(1.0, float(np.max(np.abs(evals))))
        if np.min(evals) < floor:
            raise NumericalError(
                f"covariance not PSD: min eigenvalue {np.min(evals):.3e}"
            )
        evals = np.clip(evals, 0.0, None)
        return mean + evecs @ (np.sqrt(evals) * z)


# ---------------------------------------------------------------------------
# Gaussian conditionals
# ---------------------------------------------------------------------------

def conditional_gaussian(
    cov_oo: np.ndarray,
    cov_po: np.ndarray,
    cov_pp: np.ndarray,
    w_obs: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the predicted block given the observed block.

    mean = cov_po cov_oo^-1 w_obs
    cov  = cov_pp - cov_po cov_oo^-1 cov_po^T   (symmetrized)
    """
    cov_oo = np.asarray(cov_oo, dtype=float)
    cov_po = np.atleast_2d(np.asarray(cov_po, dtype=float))
    cov_pp = np.asarray(cov_pp, dtype=float)
    w_obs = np.asarray(w_obs, dtype=float)
    L, _ = chol_with_jitter(cov_oo)
    # K^-1 [w_obs | cov_po^T] through two triangular solves
    rhs = np.concatenate([w_obs[:, None], cov_po.T], axis=1)
    half = sla.solve_triangular(L, rhs, lower=True, check_finite=False)
    solved = sla.solve_triangular(L.T, half, lower=False, check_finite=False)
    mean = cov_po @ solved[:, 0]
    cov = cov_pp - cov_po @ solved[:, 1:]
    cov = 0.5 * (cov + cov.T)
    return mean, cov


# ---------------------------------------------------------------------------
# effective ranges
# ---------------------------------------------------------------------------

def effective_range_uni(phi: float) -> float:
    """Distance at which exponential correlation falls to 0.05: ln(20)/phi."""
    if not phi > 0:
        raise DomainError("effective_range_uni: decay must be positive")
    return LOG20 / phi


def effective_range_mv(q: int, lmc: LmcSpec, tol: float = 1e-6) -> float:
    """Distance at which outcome q's marginal correlation falls to 0.05.

    Under coregionalization the marginal correlation of outcome q is the
    a_qj^2-weighted mixture of exponentials, so we bisect
    sum_j a_qj^2 exp(-phi_j d) = 0.05 sum_j a_qj^2.
    """
    if not 0 <= q < lmc.m:
        raise DomainError(f"effective_range_mv: outcome index {q} out of range")
    weights = lmc.A[q, :] ** 2
    total = float(np.sum(weights))

    def excess(d: float) -> float:
        return float(np.sum(weights * np.exp(-lmc.phis * d))) - 0.05 * total

    lo, hi = 0.0, 10.0 * float(np.max(LOG20 / lmc.phis))
    # excess(lo) = 0.95 * total > 0; excess(hi) < 0 by construction
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
