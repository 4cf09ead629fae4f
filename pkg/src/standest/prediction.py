"""Posterior predictive sampling at prediction units and area-weighted
stand-level aggregation.

Composition sampling: for every retained posterior draw t, the latent field
at a stand's units is drawn jointly from its exact Gaussian conditional given
that draw's latent values at the plots, then outcomes get the fixed effects
plus a fresh unstructured residual.  Draws are exponentiated back to the
original scale before stem density is derived and stands are aggregated.

Stand predictions use one RNG substream per (seed, label, stand, draw), so
results are independent of stand processing order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import scipy.linalg as sla

from .data import (
    Dataset,
    OutcomeTransform,
    PredictionUnit,
    derive_stem_density,
)
from .errors import ConfigError, DomainError, ValidationError
from .rng import substream
from .samplers import PosteriorSamples
from .spatial import LmcSpec, build_lmc_cross, chol_with_jitter, sample_mvn

PPD_OUTCOMES = ("GSV", "QMD", "BA", "N")
CV_GRID = np.arange(0.0, 100.5, 0.5)


@dataclass
class UnitPPD:
    """Posterior predictive draws for one unit, original scale, T x 4."""

    unit_id: str
    draws: np.ndarray
    columns: tuple[str, ...] = PPD_OUTCOMES


@dataclass
class StandPPD:
    """Area-weighted stand-level PPD draws (T x 4) and their summaries."""

    stand_id: str
    draws: np.ndarray
    columns: tuple[str, ...] = PPD_OUTCOMES

    def summary(self) -> pd.DataFrame:
        rows = []
        for j, name in enumerate(self.columns):
            col = self.draws[:, j]
            mean = float(np.mean(col))
            sd = float(np.std(col, ddof=1))
            q = np.quantile(col, [0.025, 0.5, 0.975])
            rows.append(
                {
                    "stand_id": self.stand_id,
                    "outcome": name,
                    "mean": mean,
                    "sd": sd,
                    "cv_pct": 100.0 * sd / mean,
                    "q2.5": q[0],
                    "q50": q[1],
                    "q97.5": q[2],
                }
            )
        return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# single-draw composition sampling
# ---------------------------------------------------------------------------

def _uni_cov_params(samples: PosteriorSamples, t: int):
    return float(samples.sigma2[t]), float(samples.tau2[t]), float(samples.phi[t])


def _lmc_at(samples: PosteriorSamples, t: int) -> LmcSpec:
    return LmcSpec(A=samples.a_mat[t], phis=np.atleast_1d(samples.phi[t]))


def _conditional_from_factor(L_oo, cov_po, cov_pp, w_obs):
    """Conditional mean/cov of targets given observations, reusing a factor
    of cov_oo (same math as spatial.conditional_gaussian)."""
    alpha = sla.solve_triangular(L_oo, w_obs, lower=True, check_finite=False)
    S = sla.solve_triangular(L_oo, cov_po.T, lower=True, check_finite=False)
    mean = S.T @ alpha
    cov = cov_pp - S.T @ S
    return mean, 0.5 * (cov + cov.T)


def sample_w_star(
    samples: PosteriorSamples,
    t: int,
    target_coords_km: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """One joint draw of the latent field at the targets under draw t.

    Returns an n_t vector (univariate) or a location-major n_t*m vector
    (multivariate).
    """
    if not samples.model_spec.is_spatial:
        raise ConfigError("sample_w_star requires a spatial family")
    target_coords_km = np.atleast_2d(np.asarray(target_coords_km, dtype=float))
    if target_coords_km.shape[0] == 0:
        raise DomainError("sample_w_star: empty target set")
    obs = np.asarray(samples.coords_km, dtype=float)
    w_obs = samples.w[t]
    if samples.model_spec.is_mv:
        lmc = _lmc_at(samples, t)
        cov_oo = build_lmc_cross(obs, obs, lmc)
        cov_po = build_lmc_cross(target_coords_km, obs, lmc)
        cov_pp = build_lmc_cross(target_coords_km, target_coords_km, lmc)
    else:
        sigma2, _, phi = _uni_cov_params(samples, t)
        d_oo = np.linalg.norm(obs[:, None, :] - obs[None, :, :], axis=-1)
        d_po = np.linalg.norm(
            target_coords_km[:, None, :] - obs[None, :, :], axis=-1
        )
        d_pp = np.linalg.norm(
            target_coords_km[:, None, :] - target_coords_km[None, :, :], axis=-1
        )
        cov_oo = sigma2 * np.exp(-phi * d_oo)
        cov_po = sigma2 * np.exp(-phi * d_po)
        cov_pp = sigma2 * np.exp(-phi * d_pp)
    L_oo, _ = chol_with_jitter(cov_oo)
    mean, cov = _conditional_from_factor(L_oo, cov_po, cov_pp, w_obs)
    return sample_mvn(rng, mean, cov)


def _design_for_targets(
    samples: PosteriorSamples, predictor_values: Mapping[str, np.ndarray], n_t: int
) -> np.ndarray:
    """Stacked design for targets: n_t x p (uni) or (n_t m) x p (mv)."""
    spec = samples.model_spec
    blocks = []
    for q in spec.outcomes:
        cols = [np.ones(n_t)]
        for name in spec.predictors[q]:
            if name not in predictor_values:
                raise ValidationError(f"missing predictor {name!r} for targets")
            cols.append(np.asarray(predictor_values[name], dtype=float))
        blocks.append(np.column_stack(cols))
    if not spec.is_mv:
        return blocks[0]
    m = spec.m
    p = sum(b.shape[1] for b in blocks)
    X = np.zeros((n_t * m, p))
    col = 0
    for j, b in enumerate(blocks):
        X[j::m, col : col + b.shape[1]] = b
        col += b.shape[1]
    return X


def sample_y_star(
    samples: PosteriorSamples,
    t: int,
    w_star: np.ndarray | None,
    predictor_values: Mapping[str, np.ndarray],
    n_targets: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Model-scale outcome draw: X* beta + w* + fresh unstructured residual.

    ``w_star`` must be None for non-spatial families.  Returns n_t (uni) or
    location-major n_t*m (mv).
    """
    spec = samples.model_spec
    X_star = _design_for_targets(samples, predictor_values, n_targets)
    mean = X_star @ samples.beta[t]
    if spec.is_spatial:
        if w_star is None:
            raise ConfigError("spatial family requires a latent draw")
        mean = mean + w_star
    elif w_star is not None:
        raise ConfigError("non-spatial family takes no latent draw")
    if spec.is_mv:
        L_psi = np.linalg.cholesky(samples.psi[t])
        eps = (rng.standard_normal((n_targets, spec.m)) @ L_psi.T).reshape(-1)
    else:
        eps = np.sqrt(samples.tau2[t]) * rng.standard_normal(n_targets)
    return mean + eps


def back_transform(
    draws: np.ndarray, transform: OutcomeTransform, outcome: str
) -> np.ndarray:
    """Invert the outcome transform draw-by-draw (no bias correction)."""
    return transform.invert(outcome, draws)


def derive_n_ppd(ba_draws: np.ndarray, qmd_draws: np.ndarray) -> np.ndarray:
    """Elementwise stem density from BA and QMD draws."""
    ba_draws = np.asarray(ba_draws, dtype=float)
    qmd_draws = np.asarray(qmd_draws, dtype=float)
    if ba_draws.shape != qmd_draws.shape:
        raise DomainError("derive_n_ppd: draw shapes differ")
    return derive_stem_density(ba_draws, qmd_draws)


# ---------------------------------------------------------------------------
# batched prediction over stands
# ---------------------------------------------------------------------------

def _group_units_by_stand(
    units: Sequence[PredictionUnit], cap: int
) -> list[tuple[str, np.ndarray]]:
    """(stand_id, unit index block) pairs in first-appearance order; stands
    larger than the cap split into consecutive blocks with a warning."""
    by_stand: dict[str, list[int]] = {}
    for i, u in enumerate(units):
        by_stand.setdefault(u.stand_id, []).append(i)
    blocks = []
    for stand_id, idx in by_stand.items():
        if len(idx) > cap:
            warnings.warn(
                f"stand {stand_id} has {len(idx)} units; splitting into blocks "
                f"of {cap} (within-stand covariance across blocks is dropped)",
                stacklevel=2,
            )
        for start in range(0, len(idx), cap):
            blocks.append((stand_id, np.asarray(idx[start : start + cap])))
    return blocks


def predict_unit_draws(
    samples: PosteriorSamples,
    units: Sequence[PredictionUnit],
    seed: int,
    label: str,
    stand_cap: int = 4000,
) -> np.ndarray:
    """Model-scale PPD draws at every unit: (T, n_units) for univariate fits,
    (T, n_units, m) for multivariate fits.

    Spatial families draw the latent field jointly across all units of a
    stand per retained draw; the observed-site covariance is factored once
    per draw and shared across stands.
    """
    spec = samples.model_spec
    n_units = len(units)
    if n_units == 0:
        raise DomainError("predict_unit_draws: no units")
    T = samples.n_draws
    m = spec.m
    blocks = _group_units_by_stand(units, stand_cap)
    coords = np.array([u.coords for u in units], dtype=float) / 1000.0
    pred_names = sorted({name for u in units for name in u.predictors})
    pred_values = {
        name: np.array([u.predictors.get(name, np.nan) for u in units])
        for name in pred_names
    }

    out = np.empty((T, n_units, m))
    obs = np.asarray(samples.coords_km, dtype=float) if spec.is_spatial else None
    for t in range(T):
        if spec.is_spatial:
            if spec.is_mv:
                lmc = _lmc_at(samples, t)
                cov_oo = build_lmc_cross(obs, obs, lmc)
            else:
                sigma2, _, phi = _uni_cov_params(samples, t)
                d_oo = np.linalg.norm(obs[:, None, :] - obs[None, :, :], axis=-1)
                cov_oo = sigma2 * np.exp(-phi * d_oo)
            L_oo, _ = chol_with_jitter(cov_oo)
            alpha = sla.solve_triangular(
                L_oo, samples.w[t], lower=True, check_finite=False
            )
        for stand_id, idx in blocks:
            rng = substream(seed, "predict", label, stand_id, t)
            tc = coords[idx]
            n_t = idx.shape[0]
            w_star = None
            if spec.is_spatial:
                if spec.is_mv:
                    cov_po = build_lmc_cross(tc, obs, lmc)
                    cov_pp = build_lmc_cross(tc, tc, lmc)
                else:
                    d_po = np.linalg.norm(tc[:, None, :] - obs[None, :, :], axis=-1)
                    d_pp = np.linalg.norm(tc[:, None, :] - tc[None, :, :], axis=-1)
                    cov_po = sigma2 * np.exp(-phi * d_po)
                    cov_pp = sigma2 * np.exp(-phi * d_pp)
                S = sla.solve_triangular(
                    L_oo, cov_po.T, lower=True, check_finite=False
                )
                mean = S.T @ alpha
                cov = cov_pp - S.T @ S
                w_star = sample_mvn(rng, mean, 0.5 * (cov + cov.T))
            block_preds = {k: v[idx] for k, v in pred_values.items()}
            y_star = sample_y_star(samples, t, w_star, block_preds, n_t, rng)
            out[t, idx, :] = y_star.reshape(n_t, m)
    return out[:, :, 0] if m == 1 else out


def predict_original_scale(
    fits: PosteriorSamples | Mapping[str, PosteriorSamples],
    units: Sequence[PredictionUnit],
    transform: OutcomeTransform,
    seed: int,
    stand_cap: int = 4000,
) -> np.ndarray:
    """(T, n_units, 4) PPD draws on the original scale, columns
    (GSV, QMD, BA, N), N derived per unit from the BA and QMD draws.

    ``fits`` is one multivariate PosteriorSamples covering (GSV, QMD, BA) or
    a mapping of per-outcome univariate fits with a common schedule.
    """
    model_scale: dict[str, np.ndarray] = {}
    if isinstance(fits, PosteriorSamples):
        draws = predict_unit_draws(fits, units, seed, "mv", stand_cap)
        for j, q in enumerate(fits.outcomes):
            model_scale[q] = draws[:, :, j]
    else:
        for q, fit in fits.items():
            if fit.outcomes != (q,):
                raise ConfigError(f"fit registered for {q} covers {fit.outcomes}")
            model_scale[q] = predict_unit_draws(fit, units, seed, q, stand_cap)
    missing = [q for q in ("GSV", "QMD", "BA") if q not in model_scale]
    if missing:
        raise ConfigError(f"missing fits for outcome(s) {', '.join(missing)}")
    original = {
        q: back_transform(model_scale[q], transform, q) for q in ("GSV", "QMD", "BA")
    }
    n_draws = derive_n_ppd(original["BA"], original["QMD"])
    return np.stack(
        [original["GSV"], original["QMD"], original["BA"], n_draws], axis=2
    )


# ---------------------------------------------------------------------------
# stand aggregation and summaries
# ---------------------------------------------------------------------------

def aggregate_stand(
    unit_draws: np.ndarray, areas: Sequence[float], stand_id: str = ""
) -> StandPPD:
    """Area-weighted mean of unit draws, per posterior draw.

    ``unit_draws`` is (T, n_units, k); weights are area / total area.
    """
    unit_draws = np.asarray(unit_draws, dtype=float)
    areas = np.asarray(areas, dtype=float)
    if unit_draws.ndim != 3 or unit_draws.shape[1] == 0:
        raise DomainError("aggregate_stand: need a (T, n_units, k) array")
    if areas.shape[0] != unit_draws.shape[1] or np.any(areas <= 0):
        raise DomainError("aggregate_stand: need one positive area per unit")
    weights = areas / np.sum(areas)
    draws = np.einsum("tuk,u->tk", unit_draws, weights)
    return StandPPD(stand_id=stand_id, draws=draws)


def predict_stands(
    fits: PosteriorSamples | Mapping[str, PosteriorSamples],
    units: Sequence[PredictionUnit],
    transform: OutcomeTransform,
    seed: int,
    stand_cap: int = 4000,
    n_aggregation: str = "unit",
) -> tuple[list[StandPPD], np.ndarray]:
    """Stand-level PPDs for every stand present in ``units``.

    ``n_aggregation`` controls where stem density is derived: ``unit``
    applies the BA/QMD identity to unit-level draws before aggregation
    (default); ``stand`` applies it to the aggregated stand-level BA and QMD
    draws instead.  Also returns the (T, n_units, 4) unit-level draws.
    """
    if n_aggregation not in ("unit", "stand"):
        raise ConfigError(f"unknown n_aggregation mode {n_aggregation!r}")
    unit_draws = predict_original_scale(fits, units, transform, seed, stand_cap)
    order: dict[str, list[int]] = {}
    for i, u in enumerate(units):
        order.setdefault(u.stand_id, []).append(i)
    stands = []
    for stand_id, idx in order.items():
        areas = [units[i].area for i in idx]
        ppd = aggregate_stand(unit_draws[:, idx, :], areas, stand_id=stand_id)
        if n_aggregation == "stand":
            ppd.draws[:, 3] = derive_n_ppd(ppd.draws[:, 2], ppd.draws[:, 1])
        stands.append(ppd)
    return stands, unit_draws


def summarize_stands(
    stand_ppds: Sequence[StandPPD],
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Per-stand summary table plus the ECDF of CV%% on a fixed 0-100 grid."""
    if len(stand_ppds) == 0:
        raise DomainError("summarize_stands: no stands")
    table = pd.concat([s.summary() for s in stand_ppds], ignore_index=True)
    ecdf = {"cv_pct": CV_GRID}
    for name in stand_ppds[0].columns:
        cvs = table.loc[table["outcome"] == name, "cv_pct"].to_numpy()
        ecdf[name] = np.mean(cvs[None, :] <= CV_GRID[:, None], axis=1)
    return table, pd.DataFrame(ecdf)
