"""Spatially blocked cross-validation and candidate-model scoring.

Plots are grouped into pointy-top hexagonal blocks, blocks are dealt into k
folds balancing plot counts, and every candidate model is refit with each
fold held out.  Held-out plots are predicted jointly per fold (the fold plays
the role of a stand, with equal per-plot weights) and scored at both the
aggregated fold level and the individual plot level, on the original outcome
scale including derived stem density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .data import (
    Dataset,
    OutcomeTransform,
    PredictionUnit,
    derive_stem_density,
    transform_outcomes,
)
from .errors import ConfigError, DomainError, ValidationError
from .prediction import PPD_OUTCOMES, aggregate_stand, predict_original_scale
from .rng import seed_sequence, substream
from .samplers import (
    McmcSchedule,
    ModelSpec,
    PosteriorSamples,
    default_priors,
    fit_model,
    stacked_mv_design,
    design_matrix,
)

SQRT3 = math.sqrt(3.0)

_AXIAL_NEIGHBORS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))


# ---------------------------------------------------------------------------
# hexagonal blocking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HexBlocking:
    """Plot -> hexagonal block assignment on a pointy-top axial grid."""

    cell_size: float          # flat-to-flat width, meters
    origin: tuple[float, float]
    assignment: Mapping[str, str]
    axial: Mapping[str, tuple[int, int]]  # block_id -> (q, r)

    def blocks(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for plot_id, block_id in self.assignment.items():
            out.setdefault(block_id, []).append(plot_id)
        return out

    @property
    def inradius(self) -> float:
        return self.cell_size / 2.0


def _hex_center(q: int, r: int, radius: float) -> tuple[float, float]:
    return radius * SQRT3 * (q + r / 2.0), radius * 1.5 * r


def _axial_round(qf: float, rf: float) -> tuple[int, int]:
    xf, zf = qf, rf
    yf = -xf - zf
    x, y, z = round(xf), round(yf), round(zf)
    dx, dy, dz = abs(x - xf), abs(y - yf), abs(z - zf)
    if dx > dy and dx > dz:
        x = -y - z
    elif dy > dz:
        y = -x - z
    else:
        z = -x - y
    return int(x), int(z)


def assign_hex_blocks(
    plots: Sequence, cell_size: float, origin: tuple[float, float] | None = None
) -> HexBlocking:
    """Assign each plot to the nearest hex center.

    ``cell_size`` is the flat-to-flat hex width in meters.  Equidistant
    boundary points go to the candidate with the smaller (q, r) axial index,
    which is also the lexicographically smaller block id.
    """
    if not cell_size > 0:
        raise DomainError("assign_hex_blocks: cell_size must be positive")
    coords = np.array([p.coords for p in plots], dtype=float)
    if origin is None:
        origin = (float(np.min(coords[:, 0])), float(np.min(coords[:, 1])))
    radius = cell_size / SQRT3  # circumradius of a pointy-top hex
    tol = 1e-9 * cell_size

    assignment: dict[str, str] = {}
    axial: dict[str, tuple[int, int]] = {}
    for p in plots:
        x = p.coords[0] - origin[0]
        y = p.coords[1] - origin[1]
        qf = (SQRT3 / 3.0 * x - y / 3.0) / radius
        rf = (2.0 / 3.0 * y) / radius
        q0, r0 = _axial_round(qf, rf)
        best = None
        for dq, dr in ((0, 0),) + _AXIAL_NEIGHBORS:
            cand = (q0 + dq, r0 + dr)
            cx, cy = _hex_center(cand[0], cand[1], radius)
            d = math.hypot(x - cx, y - cy)
            if best is None or d < best[0] - tol or (
                abs(d - best[0]) <= tol and cand < best[1]
            ):
                best = (d, cand)
        q, r = best[1]
        block_id = f"h{q}_{r}"
        assignment[p.plot_id] = block_id
        axial[block_id] = (q, r)
    return HexBlocking(
        cell_size=cell_size, origin=tuple(origin), assignment=assignment, axial=axial
    )


@dataclass(frozen=True)
class FoldAssignment:
    """Blocks dealt into 1..k folds."""

    k: int
    block_fold: Mapping[str, int]
    blocking: HexBlocking

    def plot_fold(self) -> dict[str, int]:
        return {
            plot_id: self.block_fold[block_id]
            for plot_id, block_id in self.blocking.assignment.items()
        }

    def fold_plots(self, fold: int) -> list[str]:
        return [p for p, f in self.plot_fold().items() if f == fold]


def make_folds(blocking: HexBlocking, k: int, seed: int) -> FoldAssignment:
    """Deal blocks into k folds: seeded shuffle, then largest-block-first into
    the currently smallest fold, which keeps plot counts near n/k."""
    blocks = blocking.blocks()
    if len(blocks) < k:
        raise ConfigError(
            f"only {len(blocks)} non-empty blocks for {k} folds"
        )
    rng = substream(seed, "folds")
    ids = sorted(blocks)
    order = [ids[i] for i in rng.permutation(len(ids))]
    order.sort(key=lambda b: -len(blocks[b]))  # stable: shuffle breaks ties
    counts = [0] * k
    block_fold: dict[str, int] = {}
    for block_id in order:
        fold = int(np.argmin(counts))
        block_fold[block_id] = fold + 1
        counts[fold] += len(blocks[block_id])
    return FoldAssignment(k=k, block_fold=block_fold, blocking=blocking)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def cv_metrics(observed: np.ndarray, ppd_draws: np.ndarray, level: str) -> dict:
    """Bias/RMSPE (absolute and as % of the observed mean), 95% interval
    coverage and width, from held-out observations and their PPD draws."""
    observed = np.asarray(observed, dtype=float)
    ppd_draws = np.asarray(ppd_draws, dtype=float)
    if observed.ndim != 1 or ppd_draws.shape[1] != observed.shape[0]:
        raise DomainError("cv_metrics: need (T, n) draws for n observations")
    point = np.mean(ppd_draws, axis=0)
    err = point - observed
    obs_mean = float(np.mean(observed))
    lo = np.quantile(ppd_draws, 0.025, axis=0)
    hi = np.quantile(ppd_draws, 0.975, axis=0)
    bias = float(np.mean(err))
    rmspe = float(np.sqrt(np.mean(err**2)))
    return {
        "level": level,
        "bias": bias,
        "bias_pct": 100.0 * bias / obs_mean,
        "rmspe": rmspe,
        "rmspe_pct": 100.0 * rmspe / obs_mean,
        "coverage95_pct": 100.0 * float(np.mean((observed >= lo) & (observed <= hi))),
        "ci_width95": float(np.mean(hi - lo)),
    }


def bayesian_r2(samples: PosteriorSamples, dataset: Dataset) -> dict[str, np.ndarray]:
    """Per-draw explained-variance ratio for each fitted outcome.

    Fitted values include the recovered latent field for spatial families;
    the residual variance is the draw's nugget (tau2 or the matching Psi
    diagonal entry).
    """
    spec = samples.model_spec
    out: dict[str, np.ndarray] = {}
    if spec.is_mv:
        X, _ = stacked_mv_design(dataset, spec)
        fitted = samples.beta @ X.T  # T x (n m)
        if spec.is_spatial:
            fitted = fitted + samples.w
        m = spec.m
        for j, q in enumerate(spec.outcomes):
            fq = fitted[:, j::m]
            v_fit = np.var(fq, axis=1, ddof=1)
            v_res = samples.psi[:, j, j]
            out[q] = v_fit / (v_fit + v_res)
    else:
        q = spec.outcomes[0]
        X, _ = design_matrix(dataset, q, spec.predictors[q])
        fitted = samples.beta @ X.T
        if spec.is_spatial:
            fitted = fitted + samples.w
        v_fit = np.var(fitted, axis=1, ddof=1)
        out[q] = v_fit / (v_fit + samples.tau2)
    return out


@dataclass
class CorrPPD:
    """PPD of the among-outcome correlation matrix from held-out predictions."""

    outcomes: tuple[str, ...]
    draws: np.ndarray            # T x 4 x 4
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    empirical: np.ndarray
    contained: np.ndarray        # bool, per entry

    def pair_table(self, model: str = "", variant: str = "") -> pd.DataFrame:
        rows = []
        k = len(self.outcomes)
        for i in range(k):
            for j in range(i):
                rows.append(
                    {
                        "model": model,
                        "variant": variant,
                        "pair": f"{self.outcomes[i]}-{self.outcomes[j]}",
                        "post_mean": self.mean[i, j],
                        "q2.5": self.lo[i, j],
                        "q97.5": self.hi[i, j],
                        "empirical": self.empirical[i, j],
                        "contained": bool(self.contained[i, j]),
                    }
                )
        return pd.DataFrame(rows)


def correlation_ppd(
    ppd_draws: np.ndarray,
    empirical: np.ndarray,
    outcomes: tuple[str, ...] = PPD_OUTCOMES,
) -> CorrPPD:
    """Among-outcome correlation distribution from (T, n_locs, k) draws.

    Each retained draw contributes one Pearson correlation matrix computed
    across the held-out locations; containment flags whether the empirical
    correlation lies inside the central 95% interval.
    """
    ppd_draws = np.asarray(ppd_draws, dtype=float)
    if ppd_draws.ndim != 3 or ppd_draws.shape[1] < 3:
        raise DomainError("correlation_ppd: need draws at >= 3 locations")
    T, _, k = ppd_draws.shape
    draws = np.empty((T, k, k))
    for t in range(T):
        draws[t] = np.corrcoef(ppd_draws[t], rowvar=False)
    mean = draws.mean(axis=0)
    lo = np.quantile(draws, 0.025, axis=0)
    hi = np.quantile(draws, 0.975, axis=0)
    empirical = np.asarray(empirical, dtype=float)
    contained = (empirical >= lo) & (empirical <= hi)
    return CorrPPD(
        outcomes=outcomes,
        draws=draws,
        mean=mean,
        lo=lo,
        hi=hi,
        empirical=empirical,
        contained=contained,
    )


def empirical_correlations(dataset: Dataset) -> np.ndarray:
    """Observed 4x4 correlation matrix (GSV, QMD, BA, N); N derived from the
    observed BA and QMD when not measured."""
    cols = []
    for name in PPD_OUTCOMES:
        if all(name in p.outcomes for p in dataset.plots):
            cols.append(np.array([p.outcomes[name] for p in dataset.plots]))
        elif name == "N":
            ba = np.array([p.outcomes["BA"] for p in dataset.plots])
            qmd = np.array([p.outcomes["QMD"] for p in dataset.plots])
            cols.append(derive_stem_density(ba, qmd))
        else:
            raise ValidationError(f"dataset lacks outcome {name}")
    return np.corrcoef(np.column_stack(cols), rowvar=False)


# ---------------------------------------------------------------------------
# cross-validation driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CandidateModel:
    """One roster entry: family plus the per-outcome predictor lists."""

    family: str
    variant: str                       # "intercept_only" | "all_predictors"
    predictors: Mapping[str, tuple[str, ...]]
    outcomes: tuple[str, ...] = ("GSV", "QMD", "BA")

    @property
    def label(self) -> str:
        return f"{self.family}:{self.variant}"


@dataclass
class CvResult:
    report: pd.DataFrame
    corr: dict[str, CorrPPD]
    folds: pd.DataFrame                # plot_id, block_id, fold
    audit: pd.DataFrame                # fold, n_plots, min_train_dist_m
    failures: list[str]


def _derive_seed(seed: int, *keys) -> int:
    return int(seed_sequence(seed, *keys).generate_state(1, np.uint64)[0])


def _subset_dataset(dataset: Dataset, keep_ids: set[str]) -> Dataset:
    plots = tuple(p for p in dataset.plots if p.plot_id in keep_ids)
    return replace(dataset, plots=plots, units=())


def _observed_matrix(dataset: Dataset, plot_ids: Sequence[str]) -> np.ndarray:
    """n x 4 observed outcomes on the original scale, N derived if absent."""
    by_id = {p.plot_id: p for p in dataset.plots}
    rows = []
    for pid in plot_ids:
        p = by_id[pid]
        ba, qmd = p.outcomes["BA"], p.outcomes["QMD"]
        n_val = p.outcomes.get("N", derive_stem_density(ba, qmd))
        rows.append([p.outcomes["GSV"], qmd, ba, n_val])
    return np.asarray(rows, dtype=float)


def _fit_candidate(
    train: Dataset,
    candidate: CandidateModel,
    priors,
    schedule: McmcSchedule,
    fold: int,
):
    """Fit one candidate on a training set; univariate families fit one
    model per outcome."""
    if candidate.family.startswith("uni"):
        fits = {}
        for q in candidate.outcomes:
            spec = ModelSpec(
                candidate.family, (q,), {q: candidate.predictors.get(q, ())}
            )
            sched = replace(
                schedule,
                seed=_derive_seed(schedule.seed, "cv", candidate.label, fold, q),
            )
            fits[q] = fit_model(train, spec, priors, sched)
        return fits
    spec = ModelSpec(candidate.family, candidate.outcomes, dict(candidate.predictors))
    sched = replace(
        schedule, seed=_derive_seed(schedule.seed, "cv", candidate.label, fold)
    )
    return fit_model(train, spec, priors, sched)


def _cv_fold(
    dataset: Dataset,
    candidates: Sequence[CandidateModel],
    priors,
    schedule: McmcSchedule,
    folds: FoldAssignment,
    transform: OutcomeTransform,
    fold: int,
) -> dict:
    """One fold's refits and held-out predictions (module-level so a worker
    pool can run folds in parallel; all randomness keyed by fold)."""
    plot_fold = folds.plot_fold()
    plots_by_id = {p.plot_id: p for p in dataset.plots}
    coords_by_id = {p.plot_id: np.asarray(p.coords, float) for p in dataset.plots}
    test_ids = [p.plot_id for p in dataset.plots if plot_fold[p.plot_id] == fold]
    train_ids = {p.plot_id for p in dataset.plots if plot_fold[p.plot_id] != fold}
    result: dict = {"fold": fold, "failures": [], "per_candidate": {}}
    if not test_ids:
        return result
    train_coords = np.array([coords_by_id[i] for i in sorted(train_ids)])
    min_dist = min(
        float(np.min(np.linalg.norm(train_coords - coords_by_id[i], axis=1)))
        for i in test_ids
    )
    result["audit"] = {
        "fold": fold,
        "n_plots": len(test_ids),
        "min_train_dist_m": min_dist,
    }

    train = _subset_dataset(dataset, train_ids)
    train_model = transform_outcomes(train, transform)
    targets = [
        PredictionUnit(
            unit_id=pid,
            stand_id=f"fold{fold}",
            coords=tuple(coords_by_id[pid]),
            area=1.0,
            predictors=dict(plots_by_id[pid].predictors),
        )
        for pid in test_ids
    ]
    observed = _observed_matrix(dataset, test_ids)

    for cand in candidates:
        min_train = max(len(cand.predictors.get(q, ())) + 2 for q in cand.outcomes)
        if len(train_ids) < min_train:
            result["failures"].append(
                f"{cand.label}/fold{fold}: too few training plots"
            )
            continue
        try:
            fits = _fit_candidate(train_model, cand, priors, schedule, fold)
            pred_seed = _derive_seed(schedule.seed, "cvpred", cand.label, fold)
            draws = predict_original_scale(
                fits, targets, transform, pred_seed
            )  # T x n_test x 4
        except Exception as exc:  # noqa: BLE001 - recorded, not fatal
            result["failures"].append(f"{cand.label}/fold{fold}: {exc}")
            continue
        fold_ppd = aggregate_stand(draws, [1.0] * len(test_ids), stand_id=f"fold{fold}")
        result["per_candidate"][cand.label] = {
            "fold_draws": fold_ppd.draws,          # T x 4
            "fold_obs": observed.mean(axis=0),     # 4
            "plot_draws": draws,                   # T x n_test x 4
            "plot_obs": observed,                  # n_test x 4
        }
    return result


def run_spatial_cv(
    dataset: Dataset,
    candidates: Sequence[CandidateModel],
    priors,
    schedule: McmcSchedule,
    folds: FoldAssignment,
    transform: OutcomeTransform,
    unit_level: bool = True,
    n_jobs: int = 1,
) -> CvResult:
    """Blocked k-fold cross-validation over a roster of candidate models.

    ``priors=None`` recomputes default priors from each fold's training set.
    A failed fold refit is recorded and skipped rather than aborting the run.
    Folds are independent jobs; ``n_jobs > 1`` runs them in a bounded process
    pool, with identical output to the serial run because every random stream
    is keyed by fold and the reduction is ordered.
    """
    fold_ids = list(range(1, folds.k + 1))
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            raw = list(
                pool.map(
                    _cv_fold,
                    [dataset] * len(fold_ids),
                    [candidates] * len(fold_ids),
                    [priors] * len(fold_ids),
                    [schedule] * len(fold_ids),
                    [folds] * len(fold_ids),
                    [transform] * len(fold_ids),
                    fold_ids,
                )
            )
    else:
        raw = [
            _cv_fold(dataset, candidates, priors, schedule, folds, transform, f)
            for f in fold_ids
        ]

    failures: list[str] = []
    fold_obs: dict[str, list[np.ndarray]] = {c.label: [] for c in candidates}
    fold_draws: dict[str, list[np.ndarray]] = {c.label: [] for c in candidates}
    plot_obs: dict[str, list[np.ndarray]] = {c.label: [] for c in candidates}
    plot_draws: dict[str, list[np.ndarray]] = {c.label: [] for c in candidates}
    audit_rows = []
    for res in raw:
        failures.extend(res["failures"])
        if "audit" in res:
            audit_rows.append(res["audit"])
        for label, blob in res["per_candidate"].items():
            fold_draws[label].append(blob["fold_draws"])
            fold_obs[label].append(blob["fold_obs"])
            plot_draws[label].append(blob["plot_draws"])
            plot_obs[label].append(blob["plot_obs"])

    plot_fold = folds.plot_fold()
    rows = []
    corr: dict[str, CorrPPD] = {}
    empirical = empirical_correlations(dataset)
    for cand in candidates:
        label = cand.label
        if not fold_draws[label]:
            continue
        fobs = np.stack(fold_obs[label])                # folds x 4
        fdraws = np.stack(fold_draws[label], axis=1)    # T x folds x 4
        pobs = np.concatenate(plot_obs[label], axis=0)  # n x 4
        pdraws = np.concatenate(plot_draws[label], axis=1)  # T x n x 4
        for j, outcome in enumerate(PPD_OUTCOMES):
            block = cv_metrics(fobs[:, j], fdraws[:, :, j], "block")
            rows.append(
                {"model": cand.family, "variant": cand.variant, "outcome": outcome}
                | block
            )
            if unit_level:
                unit = cv_metrics(pobs[:, j], pdraws[:, :, j], "unit")
                rows.append(
                    {
                        "model": cand.family,
                        "variant": cand.variant,
                        "outcome": outcome,
                    }
                    | unit
                )
        corr[label] = correlation_ppd(pdraws, empirical)

    fold_frame = pd.DataFrame(
        {
            "plot_id": [p.plot_id for p in dataset.plots],
            "block_id": [
                folds.blocking.assignment[p.plot_id] for p in dataset.plots
            ],
            "fold": [plot_fold[p.plot_id] for p in dataset.plots],
        }
    )
    return CvResult(
        report=pd.DataFrame(rows),
        corr=corr,
        folds=fold_frame,
        audit=pd.DataFrame(audit_rows),
        failures=failures,
    )
