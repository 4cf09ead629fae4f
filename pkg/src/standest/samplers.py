"""MCMC fitting of the four candidate model families.

Families:

* ``uni_nonspatial``  y = X b + e,               e ~ N(0, tau2 I)
* ``uni_spatial``     y ~ N(X b, sigma2 R(phi) + tau2 I)       (marginalized)
* ``mv_nonspatial``   y(s) = X(s) b + e(s),      e(s) ~ N(0, Psi)
* ``mv_spatial``      y ~ N(X b, Sigma(A, phi) + I_n x Psi)    (marginalized)

Conjugate blocks (regression coefficients, tau2, Psi) are updated by Gibbs;
covariance parameters without closed-form conditionals move in one joint
adaptive random-walk Metropolis block on unconstrained coordinates
(log variances, log-Cholesky factors, logit-rescaled decays).  Proposal
scales adapt per batch during burn-in only, so the post-burn-in kernel is a
fixed, valid Metropolis-within-Gibbs.

The spatial fitters marginalize the latent field out of the likelihood and
recover it afterwards, per retained draw, from its exact Gaussian full
conditional given the data and that draw's parameters.

All randomness flows from ``schedule.seed`` through named substreams
(see :mod:`standest.rng`); refitting with identical inputs reproduces every
retained draw bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd
import scipy.linalg as sla
from scipy.special import expit, gammaln, log_expit
from scipy.stats import invwishart

from .data import Dataset
from .errors import ConfigError, NumericalError, ValidationError
from .rng import substream
from .spatial import (
    LOG20,
    chol_with_jitter,
    conditional_gaussian,
    gaussian_loglik,
    pairwise_distances,
    sample_mvn,
)

FAMILIES = ("uni_nonspatial", "uni_spatial", "mv_nonspatial", "mv_spatial")
SPATIAL_FAMILIES = ("uni_spatial", "mv_spatial")
MV_FAMILIES = ("mv_nonspatial", "mv_spatial")


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Which family to fit, for which outcomes, with which predictors.

    ``predictors`` maps each outcome to its ordered predictor names; an empty
    list means intercept-only.  Univariate families carry exactly one
    outcome; multivariate families normally carry at least two, but m = 1 is
    accepted so the univariate reductions can be checked directly.
    """

    family: str
    outcomes: tuple[str, ...]
    predictors: Mapping[str, tuple[str, ...]]

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.family in MV_FAMILIES and len(self.outcomes) < 1:
            raise ConfigError(f"{self.family} requires at least one outcome")
        if self.family.startswith("uni") and len(self.outcomes) != 1:
            raise ConfigError(f"{self.family} fits exactly one outcome")
        preds = {q: tuple(self.predictors.get(q, ())) for q in self.outcomes}
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        object.__setattr__(self, "predictors", preds)

    @property
    def m(self) -> int:
        return len(self.outcomes)

    @property
    def is_spatial(self) -> bool:
        return self.family in SPATIAL_FAMILIES

    @property
    def is_mv(self) -> bool:
        return self.family in MV_FAMILIES

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "outcomes": list(self.outcomes),
            "predictors": {q: list(v) for q, v in self.predictors.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["family"], tuple(d["outcomes"]),
                   {q: tuple(v) for q, v in d["predictors"].items()})


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters: flat priors on coefficients are implicit.

    * ``tau2``/``sigma2``: per-outcome inverse-Gamma (shape, scale)
    * ``psi``/``aat``: inverse-Wishart (df, scale matrix)
    * ``phi``: per-outcome uniform (lower, upper) in km^-1
    """

    tau2: Mapping[str, tuple[float, float]] | None = None
    sigma2: Mapping[str, tuple[float, float]] | None = None
    psi: tuple[float, np.ndarray] | None = None
    aat: tuple[float, np.ndarray] | None = None
    phi: Mapping[str, tuple[float, float]] | None = None

    def __post_init__(self) -> None:
        for name in ("tau2", "sigma2"):
            entry = getattr(self, name)
            if entry is None:
                continue
            for q, (shape, scale) in entry.items():
                if not (shape > 1 and scale > 0):
                    raise ConfigError(
                        f"{name}[{q}]: IG needs shape > 1 and scale > 0"
                    )
        for name in ("psi", "aat"):
            entry = getattr(self, name)
            if entry is None:
                continue
            df, scale = entry
            scale = np.asarray(scale, dtype=float)
            m = scale.shape[0]
            if scale.shape != (m, m) or not df > m + 1:
                raise ConfigError(f"{name}: IW needs square scale and df > m+1")
            object.__setattr__(self, name, (float(df), scale))
        if self.phi is not None:
            for q, (lo, hi) in self.phi.items():
                if not (0 < lo < hi):
                    raise ConfigError(f"phi[{q}]: need 0 < lower < upper")

    def to_dict(self) -> dict:
        def ig_map(entry):
            return None if entry is None else {q: list(v) for q, v in entry.items()}

        def iw(entry):
            return None if entry is None else [entry[0], np.asarray(entry[1]).tolist()]

        return {
            "tau2": ig_map(self.tau2),
            "sigma2": ig_map(self.sigma2),
            "psi": iw(self.psi),
            "aat": iw(self.aat),
            "phi": ig_map(self.phi),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        def ig_map(entry):
            return None if entry is None else {q: tuple(v) for q, v in entry.items()}

        def iw(entry):
            return None if entry is None else (entry[0], np.asarray(entry[1]))

        return cls(
            tau2=ig_map(d.get("tau2")),
            sigma2=ig_map(d.get("sigma2")),
            psi=iw(d.get("psi")),
            aat=iw(d.get("aat")),
            phi=ig_map(d.get("phi")),
        )


@dataclass(frozen=True)
class McmcSchedule:
    """Batched MCMC schedule; retained draws T = (total - burn) // thin."""

    n_batches: int = 500
    batch_len: int = 10
    burn_in_frac: float = 0.5
    thin: int = 10
    target_accept: float = 0.43
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_batches < 1 or self.batch_len < 1 or self.thin < 1:
            raise ConfigError("schedule counts must be positive")
        if not 0.0 <= self.burn_in_frac < 1.0:
            raise ConfigError("burn_in_frac must lie in [0, 1)")
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigError("target_accept must lie in (0, 1)")
        if self.n_retained < 2:
            raise ConfigError(
                f"schedule retains {self.n_retained} draws; need at least 2"
            )

    @property
    def n_total(self) -> int:
        return self.n_batches * self.batch_len

    @property
    def n_burn(self) -> int:
        return int(self.n_total * self.burn_in_frac)

    @property
    def n_burn_batches(self) -> int:
        return int(self.n_batches * self.burn_in_frac)

    @property
    def n_retained(self) -> int:
        return (self.n_total - self.n_burn) // self.thin

    def to_dict(self) -> dict:
        return {
            "n_batches": self.n_batches,
            "batch_len": self.batch_len,
            "burn_in_frac": self.burn_in_frac,
            "thin": self.thin,
            "target_accept": self.target_accept,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "McmcSchedule":
        return cls(**d)


def retained_indices(n_raw: int, schedule: McmcSchedule) -> np.ndarray:
    """0-based indices kept after burn-in and thinning of an n_raw chain."""
    if n_raw != schedule.n_total:
        raise ConfigError(
            f"raw draw count {n_raw} != schedule total {schedule.n_total}"
        )
    burn = int(n_raw * schedule.burn_in_frac)
    n_keep = (n_raw - burn) // schedule.thin
    if n_keep < 2:
        raise ConfigError("fewer than 2 retained draws after burn-in/thinning")
    return burn + schedule.thin * np.arange(n_keep)


def postprocess_chain(raw: Mapping[str, np.ndarray], schedule: McmcSchedule) -> dict:
    """Apply burn-in and thinning to every chain array (leading axis = draw)."""
    sizes = {v.shape[0] for v in raw.values()}
    if len(sizes) != 1:
        raise ConfigError("chain arrays disagree on raw draw count")
    keep = retained_indices(sizes.pop(), schedule)
    return {k: np.asarray(v)[keep] for k, v in raw.items()}


# ---------------------------------------------------------------------------
# adaptive proposal scales
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProposalScales:
    """Per-parameter log proposal standard deviations for one joint block."""

    log_sd: np.ndarray
    batch_index: int = 0
    target: float = 0.43

    def sd(self) -> np.ndarray:
        return np.exp(self.log_sd)


def adapt_batch(state: ProposalScales, observed_accept_rate: float) -> ProposalScales:
    """Batch adaptation: move every log sd by +/- min(0.01, b^-1/2)."""
    b = state.batch_index + 1
    delta = min(0.01, b ** -0.5)
    step = delta if observed_accept_rate > state.target else -delta
    return replace(state, log_sd=state.log_sd + step, batch_index=b)


# ---------------------------------------------------------------------------
# design matrices
# ---------------------------------------------------------------------------

def design_matrix(dataset: Dataset, outcome: str, predictors: tuple[str, ...]):
    """n x (1+k) design with leading intercept; full column rank required."""
    n = dataset.n_plots
    cols = [np.ones(n)]
    for name in predictors:
        if name not in dataset.predictor_names:
            raise ValidationError(f"unknown predictor {name!r}")
        cols.append(dataset.predictor_matrix([name])[:, 0])
    X = np.column_stack(cols)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValidationError(f"design matrix for {outcome} is rank deficient")
    names = tuple([f"{outcome}_intercept"] + [f"{outcome}_{p}" for p in predictors])
    return X, names


def stacked_mv_design(dataset: Dataset, spec: ModelSpec):
    """(n m) x p location-major block design and its coefficient names."""
    n = dataset.n_plots
    m = spec.m
    per_outcome = [design_matrix(dataset, q, spec.predictors[q]) for q in spec.outcomes]
    p = sum(X.shape[1] for X, _ in per_outcome)
    X = np.zeros((n * m, p))
    names: list[str] = []
    col = 0
    for j, (Xq, names_q) in enumerate(per_outcome):
        X[j::m, col : col + Xq.shape[1]] = Xq
        names.extend(names_q)
        col += Xq.shape[1]
    return X, tuple(names)


def stack_outcomes(Y: np.ndarray) -> np.ndarray:
    """n x m outcome matrix -> location-major nm vector."""
    return np.asarray(Y, dtype=float).reshape(-1)


# ---------------------------------------------------------------------------
# default priors
# ---------------------------------------------------------------------------

def _ols_residual_variance(y: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, float]:
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    dof = max(y.shape[0] - X.shape[1], 1)
    return resid, float(resid @ resid / dof)


def default_priors(dataset: Dataset, spec: ModelSpec) -> PriorSpec:
    """Vague data-centered priors.

    Scalar variances get IG(2, .) with its (infinite-variance) mean centered
    on the outcome's non-spatial OLS residual variance, split evenly between
    nugget and spatial variance for spatial families.  Covariances get
    IW(m+2, .) centered analogously.  Decays get a uniform prior whose
    support spans effective ranges from 5% to 100% of the maximum inter-plot
    distance.
    """
    resids = {}
    v_hat = {}
    p_max = 1
    for q in spec.outcomes:
        X, _ = design_matrix(dataset, q, spec.predictors[q])
        y = dataset.outcome_matrix([q])[:, 0]
        resids[q], v_hat[q] = _ols_residual_variance(y, X)
        p_max = max(p_max, X.shape[1])

    phi_support = None
    if spec.is_spatial:
        d_max = dataset.max_plot_distance_km()
        if not d_max > 0:
            raise ValidationError("degenerate plot geometry: zero extent")
        phi_support = {
            q: (LOG20 / d_max, LOG20 / (0.05 * d_max)) for q in spec.outcomes
        }

    if spec.family == "uni_nonspatial":
        q = spec.outcomes[0]
        return PriorSpec(tau2={q: (2.0, v_hat[q])})
    if spec.family == "uni_spatial":
        q = spec.outcomes[0]
        return PriorSpec(
            tau2={q: (2.0, v_hat[q] / 2.0)},
            sigma2={q: (2.0, v_hat[q] / 2.0)},
            phi=phi_support,
        )

    E = np.column_stack([resids[q] for q in spec.outcomes])
    psi_hat = E.T @ E / max(dataset.n_plots - p_max, 1)
    m = spec.m
    df = float(m + 2)  # smallest integer df with a defined IW mean
    if spec.family == "mv_nonspatial":
        return PriorSpec(psi=(df, psi_hat))
    return PriorSpec(
        psi=(df, psi_hat / 2.0),
        aat=(df, psi_hat / 2.0),
        phi=phi_support,
    )


# ---------------------------------------------------------------------------
# posterior container
# ---------------------------------------------------------------------------

@dataclass
class PosteriorSamples:
    """Retained draws plus everything needed to reproduce or reuse them."""

    model_spec: ModelSpec
    prior_spec: PriorSpec
    schedule: McmcSchedule
    beta_names: tuple[str, ...]
    beta: np.ndarray                      # T x p
    tau2: np.ndarray | None = None        # T          (uni families)
    sigma2: np.ndarray | None = None      # T          (uni_spatial)
    psi: np.ndarray | None = None         # T x m x m  (mv families)
    a_mat: np.ndarray | None = None       # T x m x m  (mv_spatial)
    phi: np.ndarray | None = None         # T x m      (spatial families)
    w: np.ndarray | None = None           # T x (n m)  location-major
    plot_ids: tuple[str, ...] = field(default=())
    coords_km: np.ndarray | None = None   # n x 2
    acceptance: tuple[float, ...] = field(default=())

    @property
    def family(self) -> str:
        return self.model_spec.family

    @property
    def outcomes(self) -> tuple[str, ...]:
        return self.model_spec.outcomes

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]

    def aat(self) -> np.ndarray:
        if self.a_mat is None:
            raise ConfigError("model has no coregionalization matrix")
        return np.einsum("tij,tkj->tik", self.a_mat, self.a_mat)

    def validate_draws(self) -> None:
        """Domain-constraint assertion run on export."""
        if self.tau2 is not None and np.any(self.tau2 <= 0):
            raise NumericalError("non-positive tau2 draw")
        if self.sigma2 is not None and np.any(self.sigma2 <= 0):
            raise NumericalError("non-positive sigma2 draw")
        if self.phi is not None:
            support = self.prior_spec.phi or {}
            for j, q in enumerate(self.outcomes):
                lo, hi = support.get(q, (0.0, np.inf))
                col = self.phi[:, j] if self.phi.ndim == 2 else self.phi
                if np.any(col < lo - 1e-12) or np.any(col > hi + 1e-12):
                    raise NumericalError(f"phi draw outside prior support for {q}")
        if self.a_mat is not None and np.any(
            np.diagonal(self.a_mat, axis1=1, axis2=2) <= 0
        ):
            raise NumericalError("non-positive diagonal in A draw")
        if self.psi is not None:
            for t in range(self.psi.shape[0]):
                try:
                    np.linalg.cholesky(self.psi[t])
                except np.linalg.LinAlgError as exc:
                    raise NumericalError(f"Psi draw {t} not SPD") from exc


# ---------------------------------------------------------------------------
# scalar density helpers
# ---------------------------------------------------------------------------

def _log_ig(x: float, shape: float, scale: float) -> float:
    return (
        shape * math.log(scale)
        - float(gammaln(shape))
        - (shape + 1.0) * math.log(x)
        - scale / x
    )


def _draw_ig(rng: np.random.Generator, shape: float, scale: float) -> float:
    return scale / rng.gamma(shape)


def _phi_from_u(u: float, lo: float, hi: float) -> float:
    return lo + (hi - lo) * float(expit(u))


def _u_from_phi(phi: float, lo: float, hi: float) -> float:
    frac = (phi - lo) / (hi - lo)
    frac = min(max(frac, 1e-12), 1.0 - 1e-12)
    return math.log(frac / (1.0 - frac))


def _log_jac_phi(u: float, lo: float, hi: float) -> float:
    return math.log(hi - lo) + float(log_expit(u)) + float(log_expit(-u))


def _tril_from_z(z: np.ndarray, m: int) -> np.ndarray:
    """Unconstrained vector (log diag, then row-major strict lower) -> L."""
    L = np.zeros((m, m))
    np.fill_diagonal(L, np.exp(z[:m]))
    idx = m
    for i in range(1, m):
        for j in range(i):
            L[i, j] = z[idx]
            idx += 1
    return L


def _z_from_tril(L: np.ndarray) -> np.ndarray:
    m = L.shape[0]
    parts = [np.log(np.diag(L))]
    lower = [L[i, j] for i in range(1, m) for j in range(i)]
    return np.concatenate([parts[0], np.asarray(lower)]) if lower else parts[0]


def _log_jac_chol(L: np.ndarray) -> float:
    """log |d(LL^T)/dz| for z = (log diag L, strict lower of L)."""
    m = L.shape[0]
    diag = np.diag(L)
    # matrix-from-Cholesky Jacobian plus the log-diagonal reparameterization
    return m * math.log(2.0) + float(np.sum((m - np.arange(m) + 1) * np.log(diag)))


def _draw_gaussian_coefficients(
    rng: np.random.Generator, precision: np.ndarray, lin: np.ndarray
) -> np.ndarray:
    """Draw from N(precision^-1 lin, precision^-1) via Cholesky."""
    L, _ = chol_with_jitter(precision)
    half = sla.solve_triangular(L, lin, lower=True, check_finite=False)
    mean = sla.solve_triangular(L.T, half, lower=False, check_finite=False)
    z = rng.standard_normal(lin.shape[0])
    return mean + sla.solve_triangular(L.T, z, lower=False, check_finite=False)


# ---------------------------------------------------------------------------
# univariate fitters
# ---------------------------------------------------------------------------

def fit_uni_nonspatial(
    dataset: Dataset,
    spec: ModelSpec,
    priors: PriorSpec,
    schedule: McmcSchedule,
    fixed_tau2: float | None = None,
) -> PosteriorSamples:
    """Exact two-block Gibbs for the non-spatial univariate model.

    ``fixed_tau2`` pins the residual variance (validation mode): the
    coefficient draws then come from their exact analytic Normal posterior.
    """
    if spec.family != "uni_nonspatial":
        raise ConfigError(f"expected uni_nonspatial, got {spec.family}")
    q = spec.outcomes[0]
    X, beta_names = design_matrix(dataset, q, spec.predictors[q])
    y = dataset.outcome_matrix([q])[:, 0]
    n, p = X.shape
    if n <= p:
        raise ValidationError("need more plots than coefficients")
    shape0, scale0 = priors.tau2[q]

    XtX = X.T @ X
    L_xtx, _ = chol_with_jitter(XtX)
    beta_hat = sla.cho_solve((L_xtx, True), X.T @ y, check_finite=False)

    rng = substream(schedule.seed, "fit", spec.family, q)
    tau2 = fixed_tau2 if fixed_tau2 is not None else scale0
    total = schedule.n_total
    beta_chain = np.empty((total, p))
    tau2_chain = np.empty(total)
    for it in range(total):
        z = rng.standard_normal(p)
        beta = beta_hat + math.sqrt(tau2) * sla.solve_triangular(
            L_xtx.T, z, lower=False, check_finite=False
        )
        if fixed_tau2 is None:
            resid = y - X @ beta
            tau2 = _draw_ig(rng, shape0 + n / 2.0, scale0 + 0.5 * float(resid @ resid))
        beta_chain[it] = beta
        tau2_chain[it] = tau2

    kept = postprocess_chain({"beta": beta_chain, "tau2": tau2_chain}, schedule)
    return PosteriorSamples(
        model_spec=spec,
        prior_spec=priors,
        schedule=schedule,
        beta_names=beta_names,
        beta=kept["beta"],
        tau2=kept["tau2"],
        plot_ids=tuple(pl.plot_id for pl in dataset.plots),
        coords_km=dataset.plot_coords_km(),
    )


def fit_uni_spatial(
    dataset: Dataset,
    spec: ModelSpec,
    priors: PriorSpec,
    schedule: McmcSchedule,
    init_proposal_sd: float = 0.1,
) -> PosteriorSamples:
    """Metropolis-within-Gibbs for the marginalized univariate spatial model."""
    if spec.family != "uni_spatial":
        raise ConfigError(f"expected uni_spatial, got {spec.family}")
    q = spec.outcomes[0]
    X, beta_names = design_matrix(dataset, q, spec.predictors[q])
    y = dataset.outcome_matrix([q])[:, 0]
    n, p = X.shape
    if n <= p:
        raise ValidationError("need more plots than coefficients")
    coords = dataset.plot_coords_km()
    dist = pairwise_distances(coords)

    a_tau, b_tau = priors.tau2[q]
    a_sig, b_sig = priors.sigma2[q]
    phi_lo, phi_hi = priors.phi[q]

    def factor_at(z: np.ndarray):
        """(L, logdet, logprior) at z, or None when unusable."""
        if np.any(np.abs(z[:2]) > 50.0):
            return None
        sigma2, tau2 = math.exp(z[0]), math.exp(z[1])
        phi = _phi_from_u(z[2], phi_lo, phi_hi)
        K = sigma2 * np.exp(-phi * dist)
        K[np.diag_indices(n)] += tau2
        try:
            L, _ = chol_with_jitter(K)
        except NumericalError:
            return None
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        logprior = (
            _log_ig(sigma2, a_sig, b_sig) + z[0]
            + _log_ig(tau2, a_tau, b_tau) + z[1]
            + _log_jac_phi(z[2], phi_lo, phi_hi)
        )
        return L, logdet, logprior

    def loglik(L, logdet, resid):
        alpha = sla.solve_triangular(L, resid, lower=True, check_finite=False)
        return -0.5 * (
            n * math.log(2.0 * math.pi) + logdet + float(alpha @ alpha)
        )

    rng = substream(schedule.seed, "fit", spec.family, q)

    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    v0 = max(float(np.var(y - X @ beta, ddof=1)), 1e-8)
    z = np.array([
        math.log(v0 / 2.0),
        math.log(v0 / 2.0),
        _u_from_phi(math.sqrt(phi_lo * phi_hi), phi_lo, phi_hi),
    ])
    resid = y - X @ beta
    parts = factor_at(z)
    if parts is None:
        raise NumericalError("initial covariance not factorizable")
    current_lp = loglik(parts[0], parts[1], resid) + parts[2]
    scales = ProposalScales(
        log_sd=np.full(3, math.log(init_proposal_sd)), target=schedule.target_accept
    )

    total = schedule.n_total
    beta_chain = np.empty((total, p))
    theta_chain = np.empty((total, 3))  # sigma2, tau2, phi
    acceptance: list[float] = []
    it = 0
    for batch in range(schedule.n_batches):
        accepted = 0
        for _ in range(schedule.batch_len):
            proposal = z + scales.sd() * rng.standard_normal(3)
            prop_parts = factor_at(proposal)
            if prop_parts is not None:
                prop_lp = loglik(prop_parts[0], prop_parts[1], resid) + prop_parts[2]
                if math.log(rng.uniform()) < prop_lp - current_lp:
                    z, parts, current_lp = proposal, prop_parts, prop_lp
                    accepted += 1

            # conjugate coefficient draw given the current covariance factor
            L_K = parts[0]
            Lx = sla.solve_triangular(L_K, X, lower=True, check_finite=False)
            Ly = sla.solve_triangular(L_K, y, lower=True, check_finite=False)
            beta = _draw_gaussian_coefficients(rng, Lx.T @ Lx, Lx.T @ Ly)
            resid = y - X @ beta
            current_lp = loglik(L_K, parts[1], resid) + parts[2]

            beta_chain[it] = beta
            theta_chain[it] = (
                math.exp(z[0]),
                math.exp(z[1]),
                _phi_from_u(z[2], phi_lo, phi_hi),
            )
            it += 1
        rate = accepted / schedule.batch_len
        acceptance.append(rate)
        if batch < schedule.n_burn_batches:
            scales = adapt_batch(scales, rate)

    kept = postprocess_chain({"beta": beta_chain, "theta": theta_chain}, schedule)

    # latent-field recovery: exact Gaussian conditional at the observed sites
    T = kept["beta"].shape[0]
    w_draws = np.empty((T, n))
    w_rng = substream(schedule.seed, "w", spec.family, q)
    for t in range(T):
        sigma2, tau2, phi = kept["theta"][t]
        C = sigma2 * np.exp(-phi * dist)
        K = C.copy()
        K[np.diag_indices(n)] += tau2
        r = y - X @ kept["beta"][t]
        mean, cov = conditional_gaussian(K, C, C, r)
        w_draws[t] = sample_mvn(w_rng, mean, cov)

    return PosteriorSamples(
        model_spec=spec,
        prior_spec=priors,
        schedule=schedule,
        beta_names=beta_names,
        beta=kept["beta"],
        tau2=kept["theta"][:, 1],
        sigma2=kept["theta"][:, 0],
        phi=kept["theta"][:, 2],
        w=w_draws,
        plot_ids=tuple(pl.plot_id for pl in dataset.plots),
        coords_km=coords,
        acceptance=tuple(acceptance),
    )


# ---------------------------------------------------------------------------
# multivariate fitters
# ---------------------------------------------------------------------------

def _mv_beta_draw(rng, L_K, X, y_vec):
    Lx = sla.solve_triangular(L_K, X, lower=True, check_finite=False)
    Ly = sla.solve_triangular(L_K, y_vec, lower=True, check_finite=False)
    return _draw_gaussian_coefficients(rng, Lx.T @ Lx, Lx.T @ Ly)


def fit_mv_nonspatial(
    dataset: Dataset,
    spec: ModelSpec,
    priors: PriorSpec,
    schedule: McmcSchedule,
) -> PosteriorSamples:
    """Gibbs for the multivariate non-spatial model (GLS coefficients,
    conjugate inverse-Wishart residual covariance)."""
    if spec.family != "mv_nonspatial":
        raise ConfigError(f"expected mv_nonspatial, got {spec.family}")
    X, beta_names = stacked_mv_design(dataset, spec)
    Y = dataset.outcome_matrix(spec.outcomes)
    n, m = Y.shape
    p = X.shape[1]
    if n * m <= p:
        raise ValidationError("need more observations than coefficients")
    df0, S0 = priors.psi
    X3 = X.reshape(n, m, p)

    rng = substream(schedule.seed, "fit", spec.family, *spec.outcomes)
    beta = np.linalg.lstsq(X, stack_outcomes(Y), rcond=None)[0]
    total = schedule.n_total
    beta_chain = np.empty((total, p))
    psi_chain = np.empty((total, m, m))
    for it in range(total):
        E = Y - (X @ beta).reshape(n, m)
        psi = invwishart.rvs(df=df0 + n, scale=S0 + E.T @ E, random_state=rng)
        psi = np.atleast_2d(psi)

        psi_inv = np.linalg.inv(psi)
        T1 = np.einsum("ab,nbq->naq", psi_inv, X3)
        precision = np.einsum("nap,naq->pq", X3, T1)
        lin = np.einsum("nap,na->p", X3, Y @ psi_inv)
        beta = _draw_gaussian_coefficients(rng, precision, lin)

        beta_chain[it] = beta
        psi_chain[it] = psi

    kept = postprocess_chain({"beta": beta_chain, "psi": psi_chain}, schedule)
    return PosteriorSamples(
        model_spec=spec,
        prior_spec=priors,
        schedule=schedule,
        beta_names=beta_names,
        beta=kept["beta"],
        psi=kept["psi"],
        plot_ids=tuple(pl.plot_id for pl in dataset.plots),
        coords_km=dataset.plot_coords_km(),
    )


def fit_mv_spatial(
    dataset: Dataset,
    spec: ModelSpec,
    priors: PriorSpec,
    schedule: McmcSchedule,
    init_proposal_sd: float = 0.05,
    constrain_diagonal: bool = False,
) -> PosteriorSamples:
    """Metropolis-within-Gibbs for the marginalized coregionalized model.

    One joint adaptive random-walk block moves the unconstrained coordinates
    of A (log-diagonal, free sub-diagonal), the log-Cholesky factor of Psi,
    and the logit-rescaled decays; coefficients stay conjugate.

    With ``constrain_diagonal`` the sub-diagonals of A and chol(Psi) are
    pinned at zero and the matrix priors reduce to independent inverse-Gamma
    densities IG((df+m-1)/2, S_qq/2) on the diagonal variances, which makes
    the posterior factor exactly into the corresponding univariate spatial
    models (used by the nesting checks).
    """
    if spec.family != "mv_spatial":
        raise ConfigError(f"expected mv_spatial, got {spec.family}")
    X, beta_names = stacked_mv_design(dataset, spec)
    Y = dataset.outcome_matrix(spec.outcomes)
    n, m = Y.shape
    p = X.shape[1]
    y_vec = stack_outcomes(Y)
    if n * m <= p:
        raise ValidationError("need more observations than coefficients")
    coords = dataset.plot_coords_km()
    dist = pairwise_distances(coords)

    df_psi, S_psi = priors.psi
    df_a, S_a = priors.aat
    phi_bounds = [priors.phi[q] for q in spec.outcomes]
    n_tri = m * (m + 1) // 2
    dim = 2 * n_tri + m

    loc = np.arange(n)

    def unpack(z: np.ndarray):
        A = _tril_from_z(z[:n_tri], m)
        L_psi = _tril_from_z(z[n_tri : 2 * n_tri], m)
        phis = np.array(
            [
                _phi_from_u(z[2 * n_tri + j], lo, hi)
                for j, (lo, hi) in enumerate(phi_bounds)
            ]
        )
        return A, L_psi, phis

    def lmc_cov(A: np.ndarray, phis: np.ndarray) -> np.ndarray:
        corr = np.exp(-phis[:, None, None] * dist[None, :, :])
        outer = np.einsum("aq,bq->qab", A, A)
        K = np.empty((n * m, n * m))
        for a in range(m):
            for b in range(m):
                K[a::m, b::m] = np.tensordot(outer[:, a, b], corr, axes=(0, 0))
        return K

    def marginal_cov(A: np.ndarray, psi: np.ndarray, phis: np.ndarray) -> np.ndarray:
        K = lmc_cov(A, phis)
        K4 = K.reshape(n, m, n, m)
        K4[loc, :, loc, :] += psi
        return K

    def log_prior(z: np.ndarray, A: np.ndarray, L_psi: np.ndarray) -> float:
        psi = L_psi @ L_psi.T
        if constrain_diagonal:
            shape_a = (df_a + m - 1) / 2.0
            shape_p = (df_psi + m - 1) / 2.0
            lp = 0.0
            for j in range(m):
                s_a = A[j, j] ** 2
                s_p = psi[j, j]
                lp += _log_ig(s_a, shape_a, S_a[j, j] / 2.0) + math.log(2.0 * s_a)
                lp += _log_ig(s_p, shape_p, S_psi[j, j] / 2.0) + math.log(2.0 * s_p)
        else:
            lp = (
                float(invwishart.logpdf(A @ A.T, df=df_a, scale=S_a))
                + _log_jac_chol(A)
                + float(invwishart.logpdf(psi, df=df_psi, scale=S_psi))
                + _log_jac_chol(L_psi)
            )
        for j, (lo, hi) in enumerate(phi_bounds):
            lp += _log_jac_phi(z[2 * n_tri + j], lo, hi)
        return lp

    diag_idx = np.concatenate([np.arange(m), n_tri + np.arange(m)])

    def factor_at(z: np.ndarray):
        """(L, logdet, logprior) at z, or None when unusable."""
        if np.any(np.abs(z[diag_idx]) > 25.0):
            return None
        A, L_psi, phis = unpack(z)
        K = marginal_cov(A, L_psi @ L_psi.T, phis)
        try:
            L, _ = chol_with_jitter(K)
        except NumericalError:
            return None
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        return L, logdet, log_prior(z, A, L_psi)

    def loglik(L, logdet, resid):
        alpha = sla.solve_triangular(L, resid, lower=True, check_finite=False)
        return -0.5 * (
            n * m * math.log(2.0 * math.pi) + logdet + float(alpha @ alpha)
        )

    rng = substream(schedule.seed, "fit", spec.family, *spec.outcomes)

    # initialize at per-outcome OLS with an even nugget/spatial split
    beta = np.linalg.lstsq(X, y_vec, rcond=None)[0]
    E = Y - (X @ beta).reshape(n, m)
    psi_hat = E.T @ E / max(n - p // m, 1) + 1e-8 * np.eye(m)
    A0 = np.linalg.cholesky(psi_hat / 2.0)
    L_psi0 = np.linalg.cholesky(psi_hat / 2.0)
    if constrain_diagonal:
        A0 = np.diag(np.sqrt(np.diag(psi_hat) / 2.0))
        L_psi0 = A0.copy()
    z = np.concatenate(
        [
            _z_from_tril(A0),
            _z_from_tril(L_psi0),
            [
                _u_from_phi(math.sqrt(lo * hi), lo, hi)
                for lo, hi in phi_bounds
            ],
        ]
    )
    mask = np.ones(dim)
    if constrain_diagonal:
        mask[:n_tri][m:] = 0.0
        mask[n_tri : 2 * n_tri][m:] = 0.0
        z[:n_tri][m:] = 0.0
        z[n_tri : 2 * n_tri][m:] = 0.0

    resid = y_vec - X @ beta
    parts = factor_at(z)
    if parts is None:
        raise NumericalError("initial covariance not factorizable")
    current_lp = loglik(parts[0], parts[1], resid) + parts[2]
    scales = ProposalScales(
        log_sd=np.full(dim, math.log(init_proposal_sd)), target=schedule.target_accept
    )

    total = schedule.n_total
    beta_chain = np.empty((total, p))
    a_chain = np.empty((total, m, m))
    psi_chain = np.empty((total, m, m))
    phi_chain = np.empty((total, m))
    acceptance: list[float] = []
    it = 0
    for batch in range(schedule.n_batches):
        accepted = 0
        for _ in range(schedule.batch_len):
            proposal = z + mask * scales.sd() * rng.standard_normal(dim)
            prop_parts = factor_at(proposal)
            if prop_parts is not None:
                prop_lp = loglik(prop_parts[0], prop_parts[1], resid) + prop_parts[2]
                if math.log(rng.uniform()) < prop_lp - current_lp:
                    z, parts, current_lp = proposal, prop_parts, prop_lp
                    accepted += 1

            beta = _mv_beta_draw(rng, parts[0], X, y_vec)
            resid = y_vec - X @ beta
            current_lp = loglik(parts[0], parts[1], resid) + parts[2]

            A, L_psi, phis = unpack(z)
            beta_chain[it] = beta
            a_chain[it] = A
            psi_chain[it] = L_psi @ L_psi.T
            phi_chain[it] = phis
            it += 1
        rate = accepted / schedule.batch_len
        acceptance.append(rate)
        if batch < schedule.n_burn_batches:
            scales = adapt_batch(scales, rate)

    kept = postprocess_chain(
        {"beta": beta_chain, "a": a_chain, "psi": psi_chain, "phi": phi_chain},
        schedule,
    )

    # latent-field recovery per retained draw.  The draw w0 + C K^-1 (r - w0
    # - e0) with (w0, e0) fresh prior draws has exactly the conditional law
    # N(C K^-1 r, C - C K^-1 C); this costs one factorization instead of a
    # dense conditional covariance at nm x nm.
    T = kept["beta"].shape[0]
    w_draws = np.empty((T, n * m))
    w_rng = substream(schedule.seed, "w", spec.family, *spec.outcomes)
    for t in range(T):
        A = kept["a"][t]
        psi = kept["psi"][t]
        phis = kept["phi"][t]
        C = lmc_cov(A, phis)
        K = C.copy()
        K4 = K.reshape(n, m, n, m)
        K4[loc, :, loc, :] += psi
        r = y_vec - X @ kept["beta"][t]
        L_C, _ = chol_with_jitter(C)
        w0 = L_C @ w_rng.standard_normal(n * m)
        e0 = (w_rng.standard_normal((n, m)) @ np.linalg.cholesky(psi).T).reshape(-1)
        L_Kt, _ = chol_with_jitter(K)
        half = sla.solve_triangular(L_Kt, r - w0 - e0, lower=True, check_finite=False)
        adj = sla.solve_triangular(L_Kt.T, half, lower=False, check_finite=False)
        w_draws[t] = w0 + C @ adj

    return PosteriorSamples(
        model_spec=spec,
        prior_spec=priors,
        schedule=schedule,
        beta_names=beta_names,
        beta=kept["beta"],
        psi=kept["psi"],
        a_mat=kept["a"],
        phi=kept["phi"],
        w=w_draws,
        plot_ids=tuple(pl.plot_id for pl in dataset.plots),
        coords_km=coords,
        acceptance=tuple(acceptance),
    )


def fit_model(
    dataset: Dataset,
    spec: ModelSpec,
    priors: PriorSpec | None,
    schedule: McmcSchedule,
    **kwargs,
) -> PosteriorSamples:
    """Dispatch to the family-specific fitter; priors default per the data."""
    if priors is None:
        priors = default_priors(dataset, spec)
    fitter = {
        "uni_nonspatial": fit_uni_nonspatial,
        "uni_spatial": fit_uni_spatial,
        "mv_nonspatial": fit_mv_nonspatial,
        "mv_spatial": fit_mv_spatial,
    }[spec.family]
    return fitter(dataset, spec, priors, schedule, **kwargs)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _param_frame(samples: PosteriorSamples) -> pd.DataFrame:
    cols: dict[str, np.ndarray] = {}
    for j, name in enumerate(samples.beta_names):
        cols[f"beta_{name}"] = samples.beta[:, j]
    m = samples.model_spec.m
    if samples.psi is not None:
        for i in range(m):
            for j in range(i + 1):
                cols[f"Psi_{i + 1}_{j + 1}"] = samples.psi[:, i, j]
    if samples.a_mat is not None:
        for i in range(m):
            for j in range(i + 1):
                cols[f"A_{i + 1}_{j + 1}"] = samples.a_mat[:, i, j]
    if samples.tau2 is not None:
        cols[f"tau2_{samples.outcomes[0]}"] = samples.tau2
    if samples.sigma2 is not None:
        cols[f"sigma2_{samples.outcomes[0]}"] = samples.sigma2
    if samples.phi is not None:
        phi = np.atleast_2d(samples.phi.T).T
        if phi.shape[1] == 1:
            cols[f"phi_{samples.outcomes[0]}"] = phi[:, 0]
        else:
            for j, q in enumerate(samples.outcomes):
                cols[f"phi_{q}"] = phi[:, j]
    return pd.DataFrame(cols)


def save_samples(samples: PosteriorSamples, out_dir) -> None:
    """Write params.csv, w.csv (spatial families) and meta.json."""
    samples.validate_draws()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _param_frame(samples).to_csv(out / "params.csv", index=False)
    if samples.w is not None:
        if samples.model_spec.is_mv:
            names = [
                f"w_{pid}_{q}" for pid in samples.plot_ids for q in samples.outcomes
            ]
        else:
            names = [f"w_{pid}" for pid in samples.plot_ids]
        pd.DataFrame(samples.w, columns=names).to_csv(out / "w.csv", index=False)
    meta = {
        "model_spec": samples.model_spec.to_dict(),
        "prior_spec": samples.prior_spec.to_dict(),
        "schedule": samples.schedule.to_dict(),
        "beta_names": list(samples.beta_names),
        "plot_ids": list(samples.plot_ids),
        "coords_km": np.asarray(samples.coords_km).tolist(),
        "acceptance": list(samples.acceptance),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_samples(samples_dir) -> PosteriorSamples:
    """Inverse of save_samples."""
    src = Path(samples_dir)
    meta = json.loads((src / "meta.json").read_text())
    spec = ModelSpec.from_dict(meta["model_spec"])
    priors = PriorSpec.from_dict(meta["prior_spec"])
    schedule = McmcSchedule.from_dict(meta["schedule"])
    params = pd.read_csv(src / "params.csv", float_precision="round_trip")
    m = spec.m
    T = len(params)
    beta = np.column_stack([params[f"beta_{b}"] for b in meta["beta_names"]])

    def tri(prefix):
        out = np.zeros((T, m, m))
        for i in range(m):
            for j in range(i + 1):
                out[:, i, j] = params[f"{prefix}_{i + 1}_{j + 1}"]
                out[:, j, i] = out[:, i, j]
        return out

    tau2 = sigma2 = psi = a_mat = phi = w = None
    if spec.is_mv:
        psi = tri("Psi")
        if spec.is_spatial:
            a_mat = np.tril(tri("A"))
            phi = np.column_stack([params[f"phi_{q}"] for q in spec.outcomes])
    else:
        q = spec.outcomes[0]
        tau2 = params[f"tau2_{q}"].to_numpy()
        if spec.is_spatial:
            sigma2 = params[f"sigma2_{q}"].to_numpy()
            phi = params[f"phi_{q}"].to_numpy()
    if spec.is_spatial:
        w = pd.read_csv(src / "w.csv", float_precision="round_trip").to_numpy()
    return PosteriorSamples(
        model_spec=spec,
        prior_spec=priors,
        schedule=schedule,
        beta_names=tuple(meta["beta_names"]),
        beta=beta,
        tau2=tau2,
        sigma2=sigma2,
        psi=psi,
        a_mat=a_mat,
        phi=phi,
        w=w,
        plot_ids=tuple(meta["plot_ids"]),
        coords_km=np.asarray(meta["coords_km"]),
        acceptance=tuple(meta["acceptance"]),
    )
