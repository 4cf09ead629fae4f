"""Synthetic plot/grid generation for oracles, calibration, and demos.

Predictor surfaces are Gaussian random fields (random Fourier feature
construction, cheap at any scale) plus white noise; the latent spatial field
is drawn exactly from the specified GP or coregionalized model jointly over
plots and prediction units, so generated datasets follow the generative model
to machine precision.  The joint draw is cubic in (plots + units) x outcomes;
keep grids modest.

Outcomes are written on the original (exponentiated) scale in the same CSV
schema the loaders read, with per-plot stem density derived from BA and QMD.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .data import derive_stem_density
from .errors import ConfigError
from .rng import substream
from .spatial import LmcSpec, build_corr_matrix, build_lmc_cov, chol_with_jitter

SIM_FAMILIES = ("uni_nonspatial", "uni_spatial", "mv_nonspatial", "mv_spatial")


@dataclass(frozen=True)
class PredictorField:
    """One synthetic predictor: smooth Gaussian field plus white noise."""

    name: str
    decay_km: float = 1.0
    sd: float = 1.0
    noise_sd: float = 0.1
    mean: float = 0.0


@dataclass(frozen=True)
class SimConfig:
    """Ground truth for one synthetic dataset.

    ``beta`` maps each outcome to (intercept, one coefficient per predictor
    field, in order).  Spatial variance parameters may be zero, which
    collapses the field to the corresponding non-spatial model.
    """

    family: str
    n_plots: int
    extent_km: float
    seed: int
    outcomes: tuple[str, ...]
    predictors: tuple[PredictorField, ...]
    beta: Mapping[str, tuple[float, ...]]
    tau2: Mapping[str, float] | None = None      # uni families
    sigma2: Mapping[str, float] | None = None    # uni_spatial
    phi: Mapping[str, float] | None = None       # spatial families
    psi: np.ndarray | None = None                # mv families
    a_mat: np.ndarray | None = None              # mv_spatial, lower triangular
    grid_cell_m: float = 100.0
    stand_cells: int = 4
    make_units: bool = True

    def __post_init__(self) -> None:
        if self.family not in SIM_FAMILIES:
            raise ConfigError(f"unknown generator family {self.family!r}")
        if self.n_plots < 2 or self.extent_km <= 0:
            raise ConfigError("need n_plots >= 2 and positive extent")
        for q in self.outcomes:
            want = 1 + len(self.predictors)
            if len(self.beta.get(q, ())) != want:
                raise ConfigError(f"beta[{q}] must have {want} entries")
        if self.family.startswith("uni"):
            if self.tau2 is None or any(self.tau2[q] <= 0 for q in self.outcomes):
                raise ConfigError("uni families need positive tau2 per outcome")
        if self.family == "uni_spatial":
            if self.sigma2 is None or self.phi is None:
                raise ConfigError("uni_spatial needs sigma2 and phi")
            if any(self.sigma2[q] < 0 for q in self.outcomes):
                raise ConfigError("sigma2 must be nonnegative")
            if any(self.phi[q] <= 0 for q in self.outcomes):
                raise ConfigError("phi must be positive")
        if self.family.startswith("mv"):
            if self.psi is None:
                raise ConfigError("mv families need psi")
            np.linalg.cholesky(np.asarray(self.psi))
        if self.family == "mv_spatial":
            if self.a_mat is None or self.phi is None:
                raise ConfigError("mv_spatial needs a_mat and phi")

    def truth(self) -> dict:
        out = {
            "family": self.family,
            "n_plots": self.n_plots,
            "extent_km": self.extent_km,
            "seed": self.seed,
            "outcomes": list(self.outcomes),
            "predictors": [f.name for f in self.predictors],
            "beta": {q: list(v) for q, v in self.beta.items()},
        }
        for name in ("tau2", "sigma2", "phi"):
            value = getattr(self, name)
            if value is not None:
                out[name] = {q: float(v) for q, v in value.items()}
        if self.psi is not None:
            out["psi"] = np.asarray(self.psi).tolist()
        if self.a_mat is not None:
            out["a_mat"] = np.asarray(self.a_mat).tolist()
        return out


def _fourier_field(
    rng: np.random.Generator, coords_km: np.ndarray, spec: PredictorField
) -> np.ndarray:
    """Stationary Gaussian field via 256 random cosine features."""
    n_feat = 256
    omega = rng.normal(scale=spec.decay_km, size=(n_feat, 2))
    phase = rng.uniform(0.0, 2.0 * math.pi, size=n_feat)
    amp = spec.sd * math.sqrt(2.0 / n_feat) * rng.standard_normal(n_feat)
    values = np.cos(coords_km @ omega.T + phase) @ amp
    return spec.mean + values + rng.normal(scale=spec.noise_sd, size=coords_km.shape[0])


def _latent_field(
    config: SimConfig, rng: np.random.Generator, coords_km: np.ndarray
) -> np.ndarray:
    """Exact joint latent draw at all locations: (n_all, m), zeros for
    non-spatial generators or zero spatial variance."""
    n_all = coords_km.shape[0]
    m = len(config.outcomes)
    w = np.zeros((n_all, m))
    if config.family == "uni_spatial":
        for j, q in enumerate(config.outcomes):
            s2 = config.sigma2[q]
            if s2 == 0.0:
                continue
            C = s2 * build_corr_matrix(coords_km, config.phi[q])
            L, _ = chol_with_jitter(C)
            w[:, j] = L @ rng.standard_normal(n_all)
    elif config.family == "mv_spatial":
        lmc = LmcSpec(
            A=np.asarray(config.a_mat, dtype=float),
            phis=np.array([config.phi[q] for q in config.outcomes]),
        )
        C = build_lmc_cov(coords_km, lmc)
        L, _ = chol_with_jitter(C)
        w = (L @ rng.standard_normal(n_all * m)).reshape(n_all, m)
    return w


def generate(config: SimConfig):
    """Generate (plots_frame, units_frame, truth) for the configuration."""
    rng = substream(config.seed, "sim")
    extent_m = config.extent_km * 1000.0
    plot_xy = rng.uniform(0.0, extent_m, size=(config.n_plots, 2))

    unit_rows = []
    if config.make_units:
        n_side = max(int(extent_m // config.grid_cell_m), 1)
        centers = (np.arange(n_side) + 0.5) * config.grid_cell_m
        for iy, cy in enumerate(centers):
            for ix, cx in enumerate(centers):
                stand = f"s{iy // config.stand_cells}_{ix // config.stand_cells}"
                unit_rows.append(
                    {
                        "unit_id": f"u{iy}_{ix}",
                        "stand_id": stand,
                        "x": cx,
                        "y": cy,
                        "area": config.grid_cell_m**2,
                    }
                )
    units_frame = pd.DataFrame(unit_rows)

    n_units = len(unit_rows)
    all_xy = plot_xy
    if n_units:
        unit_xy = units_frame[["x", "y"]].to_numpy()
        all_xy = np.vstack([plot_xy, unit_xy])
    all_km = all_xy / 1000.0

    predictor_values = {
        f.name: _fourier_field(rng, all_km, f) for f in config.predictors
    }
    w_all = _latent_field(config, rng, all_km)

    m = len(config.outcomes)
    n = config.n_plots
    X_cols = np.column_stack(
        [np.ones(n + n_units)]
        + [predictor_values[f.name] for f in config.predictors]
    )
    mean_model = np.column_stack(
        [X_cols @ np.asarray(config.beta[q], dtype=float) for q in config.outcomes]
    )

    if config.family.startswith("mv"):
        L_psi = np.linalg.cholesky(np.asarray(config.psi, dtype=float))
        eps = rng.standard_normal((n, m)) @ L_psi.T
    else:
        sds = np.array([math.sqrt(config.tau2[q]) for q in config.outcomes])
        eps = rng.standard_normal((n, m)) * sds

    y_model = mean_model[:n] + w_all[:n] + eps
    y_orig = np.exp(y_model)

    plots = {"plot_id": [f"p{i:04d}" for i in range(n)],
             "x": plot_xy[:, 0], "y": plot_xy[:, 1]}
    for j, q in enumerate(config.outcomes):
        plots[q.lower()] = y_orig[:, j]
    if "BA" in config.outcomes and "QMD" in config.outcomes and "N" not in config.outcomes:
        ba = y_orig[:, config.outcomes.index("BA")]
        qmd = y_orig[:, config.outcomes.index("QMD")]
        plots["n"] = derive_stem_density(ba, qmd)
    for f in config.predictors:
        plots[f.name] = predictor_values[f.name][:n]
    plots_frame = pd.DataFrame(plots)

    if n_units:
        for f in config.predictors:
            units_frame[f.name] = predictor_values[f.name][n:]

    truth = config.truth()
    truth["latent_plot_sd"] = (
        np.std(w_all[:n], axis=0).tolist() if w_all.size else []
    )
    return plots_frame, units_frame, truth


def write_simulation(config: SimConfig, out_dir) -> dict:
    """Write plots.csv, units.csv (optional) and truth.json; returns truth."""
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plots_frame, units_frame, truth = generate(config)
    plots_frame.to_csv(out / "plots.csv", index=False)
    if len(units_frame):
        units_frame.to_csv(out / "units.csv", index=False)
    (out / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True))
    return truth
