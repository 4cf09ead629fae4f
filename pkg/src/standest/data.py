"""Domain data model: inventory plots, prediction units, outcome transforms,
and the algebraic stand-structure identities linking QMD, BA, and stem density.

Canonical outcome names are ``GSV`` (m3/ha), ``QMD`` (cm), ``BA`` (m2/ha) and
``N`` (stems/ha).  The model block order is fixed as (GSV, QMD, BA); N is
always derived, never modeled.  Coordinates are carried in meters at the I/O
boundary and converted to kilometers inside the spatial machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DomainError, ValidationError

OUTCOME_ORDER = ("GSV", "QMD", "BA")
ALL_OUTCOMES = ("GSV", "QMD", "BA", "N")


# ---------------------------------------------------------------------------
# stand-structure identities
# ---------------------------------------------------------------------------

def compute_qmd(dbh_list: Sequence[float]) -> float:
    """Quadratic mean diameter (cm) of a tree list: sqrt(mean(DBH^2))."""
    dbh = np.asarray(dbh_list, dtype=float)
    if dbh.size == 0:
        raise DomainError("compute_qmd: empty DBH list")
    if np.any(dbh <= 0) or not np.all(np.isfinite(dbh)):
        raise ValidationError("compute_qmd: DBH values must be positive and finite")
    return float(np.sqrt(np.mean(dbh**2)))


def compute_ba(dbh_list: Sequence[float], plot_area_ha: float) -> float:
    """Basal area (m2/ha): (pi/4) * sum((DBH/100)^2) / area."""
    dbh = np.asarray(dbh_list, dtype=float)
    if dbh.size == 0:
        raise DomainError("compute_ba: empty DBH list")
    if np.any(dbh <= 0) or not np.all(np.isfinite(dbh)):
        raise ValidationError("compute_ba: DBH values must be positive and finite")
    if not plot_area_ha > 0:
        raise DomainError("compute_ba: plot area must be positive")
    return float(math.pi / 4.0 * np.sum((dbh / 100.0) ** 2) / plot_area_ha)


def derive_stem_density(ba: float, qmd: float) -> float:
    """Stems per hectare implied by BA and QMD: N = BA / ((pi/4)(QMD/100)^2).

    Exact algebraic inverse of the QMD/BA definitions: for any tree list,
    derive_stem_density(BA, QMD) reproduces the tree count per hectare.
    Vectorized over array inputs.
    """
    ba_arr = np.asarray(ba, dtype=float)
    qmd_arr = np.asarray(qmd, dtype=float)
    if np.any(ba_arr <= 0) or np.any(qmd_arr <= 0):
        raise DomainError("derive_stem_density: BA and QMD must be positive")
    out = ba_arr / (math.pi / 4.0 * (qmd_arr / 100.0) ** 2)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlotObservation:
    """One inventory plot: location (m), positive outcomes, predictors."""

    plot_id: str
    coords: tuple[float, float]
    outcomes: Mapping[str, float]
    predictors: Mapping[str, float]


@dataclass(frozen=True)
class PredictionUnit:
    """One grid cell: centroid (m), stand membership, in-stand area (m2)."""

    unit_id: str
    stand_id: str
    coords: tuple[float, float]
    area: float
    predictors: Mapping[str, float]


@dataclass(frozen=True)
class OutcomeTransform:
    """Per-outcome transform flags; ``log`` or ``identity``."""

    kinds: Mapping[str, str]

    def __post_init__(self) -> None:
        for name, kind in self.kinds.items():
            if kind not in ("log", "identity"):
                raise ValidationError(f"unknown transform kind {kind!r} for {name}")

    def kind(self, outcome: str) -> str:
        return self.kinds.get(outcome, "identity")

    def apply(self, outcome: str, values):
        values = np.asarray(values, dtype=float)
        if self.kind(outcome) == "log":
            if np.any(values <= 0):
                raise DomainError(
                    f"log transform of non-positive {outcome} value"
                )
            return np.log(values)
        return values

    def invert(self, outcome: str, values):
        values = np.asarray(values, dtype=float)
        if self.kind(outcome) == "log":
            return np.exp(values)
        return values


def log_transform(outcomes: Iterable[str] = OUTCOME_ORDER) -> OutcomeTransform:
    """Log transform on every listed outcome (the standard model scale)."""
    return OutcomeTransform({name: "log" for name in outcomes})


@dataclass(frozen=True)
class Dataset:
    """Plots plus (optionally empty) prediction units with fixed name order."""

    plots: tuple[PlotObservation, ...]
    units: tuple[PredictionUnit, ...]
    outcome_names: tuple[str, ...]
    predictor_names: tuple[str, ...]
    notes: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if len(self.plots) < 2:
            raise ValidationError("dataset requires at least 2 plots")
        ids = [p.plot_id for p in self.plots]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate plot_id in dataset")
        coords = self.plot_coords_m()
        d2 = np.sum((coords[:, None, :] - coords[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        if np.min(d2) <= 0.0:
            raise ValidationError("dataset contains duplicate plot coordinates")

    @property
    def n_plots(self) -> int:
        return len(self.plots)

    def plot_coords_m(self) -> np.ndarray:
        return np.array([p.coords for p in self.plots], dtype=float)

    def plot_coords_km(self) -> np.ndarray:
        return self.plot_coords_m() / 1000.0

    def unit_coords_m(self) -> np.ndarray:
        return np.array([u.coords for u in self.units], dtype=float)

    def outcome_matrix(self, names: Sequence[str] | None = None) -> np.ndarray:
        """n x m matrix of plot outcomes in the given (default model) order."""
        names = tuple(names) if names is not None else self.outcome_names
        return np.array(
            [[p.outcomes[name] for name in names] for p in self.plots], dtype=float
        )

    def predictor_matrix(self, names: Sequence[str]) -> np.ndarray:
        return np.array(
            [[p.predictors[name] for name in names] for p in self.plots], dtype=float
        )

    def unit_predictor_matrix(self, names: Sequence[str]) -> np.ndarray:
        return np.array(
            [[u.predictors[name] for name in names] for u in self.units], dtype=float
        )

    def stand_ids(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for u in self.units:
            seen.setdefault(u.stand_id, None)
        return tuple(seen)

    def max_plot_distance_km(self) -> float:
        coords = self.plot_coords_km()
        diff = coords[:, None, :] - coords[None, :, :]
        return float(np.sqrt(np.max(np.sum(diff**2, axis=-1))))


def transform_outcomes(dataset: Dataset, transform: OutcomeTransform) -> Dataset:
    """Dataset with plot outcomes mapped to the model scale."""
    new_plots = []
    for p in dataset.plots:
        new_outcomes = {
            name: float(transform.apply(name, value))
            for name, value in p.outcomes.items()
        }
        new_plots.append(replace(p, outcomes=new_outcomes))
    return replace(dataset, plots=tuple(new_plots))


# ---------------------------------------------------------------------------
# file ingestion
# ---------------------------------------------------------------------------

def _read_csv(path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str)
    except FileNotFoundError as exc:
        raise ValidationError(f"file not found: {path}") from exc
    except pd.errors.EmptyDataError as exc:
        raise ValidationError(f"empty file: {path}") from exc
    if frame.empty:
        raise ValidationError(f"no data rows in {path}")
    return frame


def _require_columns(frame: pd.DataFrame, required: Sequence[str], path) -> None:
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")


def _parse_float(frame: pd.DataFrame, row: int, column: str, path) -> float:
    raw = frame.at[row, column]
    try:
        value = float(raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(
            f"{path}: non-numeric value {raw!r} at row {row + 2}, column {column}"
        ) from exc
    if not math.isfinite(value):
        raise ValidationError(
            f"{path}: non-finite value at row {row + 2}, column {column}"
        )
    return value


def _match_outcome_columns(
    frame: pd.DataFrame, outcomes: Sequence[str], path
) -> dict[str, str]:
    """Map canonical outcome names to file columns, case-insensitively."""
    lower = {c.lower(): c for c in frame.columns}
    mapping = {}
    for name in outcomes:
        if name.lower() not in lower:
            raise ValidationError(f"{path}: missing column(s) {name.lower()}")
        mapping[name] = lower[name.lower()]
    return mapping


def load_plots(
    path,
    outcomes: Sequence[str] = ALL_OUTCOMES,
    predictors: Sequence[str] = (),
) -> tuple[PlotObservation, ...]:
    """Read and validate a plot table (plot_id,x,y,<outcomes...>,<predictors...>).

    Outcome columns are matched case-insensitively against the canonical
    names; predictor columns must match exactly.  Any malformed record raises
    ValidationError naming the row and column; nothing is partially loaded.
    """
    frame = _read_csv(path)
    _require_columns(frame, ["plot_id", "x", "y"], path)
    out_cols = _match_outcome_columns(frame, outcomes, path)
    _require_columns(frame, list(predictors), path)

    plots = []
    seen_ids: set[str] = set()
    for row in range(len(frame)):
        plot_id = str(frame.at[row, "plot_id"])
        if plot_id in seen_ids:
            raise ValidationError(
                f"{path}: duplicate plot_id {plot_id!r} at row {row + 2}"
            )
        seen_ids.add(plot_id)
        x = _parse_float(frame, row, "x", path)
        y = _parse_float(frame, row, "y", path)
        outcome_values = {}
        for name, col in out_cols.items():
            value = _parse_float(frame, row, col, path)
            if value <= 0:
                raise ValidationError(
                    f"{path}: non-positive {name} at row {row + 2}, column {col}"
                )
            outcome_values[name] = value
        predictor_values = {
            name: _parse_float(frame, row, name, path) for name in predictors
        }
        plots.append(
            PlotObservation(plot_id, (x, y), outcome_values, predictor_values)
        )
    return tuple(plots)


def load_units(
    path,
    predictors: Sequence[str] = (),
) -> tuple[PredictionUnit, ...]:
    """Read and validate a prediction-unit table
    (unit_id,stand_id,x,y,area,<predictors...>)."""
    frame = _read_csv(path)
    _require_columns(frame, ["unit_id", "stand_id", "x", "y", "area"], path)
    _require_columns(frame, list(predictors), path)

    units = []
    seen_ids: set[str] = set()
    for row in range(len(frame)):
        unit_id = str(frame.at[row, "unit_id"])
        if unit_id in seen_ids:
            raise ValidationError(
                f"{path}: duplicate unit_id {unit_id!r} at row {row + 2}"
            )
        seen_ids.add(unit_id)
        stand_id = str(frame.at[row, "stand_id"])
        x = _parse_float(frame, row, "x", path)
        y = _parse_float(frame, row, "y", path)
        area = _parse_float(frame, row, "area", path)
        if area <= 0:
            raise ValidationError(
                f"{path}: non-positive area at row {row + 2}, column area"
            )
        predictor_values = {
            name: _parse_float(frame, row, name, path) for name in predictors
        }
        units.append(
            PredictionUnit(unit_id, stand_id, (x, y), area, predictor_values)
        )
    return tuple(units)


def load_dataset(
    plots_path,
    units_path=None,
    outcomes: Sequence[str] = ALL_OUTCOMES,
    predictors: Sequence[str] = (),
    model_outcomes: Sequence[str] = OUTCOME_ORDER,
) -> Dataset:
    """Load plots (and optionally units) into a validated Dataset."""
    plots = load_plots(plots_path, outcomes=outcomes, predictors=predictors)
    units: tuple[PredictionUnit, ...] = ()
    if units_path is not None:
        units = load_units(units_path, predictors=predictors)
    return Dataset(
        plots=plots,
        units=units,
        outcome_names=tuple(model_outcomes),
        predictor_names=tuple(predictors),
        notes=(
            "plot outcomes taken at native plot support; no radius "
            "re-harmonization applied at ingestion",
        ),
    )
