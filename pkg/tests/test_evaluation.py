"""Hex blocking, fold assignment, CV metrics, correlation recovery."""

import math

import numpy as np
import pytest

from standest.data import Dataset, PlotObservation, load_dataset, log_transform
from standest.errors import ConfigError, DomainError
from standest.evaluation import (
    CandidateModel,
    assign_hex_blocks,
    bayesian_r2,
    correlation_ppd,
    cv_metrics,
    empirical_correlations,
    make_folds,
    run_spatial_cv,
)
from standest.samplers import (
    McmcSchedule,
    ModelSpec,
    PosteriorSamples,
    PriorSpec,
    default_priors,
    fit_uni_nonspatial,
)
from standest.simulate import PredictorField, SimConfig, generate

SQRT3 = math.sqrt(3.0)


def _plots(coords, prefix="p"):
    return tuple(
        PlotObservation(f"{prefix}{i}", (float(x), float(y)), {"GSV": 1.0 + i}, {})
        for i, (x, y) in enumerate(coords)
    )


# ---------------------------------------------------------------------------
# hex blocking
# ---------------------------------------------------------------------------

def test_all_plots_in_one_hex():
    # cluster well inside the inradius of one 250 m cell
    coords = [(10.0, 12.0), (30.0, 25.0), (45.0, 8.0)]
    blocking = assign_hex_blocks(_plots(coords), 250.0, origin=(0.0, 0.0))
    assert len(set(blocking.assignment.values())) == 1


def test_distant_plots_in_different_blocks():
    coords = [(0.0, 0.0), (1000.0, 0.0)]
    blocking = assign_hex_blocks(_plots(coords), 250.0, origin=(0.0, 0.0))
    ids = list(blocking.assignment.values())
    assert ids[0] != ids[1]


def test_boundary_tie_goes_to_lower_axial_index():
    c = 250.0
    # midpoint between the centers of hexes (0,0) and (1,0)
    coords = [(c / 2.0, 0.0), (5.0, 5.0)]
    blocking = assign_hex_blocks(_plots(coords), c, origin=(0.0, 0.0))
    assert blocking.assignment["p0"] == "h0_0"


def test_blocking_deterministic_under_origin():
    rng = np.random.default_rng(0)
    coords = rng.uniform(0, 2000, size=(50, 2))
    plots = _plots(coords)
    b1 = assign_hex_blocks(plots, 250.0, origin=(0.0, 0.0))
    b2 = assign_hex_blocks(plots, 250.0, origin=(0.0, 0.0))
    assert b1.assignment == b2.assignment


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

def _brixen_like_plots(n=146, seed=1):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, 2400, size=(n, 2))
    return _plots(coords)


def test_fold_sizes_near_n_over_k():
    plots = _brixen_like_plots()
    blocking = assign_hex_blocks(plots, 250.0)
    folds = make_folds(blocking, 20, seed=42)
    sizes = np.bincount(list(folds.plot_fold().values()))[1:]
    assert len(sizes) == 20
    assert np.all(sizes >= 4) and np.all(sizes <= 10)  # about 7 +/- 3


def test_fold_partition_is_disjoint_and_complete():
    plots = _brixen_like_plots(seed=2)
    blocking = assign_hex_blocks(plots, 250.0)
    folds = make_folds(blocking, 10, seed=3)
    assignment = folds.plot_fold()
    assert set(assignment) == {p.plot_id for p in plots}
    assert set(assignment.values()) <= set(range(1, 11))


def test_one_block_per_fold_when_k_equals_blocks():
    coords = [(i * 1000.0, 0.0) for i in range(6)]
    blocking = assign_hex_blocks(_plots(coords), 250.0)
    folds = make_folds(blocking, 6, seed=4)
    assert sorted(folds.block_fold.values()) == [1, 2, 3, 4, 5, 6]


def test_folds_deterministic_in_seed():
    plots = _brixen_like_plots(seed=5)
    blocking = assign_hex_blocks(plots, 250.0)
    f1 = make_folds(blocking, 12, seed=9)
    f2 = make_folds(blocking, 12, seed=9)
    f3 = make_folds(blocking, 12, seed=10)
    assert f1.block_fold == f2.block_fold
    assert f1.block_fold != f3.block_fold


def test_too_few_blocks_errors():
    coords = [(0.0, 0.0), (10.0, 0.0)]
    blocking = assign_hex_blocks(_plots(coords), 250.0)
    with pytest.raises(ConfigError):
        make_folds(blocking, 5, seed=0)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_metrics_perfect_predictions():
    rng = np.random.default_rng(6)
    obs = rng.uniform(10, 20, size=8)
    draws = obs[None, :] + rng.normal(scale=1.0, size=(500, 8))
    draws = draws - draws.mean(axis=0) + obs[None, :]  # center exactly on obs
    row = cv_metrics(obs, draws, "block")
    assert row["bias"] == pytest.approx(0.0, abs=1e-12)
    assert row["rmspe"] == pytest.approx(0.0, abs=1e-12)
    assert row["coverage95_pct"] == 100.0
    assert row["ci_width95"] > 0.0


def test_metrics_constant_offset():
    obs = np.array([100.0])
    draws = np.full((200, 1), 110.0)
    row = cv_metrics(obs, draws, "unit")
    assert row["bias"] == pytest.approx(10.0)
    assert row["bias_pct"] == pytest.approx(10.0)
    assert row["rmspe"] == pytest.approx(10.0)
    assert row["rmspe_pct"] == pytest.approx(10.0)
    assert row["coverage95_pct"] == 0.0


def test_metrics_two_target_hand_oracle():
    obs = np.array([10.0, 30.0])
    draws = np.stack(
        [np.full(400, 12.0), np.full(400, 27.0)], axis=1
    ) + np.random.default_rng(7).normal(scale=0.5, size=(400, 2))
    point = draws.mean(axis=0)
    err = point - obs
    row = cv_metrics(obs, draws, "unit")
    assert row["bias"] == pytest.approx(err.mean())
    assert row["bias_pct"] == pytest.approx(100 * err.mean() / 20.0)
    assert row["rmspe"] == pytest.approx(math.sqrt((err**2).mean()))


def test_metric_identity_rmspe_decomposition():
    rng = np.random.default_rng(8)
    obs = rng.uniform(0, 50, size=30)
    draws = rng.normal(size=(300, 30)) + rng.uniform(-5, 5, size=30)[None, :]
    row = cv_metrics(obs, draws, "block")
    err = draws.mean(axis=0) - obs
    assert row["rmspe"] ** 2 == pytest.approx(
        row["bias"] ** 2 + err.var(), abs=1e-10
    )
    assert row["rmspe"] >= abs(row["bias"])


# ---------------------------------------------------------------------------
# Bayesian R^2
# ---------------------------------------------------------------------------

def _regression_dataset(n, beta1, tau, seed):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, 3000, size=(n, 2))
    x1 = rng.normal(size=n)
    plots = tuple(
        PlotObservation(
            f"p{i}",
            (coords[i, 0], coords[i, 1]),
            {"GSV": float(np.exp(1.0 + beta1 * x1[i] + rng.normal(scale=tau)))},
            {"x1": float(x1[i])},
        )
        for i in range(n)
    )
    from standest.data import transform_outcomes

    ds = Dataset(plots, (), ("GSV",), ("x1",))
    return transform_outcomes(ds, log_transform(("GSV",)))


def test_r2_approaches_one_as_residual_vanishes():
    ds = _regression_dataset(80, beta1=1.0, tau=1e-6, seed=9)
    spec = ModelSpec("uni_nonspatial", ("GSV",), {"GSV": ("x1",)})
    sched = McmcSchedule(n_batches=50, batch_len=10, burn_in_frac=0.5, thin=1, seed=1)
    priors = PriorSpec(tau2={"GSV": (1e7, 1e7 * 1e-12)})
    samples = fit_uni_nonspatial(ds, spec, priors, sched)
    r2 = bayesian_r2(samples, ds)["GSV"]
    assert np.median(r2) > 0.999


def test_r2_intercept_only_is_zero():
    ds = _regression_dataset(60, beta1=0.8, tau=0.3, seed=10)
    spec = ModelSpec("uni_nonspatial", ("GSV",), {"GSV": ()})
    sched = McmcSchedule(n_batches=50, batch_len=10, burn_in_frac=0.5, thin=1, seed=2)
    samples = fit_uni_nonspatial(ds, spec, default_priors(ds, spec), sched)
    r2 = bayesian_r2(samples, ds)["GSV"]
    assert np.max(r2) < 1e-12  # constant fitted values carry no variance


def test_r2_recovers_three_to_one_split():
    tau = 0.4
    ds = _regression_dataset(600, beta1=math.sqrt(3) * tau, tau=tau, seed=11)
    spec = ModelSpec("uni_nonspatial", ("GSV",), {"GSV": ("x1",)})
    sched = McmcSchedule(n_batches=150, batch_len=10, burn_in_frac=0.5, thin=2, seed=3)
    samples = fit_uni_nonspatial(ds, spec, default_priors(ds, spec), sched)
    r2 = bayesian_r2(samples, ds)["GSV"]
    assert np.median(r2) == pytest.approx(0.75, abs=0.05)


# ---------------------------------------------------------------------------
# correlation-matrix PPD
# ---------------------------------------------------------------------------

def test_correlation_ppd_identity_case():
    rng = np.random.default_rng(12)
    obs = rng.uniform(1, 10, size=(25, 4))
    empirical = np.corrcoef(obs, rowvar=False)
    draws = np.tile(obs[None, :, :], (50, 1, 1))
    ppd = correlation_ppd(draws, empirical)
    assert np.allclose(ppd.mean, empirical, atol=1e-12)
    assert np.all(ppd.contained)


def test_correlation_ppd_independent_noise_misses_strong_correlation():
    rng = np.random.default_rng(13)
    empirical = np.eye(4)
    empirical[0, 2] = empirical[2, 0] = 0.95  # strong observed pair
    draws = rng.normal(size=(200, 40, 4))
    ppd = correlation_ppd(draws, empirical)
    assert not ppd.contained[0, 2]
    assert abs(ppd.mean[0, 2]) < 0.15


def test_correlation_ppd_draws_are_valid_matrices():
    rng = np.random.default_rng(14)
    draws = rng.normal(size=(100, 30, 4))
    ppd = correlation_ppd(draws, np.eye(4))
    for t in range(0, 100, 10):
        mat = ppd.draws[t]
        assert np.allclose(np.diag(mat), 1.0)
        assert np.all(np.abs(mat) <= 1.0 + 1e-12)
        assert np.min(np.linalg.eigvalsh(mat)) > -1e-10


def test_correlation_ppd_needs_three_locations():
    with pytest.raises(DomainError):
        correlation_ppd(np.zeros((10, 2, 4)), np.eye(4))


def test_empirical_correlations_derive_n():
    rng = np.random.default_rng(15)
    coords = rng.uniform(0, 1000, size=(30, 2))
    plots = tuple(
        PlotObservation(
            f"p{i}",
            (coords[i, 0], coords[i, 1]),
            {
                "GSV": float(rng.uniform(100, 900)),
                "QMD": float(rng.uniform(15, 50)),
                "BA": float(rng.uniform(10, 80)),
            },
            {},
        )
        for i in range(30)
    )
    ds = Dataset(plots, (), ("GSV", "QMD", "BA"), ())
    corr = empirical_correlations(ds)
    assert corr.shape == (4, 4)
    assert np.allclose(np.diag(corr), 1.0)


# ---------------------------------------------------------------------------
# CV driver
# ---------------------------------------------------------------------------

def _mini_sim(tmp_path, seed=21, n=40):
    config = SimConfig(
        family="uni_spatial",
        n_plots=n,
        extent_km=1.5,
        seed=seed,
        outcomes=("GSV", "QMD", "BA"),
        predictors=(PredictorField("hmean", decay_km=1.2, sd=1.0, noise_sd=0.1),),
        beta={"GSV": (6.0, 0.4), "QMD": (3.3, 0.2), "BA": (3.7, 0.3)},
        tau2={"GSV": 0.02, "QMD": 0.02, "BA": 0.02},
        sigma2={"GSV": 0.04, "QMD": 0.03, "BA": 0.04},
        phi={"GSV": 4.0, "QMD": 4.0, "BA": 4.0},
        make_units=False,
    )
    plots, _, _ = generate(config)
    path = tmp_path / "plots.csv"
    plots.to_csv(path, index=False)
    return load_dataset(path, predictors=("hmean",))


def test_run_spatial_cv_mini(tmp_path):
    dataset = _mini_sim(tmp_path)
    blocking = assign_hex_blocks(dataset.plots, 300.0)
    folds = make_folds(blocking, 4, seed=1)
    sched = McmcSchedule(n_batches=30, batch_len=10, burn_in_frac=0.5, thin=1, seed=2)
    candidates = [
        CandidateModel("uni_nonspatial", "intercept_only", {q: () for q in ("GSV", "QMD", "BA")}),
        CandidateModel("uni_nonspatial", "all_predictors", {q: ("hmean",) for q in ("GSV", "QMD", "BA")}),
    ]
    result = run_spatial_cv(
        dataset, candidates, None, sched, folds, log_transform(("GSV", "QMD", "BA"))
    )
    assert result.failures == []
    # 2 candidates x 4 outcomes x 2 levels
    assert len(result.report) == 16
    assert set(result.report["level"]) == {"block", "unit"}
    assert len(result.folds) == dataset.n_plots
    assert set(result.corr) == {c.label for c in candidates}
    assert len(result.audit) == 4
    assert np.all(result.audit["min_train_dist_m"] > 0)


def test_run_spatial_cv_parallel_matches_serial(tmp_path):
    dataset = _mini_sim(tmp_path, seed=22, n=30)
    blocking = assign_hex_blocks(dataset.plots, 300.0)
    folds = make_folds(blocking, 3, seed=5)
    sched = McmcSchedule(n_batches=20, batch_len=10, burn_in_frac=0.5, thin=1, seed=6)
    candidates = [
        CandidateModel("uni_nonspatial", "all_predictors", {q: ("hmean",) for q in ("GSV", "QMD", "BA")}),
    ]
    tr = log_transform(("GSV", "QMD", "BA"))
    serial = run_spatial_cv(dataset, candidates, None, sched, folds, tr, n_jobs=1)
    parallel = run_spatial_cv(dataset, candidates, None, sched, folds, tr, n_jobs=2)
    assert serial.report.equals(parallel.report)


def test_leakage_audit_bounded_by_inradius_for_center_placed_plots():
    # plots exactly at hex centers: any cross-block pair is >= one cell apart
    c = 250.0
    radius = c / SQRT3
    coords = []
    for q in range(5):
        for r in range(5):
            coords.append((radius * SQRT3 * (q + r / 2.0), radius * 1.5 * r))
    rng = np.random.default_rng(16)
    plots = tuple(
        PlotObservation(
            f"p{i}",
            c_,
            {
                "GSV": float(rng.uniform(100, 500)),
                "QMD": float(rng.uniform(20, 40)),
                "BA": float(rng.uniform(20, 60)),
            },
            {},
        )
        for i, c_ in enumerate(coords)
    )
    dataset = Dataset(plots, (), ("GSV", "QMD", "BA"), ())
    blocking = assign_hex_blocks(dataset.plots, c, origin=(0.0, 0.0))
    assert len(set(blocking.assignment.values())) == 25  # one plot per block
    folds = make_folds(blocking, 5, seed=7)
    sched = McmcSchedule(n_batches=20, batch_len=10, burn_in_frac=0.5, thin=1, seed=8)
    candidates = [
        CandidateModel("uni_nonspatial", "intercept_only", {q: () for q in ("GSV", "QMD", "BA")}),
    ]
    result = run_spatial_cv(
        dataset, candidates, None, sched, folds, log_transform(("GSV", "QMD", "BA"))
    )
    assert np.all(result.audit["min_train_dist_m"] >= blocking.inradius - 1e-9)
