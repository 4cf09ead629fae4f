"""Schedules, adaptation, conjugate correctness, priors, serialization."""

import math

import numpy as np
import pytest
from scipy.stats import invgamma, kstest, norm, t as student_t

from standest.data import Dataset, PlotObservation
from standest.errors import ConfigError, ValidationError
from standest.samplers import (
    McmcSchedule,
    ModelSpec,
    PosteriorSamples,
    PriorSpec,
    ProposalScales,
    adapt_batch,
    default_priors,
    fit_mv_nonspatial,
    fit_uni_nonspatial,
    fit_uni_spatial,
    load_samples,
    postprocess_chain,
    retained_indices,
    save_samples,
    _draw_ig,
)

LOG20 = math.log(20.0)


def make_dataset(n=60, seed=0, beta=(1.0, 0.5), tau=0.4, outcomes=("GSV",)):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, 2500.0, size=(n, 2))
    x1 = rng.normal(size=n)
    plots = []
    for i in range(n):
        values = {}
        for j, q in enumerate(outcomes):
            y = beta[0] + beta[1] * x1[i] + rng.normal(scale=tau)
            values[q] = float(np.exp(y))
        plots.append(
            PlotObservation(
                f"p{i}", (coords[i, 0], coords[i, 1]), values, {"x1": float(x1[i])}
            )
        )
    return Dataset(tuple(plots), (), tuple(outcomes), ("x1",))


def model_scale(dataset):
    from standest.data import log_transform, transform_outcomes

    return transform_outcomes(dataset, log_transform(dataset.outcome_names))


# ---------------------------------------------------------------------------
# schedule and post-processing
# ---------------------------------------------------------------------------

def test_default_schedule_retains_250():
    sched = McmcSchedule()
    assert sched.n_total == 5000
    assert sched.n_retained == 250


def test_schedule_rejects_tiny_retention():
    with pytest.raises(ConfigError):
        McmcSchedule(n_batches=1, batch_len=10, burn_in_frac=0.5, thin=6)


def test_retained_indices_half_burn_thin_ten():
    sched = McmcSchedule(n_batches=1000, batch_len=10, burn_in_frac=0.5, thin=10)
    idx = retained_indices(10000, sched)
    assert len(idx) == 500
    # first retained draws are 5001, 5011, ... in 1-based counting
    assert idx[0] == 5000 and idx[1] == 5010 and idx[-1] == 9990


def test_retained_indices_identity():
    sched = McmcSchedule(n_batches=10, batch_len=1, burn_in_frac=0.0, thin=1)
    assert np.array_equal(retained_indices(10, sched), np.arange(10))


def test_postprocess_checks_raw_count():
    sched = McmcSchedule(n_batches=10, batch_len=10, burn_in_frac=0.5, thin=1)
    with pytest.raises(ConfigError):
        postprocess_chain({"a": np.zeros((55, 2))}, sched)


def test_postprocess_applies_to_all_arrays():
    sched = McmcSchedule(n_batches=10, batch_len=10, burn_in_frac=0.5, thin=5)
    raw = {"a": np.arange(100), "b": np.arange(200).reshape(100, 2)}
    kept = postprocess_chain(raw, sched)
    assert np.array_equal(kept["a"], np.array([50, 55, 60, 65, 70, 75, 80, 85, 90, 95]))
    assert kept["b"].shape == (10, 2)


# ---------------------------------------------------------------------------
# batch adaptation
# ---------------------------------------------------------------------------

def test_adapt_increases_when_accepting():
    state = ProposalScales(log_sd=np.zeros(2), target=0.43)
    values = []
    for _ in range(50):
        state = adapt_batch(state, 1.0)
        values.append(state.log_sd.copy())
    diffs = np.diff(np.array(values)[:, 0])
    assert np.all(diffs > 0)


def test_adapt_decreases_when_rejecting():
    state = ProposalScales(log_sd=np.zeros(1), target=0.43)
    values = []
    for _ in range(50):
        state = adapt_batch(state, 0.0)
        values.append(state.log_sd[0])
    assert np.all(np.diff(values) < 0)


def test_adapt_delta_cap():
    state = ProposalScales(log_sd=np.zeros(1), batch_index=9999, target=0.43)
    stepped = adapt_batch(state, 1.0)
    assert stepped.log_sd[0] <= 0.01 + 1e-12
    late = ProposalScales(log_sd=np.zeros(1), batch_index=40000, target=0.43)
    assert adapt_batch(late, 1.0).log_sd[0] == pytest.approx(40001**-0.5)


# ---------------------------------------------------------------------------
# default priors
# ---------------------------------------------------------------------------

def test_default_priors_intercept_only_matches_sample_variance():
    ds = model_scale(make_dataset(n=100, seed=1))
    spec = ModelSpec("uni_nonspatial", ("GSV",), {"GSV": ()})
    priors = default_priors(ds, spec)
    shape, scale = priors.tau2["GSV"]
    y = ds.outcome_matrix(["GSV"])[:, 0]
    assert shape == 2.0
    assert scale == pytest.approx(float(np.var(y, ddof=1)), rel=1e-10)


def test_default_priors_phi_support_from_extent():
    # two plots 5 km apart pin d_max exactly
    plots = (
        PlotObservation("a", (0.0, 0.0), {"GSV": 1.0}, {}),
        PlotObservation("b", (5000.0, 0.0), {"GSV": 2.0}, {}),
        PlotObservation("c", (2500.0, 10.0), {"GSV": 1.5}, {}),
    )
    ds = Dataset(plots, (), ("GSV",), ())
    spec = ModelSpec("uni_spatial", ("GSV",), {"GSV": ()})
    priors = default_priors(ds, spec)
    lo, hi = priors.phi["GSV"]
    assert lo == pytest.approx(LOG20 / 5.0, rel=1e-6)
    assert hi == pytest.approx(LOG20 / 0.25, rel=1e-6)


def test_default_priors_iw_df_rule():
    ds = model_scale(make_dataset(n=50, seed=2, outcomes=("GSV", "QMD", "BA")))
    spec = ModelSpec(
        "mv_nonspatial",
        ("GSV", "QMD", "BA"),
        {q: ("x1",) for q in ("GSV", "QMD", "BA")},
    )
    priors = default_priors(ds, spec)
    df, scale = priors.psi
    assert df == 5.0
    assert scale.shape == (3, 3)


def test_prior_spec_validation():
    with pytest.raises(ConfigError):
        PriorSpec(tau2={"GSV": (1.0, 1.0)})  # shape must exceed 1
    with pytest.raises(ConfigError):
        PriorSpec(phi={"GSV": (2.0, 1.0)})
    with pytest.raises(ConfigError):
        PriorSpec(psi=(2.0, np.eye(3)))  # df must exceed m + 1


# ---------------------------------------------------------------------------
# conjugate correctness
# ---------------------------------------------------------------------------

def test_known_tau2_beta_posterior_matches_analytic_normal():
    ds = model_scale(make_dataset(n=50, seed=3))
    spec = ModelSpec("uni_nonspatial", ("GSV",), {"GSV": ("x1",)})
    priors = PriorSpec(tau2={"GSV": (2.0, 0.2)})
    sched = McmcSchedule(
        n_batches=1000, batch_len=10, burn_in_frac=0.0, thin=1, seed=10
    )
    tau2 = 0.16
    samples = fit_uni_nonspatial(ds, spec, priors, sched, fixed_tau2=tau2)
    assert samples.n_draws == 10000

    from standest.samplers import design_matrix

    X, _ = design_matrix(ds, "GSV", ("x1",))
    y = ds.outcome_matrix(["GSV"])[:, 0]
    beta_hat = np.linalg.solve(X.T @ X, X.T @ y)
    cov = tau2 * np.linalg.inv(X.T @ X)
    for j in range(2):
        sd = math.sqrt(cov[j, j])
        err = abs(samples.beta[:, j].mean() - beta_hat[j])
        assert err < 3.0 * sd / math.sqrt(samples.n_draws)
        stat = kstest(samples.beta[:, j], norm(loc=beta_hat[j], scale=sd).cdf).statistic
        assert stat < 0.05


def test_two_block_gibbs_matches_marginal_t_oracle():
    # integrating the variance out of the conjugate model gives an exact
    # multivariate-t marginal for the coefficients
    ds = model_scale(make_dataset(n=40, seed=4))
    spec = ModelSpec("uni_nonspatial", ("GSV",), {"GSV": ("x1",)})
    a, b = 2.0, 0.2
    priors = PriorSpec(tau2={"GSV": (a, b)})
    sched = McmcSchedule(
        n_batches=2000, batch_len=10, burn_in_frac=0.25, thin=1, seed=11
    )
    samples = fit_uni_nonspatial(ds, spec, priors, sched)

    from standest.samplers import design_matrix

    X, _ = design_matrix(ds, "GSV", ("x1",))
    y = ds.outcome_matrix(["GSV"])[:, 0]
    n, p = X.shape
    beta_hat = np.linalg.solve(X.T @ X, X.T @ y)
    ssr = float((y - X @ beta_hat) @ (y - X @ beta_hat))
    dof = 2 * a + n - p
    scale_mat = (2 * b + ssr) / dof * np.linalg.inv(X.T @ X)
    for j in range(p):
        dist = student_t(df=dof, loc=beta_hat[j], scale=math.sqrt(scale_mat[j, j]))
        stat = kstest(samples.beta[:, j], dist.cdf).statistic
        assert stat < 0.05


def test_tau2_update_distribution():
    # the inverse-gamma sampler against the scipy CDF at update-rule params
    rng = np.random.default_rng(9)
    shape, scale = 2.0 + 25.0, 0.2 + 3.7
    draws = np.array([_draw_ig(rng, shape, scale) for _ in range(10000)])
    stat = kstest(draws, invgamma(a=shape, scale=scale).cdf).statistic
    assert stat < 0.05


def test_noiseless_limit_concentrates_on_ols():
    rng = np.random.default_rng(5)
    n = 40
    coords = rng.uniform(0, 1000, size=(n, 2))
    x1 = rng.normal(size=n)
    y = 0.7 + 0.3 * x1  # exactly linear
    plots = tuple(
        PlotObservation(
            f"p{i}",
            (coords[i, 0], coords[i, 1]),
            {"GSV": float(np.exp(y[i]))},
            {"x1": float(x1[i])},
        )
        for i in range(n)
    )
    ds = model_scale(Dataset(plots, (), ("GSV",), ("x1",)))
    spec = ModelSpec("uni_nonspatial", ("GSV",), {"GSV": ("x1",)})
    priors = PriorSpec(tau2={"GSV": (1e8, 1e8 * 1e-12)})
    sched = McmcSchedule(n_batches=100, batch_len=10, burn_in_frac=0.5, thin=2, seed=6)
    samples = fit_uni_nonspatial(ds, spec, priors, sched)
    assert np.allclose(samples.beta.mean(axis=0), [0.7, 0.3], atol=1e-4)
    assert np.all(samples.beta.std(axis=0) < 1e-4)


def test_mv_m1_matches_uni_nonspatial():
    # IW on a 1x1 matrix is IG(df/2, scale/2); with matched priors the two
    # fitters target the same posterior
    ds = model_scale(make_dataset(n=60, seed=7))
    sched = McmcSchedule(n_batches=400, batch_len=10, burn_in_frac=0.5, thin=2, seed=8)
    df, s11 = 5.0, 0.3
    uni = fit_uni_nonspatial(
        ds,
        ModelSpec("uni_nonspatial", ("GSV",), {"GSV": ("x1",)}),
        PriorSpec(tau2={"GSV": (df / 2.0, s11 / 2.0)}),
        sched,
    )
    mv = fit_mv_nonspatial(
        ds,
        ModelSpec("mv_nonspatial", ("GSV",), {"GSV": ("x1",)}),
        PriorSpec(psi=(df, np.array([[s11]]))),
        sched,
    )
    T = uni.n_draws
    for j in range(2):
        se = math.sqrt(
            uni.beta[:, j].var(ddof=1) / T + mv.beta[:, j].var(ddof=1) / T
        )
        assert abs(uni.beta[:, j].mean() - mv.beta[:, j].mean()) < 3.5 * se
    se = math.sqrt(uni.tau2.var(ddof=1) / T + mv.psi[:, 0, 0].var(ddof=1) / T)
    assert abs(uni.tau2.mean() - mv.psi[:, 0, 0].mean()) < 3.5 * se


def test_mv_psi_recovery_and_correlation_detection():
    rng = np.random.default_rng(12)
    n = 300
    coords = rng.uniform(0, 5000, size=(n, 2))
    x1 = rng.normal(size=n)
    psi_true = np.array([[0.09, 0.054], [0.054, 0.04]])  # correlation 0.9
    eps = rng.multivariate_normal(np.zeros(2), psi_true, size=n)
    plots = []
    for i in range(n):
        y1 = 1.0 + 0.4 * x1[i] + eps[i, 0]
        y2 = 2.0 - 0.2 * x1[i] + eps[i, 1]
        plots.append(
            PlotObservation(
                f"p{i}",
                (coords[i, 0], coords[i, 1]),
                {"GSV": float(np.exp(y1)), "QMD": float(np.exp(y2))},
                {"x1": float(x1[i])},
            )
        )
    ds = model_scale(Dataset(tuple(plots), (), ("GSV", "QMD"), ("x1",)))
    spec = ModelSpec("mv_nonspatial", ("GSV", "QMD"), {"GSV": ("x1",), "QMD": ("x1",)})
    sched = McmcSchedule(n_batches=300, batch_len=10, burn_in_frac=0.5, thin=2, seed=13)
    samples = fit_mv_nonspatial(ds, spec, default_priors(ds, spec), sched)
    psi_mean = samples.psi.mean(axis=0)
    rel = np.linalg.norm(psi_mean - psi_true) / np.linalg.norm(psi_true)
    assert rel < 0.10
    lo, hi = np.quantile(samples.psi[:, 0, 1], [0.025, 0.975])
    assert lo > 0.0  # strongly correlated residuals detected


# ---------------------------------------------------------------------------
# determinism, constraints, serialization
# ---------------------------------------------------------------------------

def test_fixed_seed_is_bitwise_reproducible():
    ds = model_scale(make_dataset(n=40, seed=14))
    spec = ModelSpec("uni_spatial", ("GSV",), {"GSV": ("x1",)})
    priors = default_priors(ds, spec)
    sched = McmcSchedule(n_batches=40, batch_len=10, burn_in_frac=0.5, thin=2, seed=15)
    s1 = fit_uni_spatial(ds, spec, priors, sched)
    s2 = fit_uni_spatial(ds, spec, priors, sched)
    assert np.array_equal(s1.beta, s2.beta)
    assert np.array_equal(s1.w, s2.w)
    s3 = fit_uni_spatial(ds, spec, priors, sched.__class__(**{**sched.to_dict(), "seed": 16}))
    assert not np.array_equal(s1.beta, s3.beta)


def test_uni_spatial_draws_respect_domain_constraints():
    ds = model_scale(make_dataset(n=40, seed=17))
    spec = ModelSpec("uni_spatial", ("GSV",), {"GSV": ("x1",)})
    priors = default_priors(ds, spec)
    sched = McmcSchedule(n_batches=40, batch_len=10, burn_in_frac=0.5, thin=2, seed=18)
    samples = fit_uni_spatial(ds, spec, priors, sched)
    samples.validate_draws()  # raises on any violation
    assert len(samples.acceptance) == 40
    lo, hi = priors.phi["GSV"]
    assert np.all(samples.phi >= lo) and np.all(samples.phi <= hi)


def test_save_load_round_trip(tmp_path):
    ds = model_scale(make_dataset(n=30, seed=19))
    spec = ModelSpec("uni_spatial", ("GSV",), {"GSV": ("x1",)})
    priors = default_priors(ds, spec)
    sched = McmcSchedule(n_batches=20, batch_len=10, burn_in_frac=0.5, thin=2, seed=20)
    samples = fit_uni_spatial(ds, spec, priors, sched)
    save_samples(samples, tmp_path / "fit")
    loaded = load_samples(tmp_path / "fit")
    assert np.array_equal(loaded.beta, samples.beta)
    assert np.array_equal(loaded.w, samples.w)
    assert loaded.model_spec == samples.model_spec
    assert loaded.schedule == samples.schedule


def test_design_matrix_rejects_rank_deficiency():
    rng = np.random.default_rng(21)
    n = 20
    coords = rng.uniform(0, 100, size=(n, 2))
    x1 = rng.normal(size=n)
    plots = tuple(
        PlotObservation(
            f"p{i}",
            (coords[i, 0], coords[i, 1]),
            {"GSV": 1.0},
            {"x1": float(x1[i]), "x2": float(2 * x1[i])},
        )
        for i in range(n)
    )
    ds = Dataset(plots, (), ("GSV",), ("x1", "x2"))
    from standest.samplers import design_matrix

    with pytest.raises(ValidationError):
        design_matrix(ds, "GSV", ("x1", "x2"))
