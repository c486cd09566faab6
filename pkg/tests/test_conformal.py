import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import LinAlgError

from safer.conformal import (DEFAULT_ALPHAS, DEFAULT_CS, CalRecord, ScorePool, bh_cutoff,
                             bh_select, clip_bound, conformal_pvalue, conformal_pvalues,
                             estimate_fdr_power, fit_score_predictor, nonconformity_j,
                             pvalues_via_j, replicate_draws, score_selection,
                             selective_guarantee)
from safer.errors import BoundViolationError, ConfigError, InsufficientDataError
from safer.pipeline import load_config, prepare, score_table

unit = st.floats(0, 1, allow_nan=False)


# -- ridge --


def test_exact_linear_recovery(rng):
    x = rng.normal(size=(30, 4))
    beta = np.array([1.5, -2.0, 0.25, 3.0])
    p = fit_score_predictor(x, x @ beta + 0.7, lam=0.0)
    np.testing.assert_allclose(p.coef, beta, atol=1e-8)
    assert p.intercept == pytest.approx(0.7, abs=1e-8)


def test_huge_penalty_leaves_intercept_only(rng):
    x, y = rng.normal(size=(20, 3)), rng.normal(size=20)
    p = fit_score_predictor(x, y, lam=1e12)
    assert np.abs(p.coef).max() < 1e-9
    assert p.intercept == pytest.approx(y.mean(), abs=1e-8)


def test_hand_system_against_explicit_inverse():
    x = np.array([[1.0, 2.0], [2.0, 0.0], [3.0, 1.0], [0.0, 1.0], [4.0, 3.0]])
    y = np.array([1.0, 2.0, 2.5, 0.5, 4.0])
    xc, yc = x - x.mean(0), y - y.mean()
    (a, b), (c, d) = xc.T @ xc + np.eye(2)
    inv = np.array([[d, -b], [-c, a]]) / (a * d - b * c)
    beta = inv @ (xc.T @ yc)
    p = fit_score_predictor(x, y, lam=1.0)
    np.testing.assert_allclose(p.coef, beta, atol=1e-12)
    # frozen: exact rational solution 437/592, 75/592
    np.testing.assert_allclose(p.coef, [437 / 592, 75 / 592], atol=1e-12)


def test_singular_system_advises_penalty():
    x = np.ones((5, 3))
    x[:, 1] = np.arange(5)
    x[:, 2] = 2 * np.arange(5)
    with pytest.raises(LinAlgError, match="lam > 0"):
        fit_score_predictor(x, np.arange(5.0), lam=0.0)
    fit_score_predictor(x, np.arange(5.0), lam=0.1)


# -- p-values --

CAL = CalRecord.build([0.05, 0.5, 0.45, 0.02], [0.1, 0.3, 0.2, 0.4], c=0.4)


def test_hand_pvalue():
    assert [r.is_null for r in CAL] == [False, True, True, False]
    assert conformal_pvalue(CAL, 0.35, c=0.4, u=0.5) == pytest.approx(0.5, abs=1e-15)


def test_no_nulls_gives_u_over_n_plus_one():
    cal = CalRecord.build([0.0, 0.1, 0.2], [0.5, 0.6, 0.7], c=0.9)
    assert conformal_pvalue(cal, 0.55, c=0.9, u=0.3) == pytest.approx(0.3 / 4)


def test_pvalue_positive_and_small_below_all_nulls():
    p = conformal_pvalue(CAL, -1.0, c=0.4, u=1e-9)
    assert 0 < p < 1e-9


def test_pvalue_rejects_bad_u_and_empty_cal():
    with pytest.raises(ConfigError):
        conformal_pvalue(CAL, 0.3, 0.4, 1.5)
    with pytest.raises(InsufficientDataError):
        conformal_pvalue([], 0.3, 0.4, 0.5)


def test_ties_count_with_u():
    cal = CalRecord.build([0.9, 0.9, 0.9], [0.2, 0.2, 0.1], c=0.5)
    assert conformal_pvalue(cal, 0.2, 0.5, 0.5) == pytest.approx((1 + 0.5 * 3) / 4)


@given(arrays(np.float64, 12, elements=unit), arrays(np.float64, 12, elements=unit),
       arrays(np.float64, 6, elements=unit), arrays(np.float64, 6, elements=unit),
       st.sampled_from([0.1, 0.3, 0.5]))
def test_vectorized_matches_scalar(k_true, k_pred, test_pred, u, c):
    cal = CalRecord.build(k_true, np.round(k_pred, 1), c)
    vec = conformal_pvalues(np.round(k_pred, 1), k_true >= c, np.round(test_pred, 1), u)
    scal = [conformal_pvalue(cal, t, c, v) for t, v in zip(np.round(test_pred, 1), u)]
    np.testing.assert_allclose(vec, scal, rtol=0, atol=1e-15)
    assert np.all((vec >= 0) & (vec <= 1))


@given(arrays(np.float64, 15, elements=unit), arrays(np.float64, 15, elements=unit), unit)
def test_pvalue_monotone_in_predicted_score(k_true, k_pred, u):
    grid = np.linspace(-0.1, 1.1, 25)
    p = conformal_pvalues(k_pred, k_true >= 0.4, grid, np.full(25, u))
    assert np.all(np.diff(p) >= -1e-15)


def test_j_examples():
    assert nonconformity_j(0.3, False, 1.0) == pytest.approx(0.3)
    assert nonconformity_j(0.3, True, 1.0) == pytest.approx(2.3)
    with pytest.raises(BoundViolationError):
        nonconformity_j(1.2, False, 1.0)
    with pytest.raises(BoundViolationError):
        nonconformity_j(-0.1, True, 1.0)


@given(st.integers(0, 2**32 - 1))
def test_j_path_equals_direct_path(seed):
    r = np.random.default_rng(seed)
    n, m = int(r.integers(1, 30)), int(r.integers(1, 20))
    cal_pred = np.round(r.uniform(size=n), 2)
    cal_true = r.uniform(size=n)
    test_pred = np.round(r.uniform(size=m), 2)
    u = r.uniform(size=m)
    c = float(r.uniform(0.05, 0.95))
    a = conformal_pvalues(cal_pred, cal_true >= c, test_pred, u)
    b = pvalues_via_j(cal_pred, cal_true, c, test_pred, u, 1.0)
    assert np.array_equal(a, b)


# -- BH --


def brute_force_k(p, alpha):
    m = len(p)
    s = np.sort(p)
    return max([r for r in range(1, m + 1) if s[r - 1] <= alpha * r / m], default=0)


def test_bh_hand_case():
    res = bh_select([0.30, 0.04, 0.12, 0.01], 0.2)
    assert res.k == 3 and res.selected.tolist() == [1, 2, 3]


def test_bh_extremes():
    assert bh_select(np.ones(5), 0.5).k == 0
    assert bh_select(np.zeros(5), 0.05).selected.tolist() == [0, 1, 2, 3, 4]
    empty = bh_select([], 0.1)
    assert empty.k == 0 and empty.selected.size == 0


def test_bh_input_validation():
    with pytest.raises(ConfigError):
        bh_select([0.5], 1.5)
    with pytest.raises(ConfigError):
        bh_select([1.5], 0.5)


@given(arrays(np.float64, st.integers(1, 10), elements=unit), st.floats(0.01, 0.99))
def test_bh_matches_enumeration(p, alpha):
    res = bh_select(p, alpha)
    assert res.k == brute_force_k(p, alpha) == len(res.selected)
    if res.k:
        assert np.all(p[res.selected] <= np.sort(p)[res.k - 1])


@given(arrays(np.float64, st.integers(1, 12), elements=st.sampled_from([0.01, 0.02, 0.2, 0.5])),
       st.integers(0, 1000))
def test_bh_permutation_invariant(p, seed):
    perm = np.random.default_rng(seed).permutation(len(p))
    a = bh_select(p, 0.3)
    b = bh_select(p[perm], 0.3)
    assert sorted(perm[b.selected].tolist()) == a.selected.tolist()


def test_bh_cutoff_direct():
    assert bh_cutoff([0.01, 0.04, 0.12, 0.30], 0.2) == 3


def test_score_selection():
    null = np.array([True, False, False, True])
    assert score_selection(np.array([0, 1]), null) == (0.5, 0.5)
    assert score_selection(np.array([], dtype=int), null) == (0.0, 0.0)
    res = bh_select([0.01, 0.02, 0.9, 0.9], 0.5, is_null=null)
    assert (res.fdp, res.power) == (0.5, 0.5)


# -- Monte Carlo harness --


def _pool(rng, n=80, n_cal=40):
    k = rng.uniform(size=n)
    return ScorePool(k, np.clip(k + rng.normal(0, 0.2, size=n), 0, 1), n_cal, 1.0)


def test_pool_validation(rng):
    with pytest.raises(InsufficientDataError):
        ScorePool(np.zeros(3), np.zeros(3), 3, 1.0)
    p = ScorePool(np.zeros(3), np.array([-1.0, 0.5, 3.0]), 1, 1.0)
    assert p.kappa_pred.tolist() == [0.0, 0.5, 1.0]


def test_replicate_draws_are_fresh_and_reproducible(rng):
    pool = _pool(rng)
    a, b = replicate_draws(pool, 3, 0), replicate_draws(pool, 3, 0)
    c = replicate_draws(pool, 3, 1)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0]) and not np.array_equal(a[2], c[2])
    assert sorted(np.r_[a[0], a[1]].tolist()) == list(range(80))


def test_sweep_deterministic_and_thread_invariant(rng, tmp_path):
    pool = _pool(rng)
    a = estimate_fdr_power(pool, (0.1, 0.5), (0.3, 0.6), replicates=30, seed=2)
    b = estimate_fdr_power(pool, (0.1, 0.5), (0.3, 0.6), replicates=30, seed=2, threads=4)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "c,alpha,mean_fdr,se_fdr,mean_power,se_power,replicates"
    assert len(lines) == 5


def test_alpha_zero_selects_nothing(rng):
    g = estimate_fdr_power(_pool(rng), (0.0,), (0.5,), replicates=20)
    assert g.mean_fdr[0, 0] == 0 and g.mean_power[0, 0] == 0


def test_sweep_errors(rng):
    with pytest.raises(ConfigError):
        estimate_fdr_power(_pool(rng), (), (0.5,))
    with pytest.raises(ConfigError):
        estimate_fdr_power(_pool(rng), (0.1,), (0.5,), replicates=0)


def test_fdr_controlled_on_toy_pool(rng):
    g = estimate_fdr_power(_pool(rng, 300, 150), replicates=200, seed=1)
    assert np.all(g.mean_fdr <= g.alphas[None, :] + 2 * g.se_fdr + 1e-12)


def test_selective_guarantee_toy(rng):
    ts = np.linspace(0.05, 0.95, 19)
    mean, se = selective_guarantee(_pool(rng, 200, 100), ts, 0.5, replicates=100)
    assert np.all(mean <= ts + 2 * se)


def test_clip_bound():
    assert clip_bound(np.arange(1001.0), 0.999) == pytest.approx(999.0)


# -- default cohort --


@pytest.fixture(scope="module")
def default_sweep():
    cfg = load_config(env={})
    prep = prepare(cfg)
    pool = score_table(prep.teacher, prep.student, prep.train, prep.cal, prep.test,
                       cfg.conformal).pool()
    return estimate_fdr_power(pool, DEFAULT_ALPHAS, DEFAULT_CS, 500, cfg.stage_seed("conformal"))


def _flattening(grid, c):
    row = list(grid.cs).index(c)
    at = {round(float(a), 2): j for j, a in enumerate(grid.alphas)}
    return grid.mean_fdr[row, at[0.9]] - grid.mean_fdr[row, at[0.5]]


@pytest.mark.slow
@pytest.mark.parametrize("c", [0.3, 0.4])
def test_fdr_curve_flattens(default_sweep, c):
    assert _flattening(default_sweep, c) <= 0.05


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="about 61% of patients sit above c = 0.2 on the "
                   "normalized scale, so FDR keeps climbing toward that null share past alpha 0.5")
def test_fdr_curve_flattens_at_lowest_threshold(default_sweep):
    assert _flattening(default_sweep, 0.2) <= 0.05
