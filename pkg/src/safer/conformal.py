"""Score regression, conformal p-values, Benjamini-Hochberg selection and the
Monte Carlo FDR/power harness."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import BoundViolationError, ConfigError, InsufficientDataError, ShapeError

DEFAULT_ALPHAS = tuple(round(0.05 * i, 2) for i in range(1, 20))
DEFAULT_CS = (0.1, 0.2, 0.3, 0.4)


@dataclass
class ScorePredictor:
    """Linear map ``x -> x @ coef + intercept`` fitted by ridge regression."""

    coef: np.ndarray
    intercept: float
    lam: float

    def predict(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.shape[-1] != self.coef.shape[0]:
            raise ShapeError(f"expected {self.coef.shape[0]} features, got {x.shape[-1]}")
        return x @ self.coef + self.intercept


def fit_score_predictor(features, kappas, lam: float = 1.0) -> ScorePredictor:
    """Ridge on centred data (the intercept is not penalised), solved by Cholesky."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(kappas, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ShapeError("features must be N x d and kappas length N")
    if lam < 0:
        raise ConfigError("ridge penalty must be >= 0")
    if x.shape[0] == 0:
        raise InsufficientDataError("no rows to fit")
    x_mean, y_mean = x.mean(axis=0), y.mean()
    xc, yc = x - x_mean, y - y_mean
    gram = xc.T @ xc + lam * np.eye(x.shape[1])
    try:
        factor = cho_factor(gram)
    except LinAlgError:
        raise LinAlgError("normal equations are singular; use a ridge penalty lam > 0") from None
    if lam == 0 and np.linalg.cond(gram) > 1e12:
        raise LinAlgError("normal equations are singular; use a ridge penalty lam > 0")
    coef = cho_solve(factor, xc.T @ yc)
    return ScorePredictor(coef, float(y_mean - x_mean @ coef), float(lam))


@dataclass
class CalRecord:
    kappa_true: float
    kappa_pred: float
    is_null: bool

    @classmethod
    def build(cls, kappa_true, kappa_pred, c) -> list["CalRecord"]:
        return [cls(float(k), float(kp), bool(k >= c)) for k, kp in zip(kappa_true, kappa_pred)]


def conformal_pvalue(cal: list[CalRecord], test_kappa_pred: float, c: float, u: float) -> float:
    """Rank of the test score among calibration nulls (``kappa_true >= c``),
    with randomised ties."""
    if not cal:
        raise InsufficientDataError("calibration set is empty")
    if not 0.0 <= u <= 1.0:
        raise ConfigError("tie-break draw must lie in [0, 1]")
    nulls = [r.kappa_pred for r in cal if r.kappa_true >= c]
    below = sum(1 for k in nulls if k < test_kappa_pred)
    ties = sum(1 for k in nulls if k == test_kappa_pred)
    return (below + u * (1 + ties)) / (len(cal) + 1)


def conformal_pvalues(cal_pred, cal_null, test_pred, u) -> np.ndarray:
    """Vectorised form of :func:`conformal_pvalue` over many test points."""
    cal_pred = np.asarray(cal_pred, dtype=np.float64)
    null_scores = np.sort(cal_pred[np.asarray(cal_null, dtype=bool)])
    test_pred = np.asarray(test_pred, dtype=np.float64)
    below = np.searchsorted(null_scores, test_pred, side="left")
    ties = np.searchsorted(null_scores, test_pred, side="right") - below
    return (below + np.asarray(u) * (1 + ties)) / (len(cal_pred) + 1)


def nonconformity_j(kappa, penalized, bound: float):
    """``kappa + 2 * bound`` where ``penalized`` is set, else ``kappa``."""
    k = np.asarray(kappa, dtype=np.float64)
    if np.any(k < 0) or np.any(k > bound):
        raise BoundViolationError(f"score outside [0, {bound}]")
    out = k + 2.0 * bound * np.asarray(penalized, dtype=bool)
    return float(out) if out.ndim == 0 else out


def pvalues_via_j(cal_pred, cal_kappa_true, c, test_pred, u, bound) -> np.ndarray:
    """Same p-values through the penalised nonconformity score.

    Calibration points that are not null get the ``2 * bound`` offset, which puts
    them above every test score, so a plain rank count recovers the null-only count.
    """
    cal_j = nonconformity_j(cal_pred, np.asarray(cal_kappa_true) < c, bound)
    test_j = nonconformity_j(test_pred, np.zeros(np.shape(test_pred), dtype=bool), bound)
    cal_j = np.sort(np.atleast_1d(cal_j))
    test_j = np.atleast_1d(test_j)
    below = np.searchsorted(cal_j, test_j, side="left")
    ties = np.searchsorted(cal_j, test_j, side="right") - below
    return (below + np.asarray(u) * (1 + ties)) / (len(cal_j) + 1)


@dataclass
class SelectionResult:
    p_values: np.ndarray
    k: int
    selected: np.ndarray
    fdp: float | None = None
    power: float | None = None


def bh_cutoff(p_values, alpha: float) -> int:
    p = np.sort(np.asarray(p_values, dtype=np.float64))
    m = len(p)
    if m == 0:
        return 0
    ok = np.nonzero(p <= alpha * np.arange(1, m + 1) / m)[0]
    return int(ok[-1] + 1) if len(ok) else 0


def bh_select(p_values, alpha: float, is_null=None) -> SelectionResult:
    """Step-up selection; with ``is_null`` also scores the realised FDP and power."""
    p = np.asarray(p_values, dtype=np.float64)
    if not 0 <= alpha <= 1:
        raise ConfigError("alpha must lie in [0, 1]")
    if np.any((p < 0) | (p > 1)):
        raise ConfigError("p-values must lie in [0, 1]")
    k = bh_cutoff(p, alpha)
    if k:
        # stable order: on equal p-values the lower index is taken first
        selected = np.sort(np.argsort(p, kind="stable")[:k])
    else:
        selected = np.array([], dtype=np.int64)
    result = SelectionResult(p, k, selected)
    if is_null is not None:
        result.fdp, result.power = score_selection(selected, is_null)
    return result


def score_selection(selected, is_null) -> tuple[float, float]:
    is_null = np.asarray(is_null, dtype=bool)
    chosen = np.zeros(len(is_null), dtype=bool)
    chosen[selected] = True
    false_disc = int((chosen & is_null).sum())
    fdp = false_disc / max(1, int(chosen.sum()))
    power = int((chosen & ~is_null).sum()) / max(1, int((~is_null).sum()))
    return fdp, power


# -- Monte Carlo harness --------------------------------------------------------


@dataclass
class ScorePool:
    """Held-out patients with oracle and predicted scores, re-split every replicate."""

    kappa_true: np.ndarray
    kappa_pred: np.ndarray
    n_cal: int
    bound: float

    def __post_init__(self):
        self.kappa_true = np.asarray(self.kappa_true, dtype=np.float64)
        self.kappa_pred = np.clip(np.asarray(self.kappa_pred, dtype=np.float64), 0.0, self.bound)
        if self.kappa_true.shape != self.kappa_pred.shape:
            raise ShapeError("true and predicted score vectors differ in length")
        if not 1 <= self.n_cal < len(self.kappa_true):
            raise InsufficientDataError("need at least one calibration and one test point")


def replicate_draws(pool: ScorePool, seed: int, rep: int):
    """Calibration/test index split and tie-break draws for one replicate."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7, rep]))
    perm = rng.permutation(len(pool.kappa_true))
    cal, test = perm[:pool.n_cal], perm[pool.n_cal:]
    u = np.random.default_rng(np.random.SeedSequence([seed, 5, rep])).random(len(test))
    return cal, test, u


@dataclass
class SweepGrid:
    alphas: np.ndarray
    cs: np.ndarray
    mean_fdr: np.ndarray
    se_fdr: np.ndarray
    mean_power: np.ndarray
    se_power: np.ndarray
    replicates: int

    def rows(self):
        for i, c in enumerate(self.cs):
            for j, a in enumerate(self.alphas):
                yield (float(c), float(a), self.mean_fdr[i, j], self.se_fdr[i, j],
                       self.mean_power[i, j], self.se_power[i, j], self.replicates)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("c,alpha,mean_fdr,se_fdr,mean_power,se_power,replicates\n")
            for c, a, f, sf, p, sp, r in self.rows():
                fh.write(f"{c:.9g},{a:.9g},{f:.9g},{sf:.9g},{p:.9g},{sp:.9g},{r}\n")


def _one_replicate(pool, alphas, cs, seed, rep):
    cal, test, u = replicate_draws(pool, seed, rep)
    fdp = np.empty((len(cs), len(alphas)))
    power = np.empty_like(fdp)
    for i, c in enumerate(cs):
        p = conformal_pvalues(pool.kappa_pred[cal], pool.kappa_true[cal] >= c,
                              pool.kappa_pred[test], u)
        test_null = pool.kappa_true[test] >= c
        for j, a in enumerate(alphas):
            fdp[i, j], power[i, j] = score_selection(bh_select(p, a).selected, test_null)
    return fdp, power


def _mean_se(stack):
    n = stack.shape[0]
    se = stack.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(stack.shape[1:])
    return stack.mean(axis=0), se


def estimate_fdr_power(pool: ScorePool, alphas=DEFAULT_ALPHAS, cs=DEFAULT_CS, replicates=500,
                       seed=0, threads=1) -> SweepGrid:
    """Empirical FDR and power on an (alpha, c) grid.

    Each replicate draws a fresh calibration/test split of the pool and fresh
    tie-break draws. Results are gathered in replicate order, so the output does
    not depend on ``threads``.
    """
    alphas, cs = np.asarray(alphas, dtype=np.float64), np.asarray(cs, dtype=np.float64)
    if alphas.size == 0 or cs.size == 0:
        raise ConfigError("alpha and c grids must be nonempty")
    if replicates < 1:
        raise ConfigError("need at least one replicate")

    def run(rep):
        return _one_replicate(pool, alphas, cs, seed, rep)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, range(replicates)))
    else:
        results = [run(r) for r in range(replicates)]
    mf, sf = _mean_se(np.stack([r[0] for r in results]))
    mp, sp = _mean_se(np.stack([r[1] for r in results]))
    return SweepGrid(alphas, cs, mf, sf, mp, sp, replicates)


def selective_guarantee(pool: ScorePool, ts, c: float, replicates=500, seed=0):
    """Monte Carlo estimate of P[j selected, p_j <= t, H_j true] per threshold.

    Selection at threshold ``t`` is the BH set at level ``t``; the probability is
    averaged over test points. Returns (means, standard errors).
    """
    ts = np.asarray(ts, dtype=np.float64)
    out = np.empty((replicates, len(ts)))
    for rep in range(replicates):
        cal, test, u = replicate_draws(pool, seed, rep)
        p = conformal_pvalues(pool.kappa_pred[cal], pool.kappa_true[cal] >= c,
                              pool.kappa_pred[test], u)
        null = pool.kappa_true[test] >= c
        for j, t in enumerate(ts):
            chosen = np.zeros(len(p), dtype=bool)
            chosen[bh_select(p, t).selected] = True
            out[rep, j] = np.mean(chosen & (p <= t) & null)
    return _mean_se(out)


def clip_bound(train_kappa, quantile=0.999) -> float:
    return float(np.quantile(np.asarray(train_kappa, dtype=np.float64), quantile))
