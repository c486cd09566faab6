"""Synthetic multimodal patient cohorts with a known generative truth.

Each patient carries a latent AR(1) trajectory that emits both the structured
series and the note-embedding series. The treatment grid is 5 x 5 and the
generative-optimal treatment is the argmax of a fixed softmax policy over the
latent state. Two outcome laws are available:

``stratified``
    Survivor and deceased counts are fixed. Deceased latent means drift away
    from the survivor mean (reaching ``latent_shift`` at the decision window)
    and a fraction ``deceased_label_noise`` of deceased treatment labels is
    resampled uniformly over the other 24 classes.

``logistic``
    Every patient is drawn from one population, treatments are resampled with
    probability ``treatment_noise`` and death follows a logistic law in the
    latent severity plus a log-odds bump for a suboptimal decision-window
    treatment. With ``treatment_effect="exact"`` the bump is ``log(odds)`` for
    any wrong class; with ``"graded"`` it is ``log(odds)`` per unit of L1
    distance from the optimum on the 5 x 5 dose grid. The intercept is solved
    so the expected death rate equals ``n_deceased / (n_survivors + n_deceased)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit
from scipy.stats import norm

from .errors import CohortParseError, ConfigError, SplitError

N_CLASSES = 25
GRID = 5
_WORLD_SEED = 20240917
FORMAT_TAG = "safer-cohort/1"


@dataclass(frozen=True)
class CohortConfig:
    n_survivors: int = 312
    n_deceased: int = 43
    seq_len: int = 8
    d_struct: int = 44
    d_note: int = 16
    d_static: int = 5
    n_classes: int = N_CLASSES
    latent_shift: float = 1.5
    deceased_label_noise: float = 0.3
    seed: int = 0
    latent_dim: int = 4
    ar_coef: float = 0.9
    struct_noise: float = 0.5
    note_noise: float = 1.0
    static_noise: float = 0.5
    outcome_law: str = "stratified"
    treatment_noise: float = 0.3
    severity_coef: float = 1.0
    wrong_treatment_odds: float = 2.0
    treatment_effect: str = "exact"

    def __post_init__(self):
        if self.n_classes != N_CLASSES:
            raise ConfigError(f"n_classes must be {N_CLASSES} (5 x 5 grid), got {self.n_classes}")
        for name in ("seq_len", "d_struct", "d_note", "d_static"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_survivors < 0 or self.n_deceased < 0 or self.n_survivors + self.n_deceased < 1:
            raise ConfigError("cohort needs at least one patient and nonnegative counts")
        if self.latent_dim < 3:
            raise ConfigError("latent_dim must be >= 3")
        for name in ("deceased_label_noise", "treatment_noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.latent_shift < 0:
            raise ConfigError("latent_shift must be >= 0")
        if not 0.0 <= self.ar_coef < 1.0:
            raise ConfigError("ar_coef must lie in [0, 1)")
        if self.wrong_treatment_odds <= 0:
            raise ConfigError("wrong_treatment_odds must be positive")
        if self.outcome_law not in ("stratified", "logistic"):
            raise ConfigError(f"unknown outcome_law {self.outcome_law!r}")
        if self.treatment_effect not in ("exact", "graded"):
            raise ConfigError(f"unknown treatment_effect {self.treatment_effect!r}")

    @classmethod
    def from_mapping(cls, values: dict) -> "CohortConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown cohort option {key!r}")
            default = getattr(cls, key)
            kwargs[key] = type(default)(raw) if not isinstance(default, str) else str(raw)
        return cls(**kwargs)


@dataclass
class PatientRecord:
    id: str
    structured: np.ndarray
    notes: np.ndarray
    static: np.ndarray
    treatments: np.ndarray
    next_treatment: int
    survived: bool

    @property
    def seq_len(self) -> int:
        return self.structured.shape[0]

    def truncated(self, window: int) -> "PatientRecord":
        """The first ``window`` steps of the record."""
        return replace(self, structured=self.structured[:window], notes=self.notes[:window],
                       treatments=self.treatments[:window])


@dataclass
class PatientTruth:
    """Oracle-only generative quantities; never passed to training code."""

    optimal_treatments: np.ndarray  # length T + 1, last entry is the decision window
    latent: np.ndarray  # (T + 1) x latent_dim
    death_logit: float | None = None
    log_odds_wrong: float | None = None
    graded: bool = False

    @property
    def optimal_next(self) -> int:
        return int(self.optimal_treatments[-1])

    def death_probability(self, treatment: int) -> float:
        if self.death_logit is None:
            raise ValueError("this cohort has no explicit outcome law")
        wrong = float(dose_distance(treatment, self.optimal_next) if self.graded
                      else treatment != self.optimal_next)
        return float(expit(self.death_logit + self.log_odds_wrong * wrong))


@dataclass
class Cohort:
    records: list[PatientRecord]
    config: CohortConfig
    truth: dict[str, PatientTruth] = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def subset(self, keep) -> "Cohort":
        recs = [r for r in self.records if keep(r)]
        return Cohort(recs, self.config, {r.id: self.truth[r.id] for r in recs if r.id in self.truth})

    @property
    def survivors(self) -> "Cohort":
        return self.subset(lambda r: r.survived)

    @property
    def deceased(self) -> "Cohort":
        return self.subset(lambda r: not r.survived)

    def labels(self) -> np.ndarray:
        return np.array([r.next_treatment for r in self.records], dtype=np.int64)

    def survived(self) -> np.ndarray:
        return np.array([r.survived for r in self.records], dtype=bool)


# -- the fixed generative world -------------------------------------------------


@dataclass(frozen=True)
class _World:
    emit_struct: np.ndarray
    emit_note: np.ndarray
    emit_static: np.ndarray
    shift_dir: np.ndarray
    thresholds: np.ndarray


def _world(config: CohortConfig) -> _World:
    # Shared by every seed so that cohorts from different seeds are i.i.d. draws.
    ss = np.random.SeedSequence([_WORLD_SEED, config.latent_dim, config.d_struct,
                                 config.d_note, config.d_static])
    rng = np.random.default_rng(ss)
    k = config.latent_dim
    shift_dir = np.zeros(k)
    shift_dir[0] = shift_dir[2] = 1.0 / math.sqrt(2.0)
    return _World(
        emit_struct=rng.normal(size=(k, config.d_struct)),
        emit_note=rng.normal(size=(k, config.d_note)),
        emit_static=rng.normal(size=(k, config.d_static)),
        shift_dir=shift_dir,
        thresholds=norm.ppf([0.2, 0.4, 0.6, 0.8]),
    )


def policy_logits(latent: np.ndarray, thresholds: np.ndarray | None = None) -> np.ndarray:
    """Logits of the fixed treatment policy, shape ``(..., 25)``.

    Each grid axis uses the upper envelope ``k * s - sum(thresholds[:k])``
    of one latent coordinate, so its argmax is the quantile bin of that
    coordinate; class index is ``5 * fluid_bin + vasopressor_bin``.
    """
    if thresholds is None:
        thresholds = norm.ppf([0.2, 0.4, 0.6, 0.8])
    offsets = np.concatenate([[0.0], np.cumsum(thresholds)])
    ks = np.arange(GRID, dtype=np.float64)
    fluid = latent[..., 0:1] * ks - offsets
    vaso = latent[..., 1:2] * ks - offsets
    return (fluid[..., :, None] + vaso[..., None, :]).reshape(*latent.shape[:-1], N_CLASSES)


def optimal_treatment(latent: np.ndarray) -> np.ndarray:
    return np.argmax(policy_logits(latent), axis=-1)


def _quantize(a: np.ndarray) -> np.ndarray:
    """Round to 9 significant digits so text round-trips are exact."""
    a = np.asarray(a, dtype=np.float64)
    return np.char.mod("%.9g", a).astype(np.float64)


def _resample_other(rng, labels: np.ndarray, prob: float) -> np.ndarray:
    flip = rng.random(labels.shape) < prob
    offset = rng.integers(1, N_CLASSES, size=labels.shape)
    return np.where(flip, (labels + offset) % N_CLASSES, labels)


def _latent_paths(rng, n, config, means):
    """AR(1) around per-step means; the decision-window state is the one-step forecast."""
    T, k, phi = config.seq_len, config.latent_dim, config.ar_coef
    z = np.empty((n, T + 1, k))
    z[:, 0] = means[:, 0] + rng.normal(size=(n, k))
    innov = math.sqrt(1.0 - phi * phi)
    for t in range(1, T):
        z[:, t] = means[:, t] + phi * (z[:, t - 1] - means[:, t - 1]) + innov * rng.normal(size=(n, k))
    z[:, T] = means[:, T] + phi * (z[:, T - 1] - means[:, T - 1])
    return z


def _emit(rng, latent, weights, noise):
    scale = np.sqrt((weights ** 2).sum(axis=0) + noise ** 2)
    return (latent @ weights + noise * rng.normal(size=latent.shape[:-1] + (weights.shape[1],))) / scale


def dose_distance(a, b):
    """L1 distance between two treatments on the 5 x 5 dose grid."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a // GRID - b // GRID) + np.abs(a % GRID - b % GRID)


def _logistic_intercept(config: CohortConfig, world: "_World") -> float:
    """Intercept making the expected death rate match the configured ratio."""
    target = config.n_deceased / (config.n_survivors + config.n_deceased)
    if target <= 0.0 or target >= 1.0:
        raise ConfigError("logistic outcome law needs both survivors and deceased in the ratio")
    bump = math.log(config.wrong_treatment_odds)
    eps = config.treatment_noise
    if config.treatment_effect == "exact":
        nodes, weights = np.polynomial.hermite_e.hermegauss(80)
        weights = weights / weights.sum()
        # severity is the projection of a stationary N(0, I) latent on a unit vector
        severity = config.severity_coef * nodes
        penalty = np.full((len(nodes), 1), bump)
        other = np.ones((len(nodes), 1))
    else:
        # severity and the optimal class are dependent here, so integrate by a
        # fixed Monte Carlo sample of the decision-window state
        rng = np.random.default_rng(_WORLD_SEED + 1)
        z = config.ar_coef * rng.normal(size=(20000, config.latent_dim))
        opt = optimal_treatment(z)
        dist = dose_distance(np.arange(N_CLASSES)[None, :], opt[:, None])
        mask = dist > 0
        weights = np.full(len(z), 1.0 / len(z))
        severity = config.severity_coef * (z @ world.shift_dir)
        penalty = bump * dist
        other = mask / (N_CLASSES - 1)

    def rate(b0):
        base = expit(b0 + severity)
        wrong = (other * expit(b0 + severity[:, None] + penalty)).sum(axis=1)
        return float(weights @ ((1 - eps) * base + eps * wrong))

    return brentq(lambda b0: rate(b0) - target, -30.0, 30.0, xtol=1e-14)


def generate_cohort(config: CohortConfig) -> Cohort:
    """Draw a cohort; deterministic for a fixed config (including seed)."""
    world = _world(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    T = config.seq_len
    n = config.n_survivors + config.n_deceased
    means = np.zeros((n, T + 1, config.latent_dim))
    survived = np.ones(n, dtype=bool)
    death_logit = log_or = None

    if config.outcome_law == "stratified":
        survived[config.n_survivors:] = False
        ramp = np.minimum(1.0, np.arange(1, T + 2) / T)
        means[~survived] = config.latent_shift * ramp[:, None] * world.shift_dir
        z = _latent_paths(rng, n, config, means)
        optimal = optimal_treatment(z)
        labels = optimal.copy()
        labels[~survived] = _resample_other(rng, optimal[~survived], config.deceased_label_noise)
    else:
        z = _latent_paths(rng, n, config, means)
        optimal = optimal_treatment(z)
        labels = _resample_other(rng, optimal, config.treatment_noise)
        b0 = _logistic_intercept(config, world)
        log_or = math.log(config.wrong_treatment_odds)
        death_logit = b0 + config.severity_coef * (z[:, T] @ world.shift_dir)
        if config.treatment_effect == "graded":
            wrong = dose_distance(labels[:, T], optimal[:, T]).astype(np.float64)
        else:
            wrong = (labels[:, T] != optimal[:, T]).astype(np.float64)
        survived = rng.random(n) >= expit(death_logit + log_or * wrong)
        death_logit = _quantize(death_logit)

    structured = _quantize(_emit(rng, z[:, :T], world.emit_struct, config.struct_noise))
    notes = _quantize(_emit(rng, z[:, :T], world.emit_note, config.note_noise))
    static = _quantize(_emit(rng, z[:, 0], world.emit_static, config.static_noise))
    latent = _quantize(z)

    order = rng.permutation(n)
    records, truth = [], {}
    for pos, i in enumerate(order):
        pid = f"p{pos:05d}"
        records.append(PatientRecord(
            id=pid, structured=structured[i], notes=notes[i], static=static[i],
            treatments=labels[i, :T].astype(np.int64), next_treatment=int(labels[i, T]),
            survived=bool(survived[i])))
        truth[pid] = PatientTruth(
            optimal_treatments=optimal[i].astype(np.int64), latent=latent[i],
            death_logit=None if death_logit is None else float(death_logit[i]),
            log_odds_wrong=log_or, graded=config.treatment_effect == "graded")
    return Cohort(records, config, truth)


def split_cohort(cohort: Cohort, ratios=(0.8, 0.1, 0.1), seed=0):
    """Patient-level random split into (train, calibration, test)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    n = len(cohort)
    n_train = int(math.floor(ratios[0] * n + 0.5))
    n_cal = int(math.floor(ratios[1] * n + 0.5))
    n_test = n - n_train - n_cal
    if min(n_train, n_cal, n_test) <= 0:
        raise SplitError(f"split of {n} patients by {ratios} leaves an empty part "
                         f"({n_train}, {n_cal}, {n_test})")
    order = np.random.default_rng(np.random.SeedSequence([seed, 2])).permutation(n)
    parts = (order[:n_train], order[n_train:n_train + n_cal], order[n_train + n_cal:])
    out = []
    for idx in parts:
        recs = [cohort.records[i] for i in sorted(idx)]
        out.append(Cohort(recs, cohort.config,
                          {r.id: cohort.truth[r.id] for r in recs if r.id in cohort.truth}))
    return tuple(out)


# -- file I/O -------------------------------------------------------------------


def _fmt(values) -> str:
    a = np.asarray(values)
    if a.ndim == 1:
        return "[" + ",".join(f"{v:.9g}" for v in a.tolist()) + "]"
    return "[" + ",".join(_fmt(row) for row in a) + "]"


def _record_line(rec: PatientRecord, truth: PatientTruth | None) -> str:
    parts = [
        f'"id":{json.dumps(rec.id)}',
        f'"structured":{_fmt(rec.structured)}',
        f'"notes":{_fmt(rec.notes)}',
        f'"static":{_fmt(rec.static)}',
        f'"treatments":{json.dumps([int(v) for v in rec.treatments])}',
        f'"next_treatment":{int(rec.next_treatment)}',
        f'"survived":{"true" if rec.survived else "false"}',
    ]
    if truth is not None:
        inner = [
            f'"optimal_treatments":{json.dumps([int(v) for v in truth.optimal_treatments])}',
            f'"latent":{_fmt(truth.latent)}',
        ]
        if truth.death_logit is not None:
            inner.append(f'"death_logit":{truth.death_logit:.9g}')
            inner.append(f'"log_odds_wrong":{truth.log_odds_wrong!r}')
            if truth.graded:
                inner.append('"graded":true')
        parts.append('"truth":{' + ",".join(inner) + "}")
    return "{" + ",".join(parts) + "}"


def write_cohort(cohort: Cohort, path):
    """One JSON object per line; a header line carries the generating config."""
    header = json.dumps({"format": FORMAT_TAG, "config": asdict(cohort.config)}, sort_keys=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for rec in cohort.records:
            fh.write(_record_line(rec, cohort.truth.get(rec.id)) + "\n")


def _matrix(lineno, obj, key, width=None):
    rows = obj.get(key)
    if not isinstance(rows, list) or not rows:
        raise CohortParseError(lineno, f"{key!r} must be a nonempty list of rows")
    lengths = {len(r) if isinstance(r, list) else -1 for r in rows}
    if len(lengths) != 1 or -1 in lengths:
        raise CohortParseError(lineno, f"{key!r} rows have mismatched lengths {sorted(lengths)}")
    arr = np.asarray(rows, dtype=np.float64)
    if width is not None and arr.shape[1] != width:
        raise CohortParseError(lineno, f"{key!r} has width {arr.shape[1]}, expected {width}")
    return arr


def _parse_record(lineno, text, config) -> tuple[PatientRecord, PatientTruth | None]:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CohortParseError(lineno, f"invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise CohortParseError(lineno, "record must be a JSON object")
    for key in ("id", "structured", "notes", "static", "treatments", "next_treatment", "survived"):
        if key not in obj:
            raise CohortParseError(lineno, f"missing field {key!r}")
    try:
        structured = _matrix(lineno, obj, "structured", config.d_struct)
        notes = _matrix(lineno, obj, "notes", config.d_note)
        static = np.asarray(obj["static"], dtype=np.float64)
        treatments = np.asarray(obj["treatments"], dtype=np.int64)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, CohortParseError):
            raise
        raise CohortParseError(lineno, f"non-numeric value ({exc})") from None
    T = structured.shape[0]
    if notes.shape[0] != T or treatments.shape != (T,):
        raise CohortParseError(lineno, f"mismatched T: structured {T}, notes {notes.shape[0]}, "
                                       f"treatments {treatments.shape[0] if treatments.ndim else 0}")
    if static.shape != (config.d_static,):
        raise CohortParseError(lineno, f"static must have length {config.d_static}")
    nxt = obj["next_treatment"]
    if not isinstance(nxt, int) or isinstance(nxt, bool):
        raise CohortParseError(lineno, "next_treatment must be an integer")
    all_t = np.append(treatments, nxt)
    if all_t.min() < 0 or all_t.max() >= N_CLASSES:
        raise CohortParseError(lineno, f"treatment index outside [0, {N_CLASSES})")
    if not isinstance(obj["survived"], bool):
        raise CohortParseError(lineno, "survived must be a boolean")
    rec = PatientRecord(str(obj["id"]), structured, notes, static, treatments, int(nxt),
                        obj["survived"])
    truth = None
    if "truth" in obj:
        t = obj["truth"]
        try:
            opt = np.asarray(t["optimal_treatments"], dtype=np.int64)
            latent = np.asarray(t["latent"], dtype=np.float64)
        except (KeyError, TypeError, ValueError):
            raise CohortParseError(lineno, "malformed truth object") from None
        if opt.shape != (T + 1,) or latent.shape != (T + 1, config.latent_dim):
            raise CohortParseError(lineno, "truth arrays do not match the sequence length")
        truth = PatientTruth(opt, latent, t.get("death_logit"), t.get("log_odds_wrong"),
                             bool(t.get("graded", False)))
    return rec, truth


def read_cohort(path) -> Cohort:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise CohortParseError(1, "empty cohort file")
    try:
        header = json.loads(lines[0])
        if header.get("format") != FORMAT_TAG:
            raise CohortParseError(1, f"unsupported format tag {header.get('format')!r}")
        config = CohortConfig(**header["config"])
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise CohortParseError(1, f"bad header ({exc})") from None
    except ConfigError as exc:
        raise CohortParseError(1, f"bad config ({exc})") from None
    records, truth = [], {}
    seen = set()
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        rec, tr = _parse_record(lineno, text, config)
        if rec.id in seen:
            raise CohortParseError(lineno, f"duplicate patient id {rec.id!r}")
        seen.add(rec.id)
        records.append(rec)
        if tr is not None:
            truth[rec.id] = tr
    return Cohort(records, config, truth)


# -- oracle diagnostics ---------------------------------------------------------


def latent_means(cohort: Cohort, survived: bool) -> np.ndarray:
    """Per-patient time-averaged latent state for one outcome group."""
    return np.array([cohort.truth[r.id].latent[:-1].mean(axis=0)
                     for r in cohort.records if r.survived == survived])


def gaussian_kl(a: np.ndarray, b: np.ndarray) -> float:
    """KL between full-covariance Gaussians fitted to two samples (rows)."""
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a, cov_b = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    k = a.shape[1]
    inv_b = np.linalg.inv(cov_b)
    diff = mu_b - mu_a
    _, logdet_a = np.linalg.slogdet(cov_a)
    _, logdet_b = np.linalg.slogdet(cov_b)
    return 0.5 * float(np.trace(inv_b @ cov_a) + diff @ inv_b @ diff - k + logdet_b - logdet_a)
