"""Survivor-only student head, KL uncertainty scores and risk-aware fine-tuning."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (ConfigError, InsufficientDataError, NumericError, PreconditionError,
                     ShapeError)
from .nncore import (Adam, Tensor, as_tensors, kl_from_logits, load_checkpoint, save_checkpoint,
                     softmax_cross_entropy)
from .synthgen import N_CLASSES, Cohort, PatientRecord
from .teacher import (Batch, FusionParams, TrainConfig, TrainLog, embed, encode_cohort,
                      head_logits, logits_from_embedding, run_epochs)


@dataclass
class StudentParams:
    """MLP ``3 d_k -> d_k (tanh) -> 25`` trained on frozen teacher embeddings."""

    weights: dict[str, np.ndarray]
    weight_decay: float = 1e-4

    @classmethod
    def init(cls, d_in: int, d_hidden: int, seed: int = 0, weight_decay: float = 1e-4):
        if weight_decay <= 0:
            raise ConfigError("student weight decay must be positive")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
        return cls({
            "student.W1": rng.normal(scale=1.0 / math.sqrt(d_in), size=(d_in, d_hidden)),
            "student.b1": np.zeros(d_hidden),
            "student.W2": rng.normal(scale=1.0 / math.sqrt(d_hidden), size=(d_hidden, N_CLASSES)),
            "student.b2": np.zeros(N_CLASSES),
        }, weight_decay)

    def logits(self, h) -> np.ndarray:
        t = as_tensors(self.weights, requires_grad=False)
        return head_logits(t, Tensor(np.atleast_2d(h)), prefix="student").data

    def save(self, path):
        save_checkpoint(path, {**self.weights, "meta.weight_decay": np.array(self.weight_decay)})

    @classmethod
    def load(cls, path) -> "StudentParams":
        w = load_checkpoint(path)
        decay = float(w.pop("meta.weight_decay"))
        return cls(w, decay)


@dataclass
class StudentConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 1e-4


def train_student(embeddings: np.ndarray, labels, survived, hyper: StudentConfig | None = None,
                  log: TrainLog | None = None) -> StudentParams:
    """Fit the student on survivor embeddings; deceased rows are a contract violation."""
    hyper = hyper or StudentConfig()
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    survived = np.asarray(survived, dtype=bool)
    if embeddings.ndim != 2 or embeddings.shape[1] % 3:
        raise ShapeError(f"embeddings must be N x 3d_k, got {embeddings.shape}")
    if len(embeddings) == 0:
        raise InsufficientDataError("no survivors to train the student on")
    if not survived.all():
        raise PreconditionError(f"student input contains {int((~survived).sum())} deceased patients")
    d_k = embeddings.shape[1] // 3
    params = StudentParams.init(embeddings.shape[1], d_k, seed=hyper.seed,
                                weight_decay=hyper.weight_decay)
    h = Tensor(embeddings)

    def loss(t, idx):
        logits = head_logits(t, h[idx], prefix="student")
        return softmax_cross_entropy(logits, labels[idx]).mean()

    train = TrainConfig(hyper.epochs, hyper.lr, hyper.batch_size, hyper.seed, hyper.weight_decay)
    weights = run_epochs(dict(params.weights), loss, len(labels), train, log, stream=1)
    return StudentParams(weights, hyper.weight_decay)


def train_student_on_cohort(teacher: FusionParams, cohort: Cohort,
                            hyper: StudentConfig | None = None, log=None) -> StudentParams:
    surv = cohort.survivors
    return train_student(encode_cohort(teacher, surv), surv.labels(), surv.survived(), hyper, log)


def lipschitz_bound(student: StudentParams) -> float:
    """Product of layer spectral norms (tanh is 1-Lipschitz)."""
    return float(np.prod([np.linalg.norm(student.weights[k], 2)
                          for k in ("student.W1", "student.W2")]))


# -- scores ---------------------------------------------------------------------


def kl_uncertainty(p_teacher, p_student) -> float:
    """KL(p_teacher || p_student) in nats."""
    p = np.asarray(p_teacher, dtype=np.float64)
    q = np.asarray(p_student, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError("distributions must have the same length")
    if np.any(q <= 0):
        raise NumericError("student distribution has a zero entry")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise NumericError("inputs must be probability vectors")
    nz = p > 0
    return max(0.0, float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz])))))


def kappa_from_embeddings(teacher: FusionParams, student: StudentParams, h) -> np.ndarray:
    return np.maximum(kl_from_logits(Tensor(logits_from_embedding(teacher, h)),
                                     Tensor(student.logits(h))).data, 0.0)


def compute_kappa(teacher: FusionParams, student: StudentParams, records) -> np.ndarray:
    return kappa_from_embeddings(teacher, student, encode_cohort(teacher, records))


def normalize_uncertainty(kappas, reference: tuple[float, float] | None = None) -> np.ndarray:
    """Min-max scale to [0, 1].

    Without ``reference`` the bounds are the list's own min and max; a constant
    list maps to zeros. With ``reference=(lo, hi)`` from a training cohort the
    result is clipped to [0, 1].
    """
    k = np.asarray(kappas, dtype=np.float64)
    if k.size == 0:
        raise InsufficientDataError("cannot normalize an empty list")
    lo, hi = (float(k.min()), float(k.max())) if reference is None else reference
    if hi <= lo:
        return np.zeros_like(k)
    return np.clip((k - lo) / (hi - lo), 0.0, 1.0)


@dataclass
class UncertaintyRecord:
    patient_id: str
    kappa: float
    kappa_hat: float
    survived: bool


def uncertainty_records(teacher, student, cohort: Cohort, reference=None):
    """Scores for every patient, plus the (min, max) used to normalize them."""
    kappa = compute_kappa(teacher, student, cohort)
    if reference is None:
        reference = (float(kappa.min()), float(kappa.max()))
    hat = normalize_uncertainty(kappa, reference)
    recs = [UncertaintyRecord(r.id, float(k), float(kh), r.survived)
            for r, k, kh in zip(cohort.records, kappa, hat)]
    return recs, reference


def write_uncertainty_csv(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("patient_id,survived,kappa,kappa_hat\n")
        for r in records:
            fh.write(f"{r.patient_id},{int(r.survived)},{r.kappa:.9g},{r.kappa_hat:.9g}\n")


# -- risk-aware fine-tuning -----------------------------------------------------


def risk_aware_loss(t: dict, batch: Batch, kappa_hat, gamma: float,
                    student: StudentParams | None = None) -> Tensor:
    """``mean_i[(1 - kappa_hat_i) * CE_i + gamma * kappa_i^2]``.

    ``kappa_hat`` is a fixed per-row weight; ``kappa_i`` is evaluated live
    against the frozen student so the penalty reaches the teacher weights.
    """
    h = embed(t, batch)
    logits = head_logits(t, h)
    ce = softmax_cross_entropy(logits, batch.labels)
    loss = ((1.0 - np.asarray(kappa_hat, dtype=np.float64)) * ce).mean()
    if gamma:
        if student is None:
            raise ConfigError("a positive gamma needs the student model")
        s = as_tensors(student.weights, requires_grad=False)
        kappa = kl_from_logits(logits, head_logits(s, h, prefix="student"))
        loss = loss + (kappa * kappa).mean() * gamma
    return loss


@dataclass
class FinetuneConfig:
    gamma: float = 1.0
    rounds: int = 10
    epochs_per_round: int = 1
    lr: float = 5e-4
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0


def risk_aware_finetune(teacher: FusionParams, cohort: Cohort, student: StudentParams,
                        hyper: FinetuneConfig | None = None, records=None,
                        log: TrainLog | None = None) -> FusionParams:
    """Fine-tune every teacher weight under the risk-aware loss.

    Normalized scores are frozen within a round and recomputed between rounds
    against the current teacher; ``records`` seeds the first round.
    """
    hyper = hyper or FinetuneConfig()
    if hyper.gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {hyper.gamma}")
    if len(cohort) == 0:
        raise InsufficientDataError("fine-tuning cohort is empty")
    if records is not None:
        if [r.patient_id for r in records] != [r.id for r in cohort.records]:
            raise PreconditionError("need exactly one uncertainty record per cohort patient, in order")
        kappa_hat = np.array([r.kappa_hat for r in records])
    else:
        kappa_hat = None
    batch = Batch.from_records(cohort.records)
    weights = dict(teacher.weights)
    train = TrainConfig(hyper.epochs_per_round, hyper.lr, hyper.batch_size, hyper.seed,
                        hyper.weight_decay)
    opt = Adam(lr=hyper.lr, weight_decay=hyper.weight_decay)
    for rnd in range(hyper.rounds):
        if kappa_hat is None or rnd > 0:
            current = FusionParams(weights, teacher.d_k)
            kappa_hat = normalize_uncertainty(compute_kappa(current, student, cohort))
        weights = run_epochs(
            weights,
            lambda t, idx, w=kappa_hat: risk_aware_loss(t, batch.take(idx), w[idx], hyper.gamma,
                                                        student),
            len(batch), train, log, stream=rnd, optimizer=opt)
    return FusionParams(weights, teacher.d_k)


# -- diagnostics ----------------------------------------------------------------


@dataclass
class GapResult:
    gap: float
    ci_low: float
    ci_high: float
    n_survivors: int
    n_deceased: int

    @property
    def excludes_zero(self) -> bool:
        return self.ci_low > 0 or self.ci_high < 0


def bootstrap_mean_ci(values, n_boot=1000, seed=0, level=0.95):
    values = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 41]))
    means = values[rng.integers(0, len(values), size=(n_boot, len(values)))].mean(axis=1)
    tail = (1 - level) / 2
    return float(values.mean()), float(np.quantile(means, tail)), float(np.quantile(means, 1 - tail))


def gap_from_scores(kappa, survived, n_boot=1000, seed=0) -> GapResult:
    """Mean score of deceased minus survivors with a stratified percentile bootstrap."""
    kappa = np.asarray(kappa, dtype=np.float64)
    survived = np.asarray(survived, dtype=bool)
    dec, surv = kappa[~survived], kappa[survived]
    if len(dec) == 0 or len(surv) == 0:
        raise InsufficientDataError("uncertainty gap needs both survivors and deceased")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 43]))
    boot = (dec[rng.integers(0, len(dec), size=(n_boot, len(dec)))].mean(axis=1)
            - surv[rng.integers(0, len(surv), size=(n_boot, len(surv)))].mean(axis=1))
    lo, hi = np.quantile(boot, [0.025, 0.975])
    return GapResult(float(dec.mean() - surv.mean()), float(lo), float(hi), len(surv), len(dec))


def uncertainty_gap(teacher: FusionParams, student: StudentParams, cohort: Cohort,
                    n_boot=1000, seed=0) -> GapResult:
    return gap_from_scores(compute_kappa(teacher, student, cohort), cohort.survived(),
                           n_boot=n_boot, seed=seed)


def _check_windows(windows, T):
    windows = [int(w) for w in windows]
    if not windows:
        raise ConfigError("window list is empty")
    if min(windows) < 1 or max(windows) > T:
        raise ConfigError(f"windows must lie in [1, {T}]")
    return windows


def uncertainty_trajectory(record: PatientRecord, teacher: FusionParams, student: StudentParams,
                           windows) -> np.ndarray:
    """Score computed on each prefix window ``record[:w]``."""
    windows = _check_windows(windows, record.seq_len)
    return np.array([compute_kappa(teacher, student, [record.truncated(w)])[0] for w in windows])


def cohort_trajectories(cohort: Cohort, teacher, student, windows) -> dict[str, np.ndarray]:
    """Per-window mean score for survivors and deceased (prefix windows, batched)."""
    windows = _check_windows(windows, cohort.records[0].seq_len)
    survived = cohort.survived()
    out = {"window": np.array(windows), "survivors": [], "deceased": []}
    for w in windows:
        k = compute_kappa(teacher, student, [r.truncated(w) for r in cohort.records])
        out["survivors"].append(k[survived].mean() if survived.any() else np.nan)
        out["deceased"].append(k[~survived].mean() if (~survived).any() else np.nan)
    out["survivors"] = np.array(out["survivors"])
    out["deceased"] = np.array(out["deceased"])
    return out
