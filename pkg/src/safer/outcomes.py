"""Recurrent mortality model and counterfactual mortality reduction."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .errors import (ConfigError, InsufficientDataError, ModelStateError, PositivityWarning,
                     ShapeError)
from .nncore import Tensor, affine, as_tensors, concat
from .synthgen import N_CLASSES, Cohort, PatientRecord
from .teacher import TrainConfig, TrainLog, run_epochs

POSITIVITY_RATIO = 5.0


@dataclass
class OutcomeConfig:
    epochs: int = 40
    lr: float = 1e-2
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 1e-4
    d_h: int = 32
    recalibrate: bool = True


@dataclass
class OutcomeModel:
    """Minimal gated recurrent unit over (structured step, treatment one-hot) with a
    sigmoid death head."""

    weights: dict[str, np.ndarray]
    d_h: int
    trained: bool = False

    @classmethod
    def init(cls, d_struct: int, d_h: int = 32, seed: int = 0) -> "OutcomeModel":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
        d_in = d_struct + N_CLASSES + d_h

        def dense(fan_in, fan_out):
            return rng.normal(scale=1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

        return cls({
            "gate.W": dense(d_in, d_h), "gate.b": np.zeros(d_h),
            "cand.W": dense(d_in, d_h), "cand.b": np.zeros(d_h),
            "out.W": dense(d_h, 1), "out.b": np.zeros(1),
        }, d_h)

    def logits(self, structured: np.ndarray, treatments: np.ndarray) -> np.ndarray:
        return _logits(as_tensors(self.weights, requires_grad=False), structured, treatments).data

    def predict(self, structured: np.ndarray, treatments: np.ndarray) -> np.ndarray:
        """Death probabilities for a batch ``(B, T, d_struct)`` with aligned ``(B, T)`` treatments."""
        return expit(self.logits(structured, treatments))


def _one_hot(treatments: np.ndarray) -> np.ndarray:
    return np.eye(N_CLASSES)[treatments]


def _logits(t: dict, structured: np.ndarray, treatments: np.ndarray) -> Tensor:
    if structured.ndim != 3 or treatments.shape != structured.shape[:2]:
        raise ShapeError("structured must be B x T x d and treatments B x T")
    d_h = t["gate.b"].shape[0]
    acts = _one_hot(treatments)
    h = Tensor(np.zeros((structured.shape[0], d_h)))
    for step in range(structured.shape[1]):
        x = Tensor(np.concatenate([structured[:, step], acts[:, step]], axis=-1))
        gate = affine(concat([x, h], axis=-1), t["gate.W"], t["gate.b"]).sigmoid()
        cand = affine(concat([x, gate * h], axis=-1), t["cand.W"], t["cand.b"]).tanh()
        h = h + gate * (cand - h)
    return affine(h, t["out.W"], t["out.b"]).reshape(-1)


def aligned_treatments(records: Sequence[PatientRecord], final=None, stepwise=False) -> np.ndarray:
    """Treatment decided after each step: ``treatments[1:]`` followed by the
    decision-window treatment. ``final`` replaces the last column; with
    ``stepwise`` it replaces every column."""
    acts = np.array([np.append(r.treatments[1:], r.next_treatment) for r in records],
                    dtype=np.int64)
    if final is not None:
        final = np.asarray(final, dtype=np.int64)
        if stepwise:
            acts[:] = final[:, None]
        else:
            acts[:, -1] = final
    if acts.size and (acts.min() < 0 or acts.max() >= N_CLASSES):
        raise ShapeError("treatment index outside [0, 25)")
    return acts


def bce_loss(t: dict, structured, treatments, died) -> Tensor:
    logit = _logits(t, structured, treatments).reshape(-1, 1)
    logp = concat([Tensor(np.zeros_like(logit.data)), logit], axis=-1).log_softmax(axis=-1)
    died = np.asarray(died, dtype=np.float64)
    picked = logp * np.stack([1.0 - died, died], axis=-1)
    return -picked.sum() / len(died)


def train_outcome_model(cohort: Cohort, hyper: OutcomeConfig | None = None,
                        log: TrainLog | None = None) -> OutcomeModel:
    hyper = hyper or OutcomeConfig()
    died = ~cohort.survived()
    if len(cohort) == 0 or died.all() or not died.any():
        raise InsufficientDataError("outcome model needs both survivors and deceased")
    structured = np.stack([r.structured for r in cohort.records])
    acts = aligned_treatments(cohort.records)
    model = OutcomeModel.init(structured.shape[2], hyper.d_h, hyper.seed)
    train = TrainConfig(hyper.epochs, hyper.lr, hyper.batch_size, hyper.seed, hyper.weight_decay)
    weights = run_epochs(
        model.weights, lambda t, idx: bce_loss(t, structured[idx], acts[idx], died[idx]),
        len(cohort), train, log, stream=3)
    model = OutcomeModel(weights, hyper.d_h, trained=True)
    if hyper.recalibrate and hyper.epochs > 0:
        recalibrate_intercept(model, structured, acts, died)
    return model


def recalibrate_intercept(model: OutcomeModel, structured, treatments, died) -> float:
    """Refit the output bias alone by maximum likelihood.

    At that optimum the mean predicted risk equals the observed death rate, which
    removes the drift in overall level that minibatch training leaves behind.
    """
    z = model.logits(structured, treatments)
    rate = float(np.mean(died))
    shift = brentq(lambda b: float(expit(z + b).mean()) - rate, -50.0, 50.0, xtol=1e-12)
    model.weights["out.b"] = model.weights["out.b"] + shift
    return shift


@dataclass
class MortalityReport:
    observed_rate: float
    counterfactual_rate: float
    reduction: float
    ci_low: float
    ci_high: float
    assumptions: dict[str, str] = field(default_factory=dict)
    positivity_flags: list[int] = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("observed_rate,counterfactual_rate,reduction,ci_low,ci_high\n")
            fh.write(f"{self.observed_rate:.9g},{self.counterfactual_rate:.9g},"
                     f"{self.reduction:.9g},{self.ci_low:.9g},{self.ci_high:.9g}\n")


def assumption_checklist(cohort: Cohort) -> dict[str, str]:
    """Which identification assumptions hold by construction and which are presumed."""
    synthetic = bool(cohort.truth)
    noisy = synthetic and (cohort.config.treatment_noise > 0
                           if cohort.config.outcome_law == "logistic"
                           else cohort.config.deceased_label_noise > 0)
    by_gen = "guaranteed by the generator"
    return {
        "no_interference": by_gen if synthetic else "presumed",
        "no_hidden_variability": by_gen if synthetic else "presumed",
        "ignorability": "presumed (latent state is only observed through noisy features)",
        "positivity": by_gen if noisy else "presumed; checked against observed treatment shares",
    }


def positivity_violations(observed, recommended, ratio=POSITIVITY_RATIO) -> list[int]:
    """Classes recommended far more often than they were ever observed."""
    obs = np.bincount(np.asarray(observed, dtype=np.int64), minlength=N_CLASSES) / len(observed)
    rec = np.bincount(np.asarray(recommended, dtype=np.int64), minlength=N_CLASSES) / len(recommended)
    bad = (rec > 0) & ((obs == 0) | (rec > ratio * obs))
    return [int(k) for k in np.nonzero(bad)[0]]


Recommender = Callable[[PatientRecord], int]


def _recommendations(recommender, records) -> np.ndarray:
    if callable(recommender):
        return np.array([int(recommender(r)) for r in records], dtype=np.int64)
    recs = np.asarray(recommender, dtype=np.int64)
    if recs.shape != (len(records),):
        raise ShapeError("need exactly one recommended treatment per patient")
    return recs


def counterfactual_mortality_reduction(model: OutcomeModel, cohort: Cohort, recommender,
                                       n_boot=1000, seed=0, stepwise=False) -> MortalityReport:
    """Observed mortality minus the model's mortality under recommended treatments.

    ``recommender`` is either a callable on one record or an array with one
    treatment per patient. The interval is a percentile bootstrap over patients.
    """
    if not model.trained:
        raise ModelStateError("outcome model has not been trained")
    if len(cohort) == 0:
        raise InsufficientDataError("cohort is empty")
    if n_boot < 1:
        raise ConfigError("n_boot must be >= 1")
    recs = _recommendations(recommender, cohort.records)
    flags = positivity_violations([r.next_treatment for r in cohort.records], recs)
    if flags:
        warnings.warn(f"recommended classes {flags} fall outside observed treatment support",
                      PositivityWarning, stacklevel=2)
    structured = np.stack([r.structured for r in cohort.records])
    cf = model.predict(structured, aligned_treatments(cohort.records, recs, stepwise))
    died = (~cohort.survived()).astype(np.float64)
    diff = died - cf
    rng = np.random.default_rng(np.random.SeedSequence([seed, 47]))
    boot = diff[rng.integers(0, len(diff), size=(n_boot, len(diff)))].mean(axis=1)
    lo, hi = np.quantile(boot, [0.025, 0.975])
    observed, counterfactual = float(died.mean()), float(cf.mean())
    return MortalityReport(observed, counterfactual, observed - counterfactual, float(lo), float(hi),
                           assumption_checklist(cohort), flags)


def true_reduction(cohort: Cohort) -> float:
    """Observed mortality minus the generative death probability under optimal treatment."""
    died = ~cohort.survived()
    opt = [cohort.truth[r.id].death_probability(cohort.truth[r.id].optimal_next)
           for r in cohort.records]
    return float(died.mean() - np.mean(opt))
