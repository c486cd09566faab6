"""Classification and ranking metrics on the survivor evaluation subset."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, InsufficientDataError, ShapeError, UndefinedMetricError
from .synthgen import Cohort


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney statistic; tied scores count one half."""
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise ShapeError("scores must be N x C and labels length N")
    if labels.size and (labels.min() < 0 or labels.max() >= scores.shape[1]):
        raise ShapeError("label outside the score columns")
    return scores, labels


def auc_with_skips(scores, labels, mode="macro") -> tuple[float, list[int]]:
    """One-vs-rest AUC plus the classes left out of the macro average."""
    scores, labels = _check(scores, labels)
    if len(labels) < 2 or len(np.unique(labels)) < 2:
        raise UndefinedMetricError("AUC needs at least two distinct labels")
    onehot = labels[:, None] == np.arange(scores.shape[1])[None, :]
    if mode == "micro":
        return _binary_auc(scores.ravel(), onehot.ravel()), []
    if mode != "macro":
        raise ConfigError(f"mode must be 'micro' or 'macro', got {mode!r}")
    present = onehot.any(axis=0)
    per_class = [_binary_auc(scores[:, c], onehot[:, c]) for c in np.nonzero(present)[0]]
    return float(np.mean(per_class)), [int(c) for c in np.nonzero(~present)[0]]


def auc(scores, labels, mode="macro") -> float:
    return auc_with_skips(scores, labels, mode)[0]


def label_ranks(scores, labels) -> np.ndarray:
    """1-based rank of each true label; equal scores rank the lower class index first."""
    scores, labels = _check(scores, labels)
    own = scores[np.arange(len(labels)), labels][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    ahead = (scores > own) | ((scores == own) & (idx < labels[:, None]))
    return ahead.sum(axis=1) + 1


def hr_at_k(scores, labels, k=3) -> float:
    if not 1 <= k <= np.shape(scores)[1]:
        raise ConfigError("k must lie in [1, number of classes]")
    return float(np.mean(label_ranks(scores, labels) <= k))


def mrr_at_k(scores, labels, k=3) -> float:
    if not 1 <= k <= np.shape(scores)[1]:
        raise ConfigError("k must lie in [1, number of classes]")
    ranks = label_ranks(scores, labels)
    return float(np.mean(np.where(ranks <= k, 1.0 / ranks, 0.0)))


@dataclass
class MetricsReport:
    micro_auc: float
    macro_auc: float
    hr_at_3: float
    mrr_at_3: float
    mortality_reduction: float
    n_eval: int
    subset: str = "survivors"
    skipped_classes: list[int] = field(default_factory=list)

    def to_json(self, path=None) -> str:
        payload = {k: (None if isinstance(v, float) and math.isnan(v) else v)
                   for k, v in asdict(self).items()}
        text = json.dumps(payload, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, path):
        cols = ["subset", "n_eval", "micro_auc", "macro_auc", "hr_at_3", "mrr_at_3",
                "mortality_reduction", "skipped_classes"]
        vals = asdict(self)
        vals["skipped_classes"] = " ".join(str(c) for c in self.skipped_classes)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(cols) + "\n")
            fh.write(",".join(f"{vals[c]:.9g}" if isinstance(vals[c], float) else str(vals[c])
                              for c in cols) + "\n")


def evaluate_scores(scores, labels, subset="survivors", mortality_reduction=math.nan,
                    k=3) -> MetricsReport:
    scores, labels = _check(scores, labels)
    if len(labels) == 0:
        raise InsufficientDataError("evaluation subset is empty")
    micro, _ = auc_with_skips(scores, labels, "micro")
    macro, skipped = auc_with_skips(scores, labels, "macro")
    return MetricsReport(micro, macro, hr_at_k(scores, labels, k), mrr_at_k(scores, labels, k),
                         float(mortality_reduction), len(labels), subset, skipped)


def evaluate_model(model, cohort: Cohort, subset="survivors", outcome_model=None,
                   n_boot=1000, seed=0) -> MetricsReport:
    """Ranking metrics on the chosen subset; mortality reduction over the full cohort.

    ``model`` is a teacher parameter set. Without an outcome model the
    mortality field is NaN.
    """
    from .outcomes import counterfactual_mortality_reduction
    from .teacher import predict_proba

    if subset not in ("survivors", "all"):
        raise ConfigError("subset must be 'survivors' or 'all'")
    part = cohort.survivors if subset == "survivors" else cohort
    if len(part) == 0:
        raise InsufficientDataError(f"no patients in subset {subset!r}")
    reduction = math.nan
    if outcome_model is not None:
        recs = predict_proba(model, cohort).argmax(axis=1)
        reduction = counterfactual_mortality_reduction(outcome_model, cohort, recs,
                                                       n_boot=n_boot, seed=seed).reduction
    probs = predict_proba(model, part)
    return evaluate_scores(probs, part.labels(), subset, reduction)
