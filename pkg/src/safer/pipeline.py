"""Run configuration and the end-to-end pipeline stages shared by the CLI and tests."""
from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import log_softmax

from .conformal import (DEFAULT_ALPHAS, DEFAULT_CS, ScorePool, clip_bound, fit_score_predictor)
from .errors import ConfigError, InsufficientDataError
from .outcomes import OutcomeConfig
from .synthgen import Cohort, CohortConfig
from .teacher import FusionParams, TrainConfig, encode_cohort, logits_from_embedding
from .uncertainty import FinetuneConfig, StudentConfig, StudentParams, kappa_from_embeddings

SEED_ENV = "SAFER_SEED"
PREDICTOR_FEATURES = ("log_probs", "embedding", "both")
STAGES = ("cohort", "split", "teacher", "student", "finetune", "outcome", "conformal", "case_study")


def derive_seed(master: int, stage: str) -> int:
    """Independent per-stage seed drawn from the master seed."""
    return int(np.random.SeedSequence([master, STAGES.index(stage)]).generate_state(1)[0])


def parse_grid(text: str) -> tuple[float, ...]:
    """``start:stop:step`` (inclusive) or a comma-separated list."""
    text = text.strip()
    if not text:
        raise ConfigError("empty grid")
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0 or stop < start:
                raise ConfigError(f"bad range {text!r}")
            n = int(round((stop - start) / step)) + 1
            return tuple(round(start + i * step, 10) for i in range(n))
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse grid {text!r}") from None


def format_grid(values) -> str:
    return ",".join(f"{v:g}" for v in values)


@dataclass
class TeacherSection:
    d_k: int = 128
    epochs: int = TrainConfig.epochs
    lr: float = TrainConfig.lr
    batch_size: int = TrainConfig.batch_size
    weight_decay: float = TrainConfig.weight_decay


@dataclass
class ConformalSection:
    ridge_lambda: float = 100.0
    clip_quantile: float = 0.999
    predictor_fit: str = "train"
    predictor_features: str = "log_probs"
    alphas: tuple = DEFAULT_ALPHAS
    cs: tuple = DEFAULT_CS
    replicates: int = 500
    alpha: float = 0.1
    c: float = 0.3


@dataclass
class CaseStudySection:
    survivors: int = 10
    deceased: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    split: tuple = (0.8, 0.1, 0.1)
    cohort: dict = field(default_factory=dict)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    student: StudentConfig = field(default_factory=StudentConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    outcome: OutcomeConfig = field(default_factory=OutcomeConfig)
    conformal: ConformalSection = field(default_factory=ConformalSection)
    case_study: CaseStudySection = field(default_factory=CaseStudySection)

    # -- seeds and derived stage configs --

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    def cohort_config(self, **overrides) -> CohortConfig:
        values = {**self.cohort, "seed": self.stage_seed("cohort"), **overrides}
        return CohortConfig.from_mapping(values)

    def teacher_train(self) -> TrainConfig:
        t = self.teacher
        return TrainConfig(t.epochs, t.lr, t.batch_size, self.stage_seed("teacher"), t.weight_decay)

    def teacher_init(self, cohort: Cohort) -> FusionParams:
        return FusionParams.for_cohort(cohort, d_k=self.teacher.d_k, seed=self.stage_seed("teacher"))

    def student_hyper(self) -> StudentConfig:
        return _with_seed(self.student, self.stage_seed("student"))

    def finetune_hyper(self) -> FinetuneConfig:
        return _with_seed(self.finetune, self.stage_seed("finetune"))

    def outcome_hyper(self) -> OutcomeConfig:
        return _with_seed(self.outcome, self.stage_seed("outcome"))

    def snapshot(self) -> dict:
        out = asdict(self)
        out["conformal"]["alphas"] = list(self.conformal.alphas)
        out["conformal"]["cs"] = list(self.conformal.cs)
        out["split"] = list(self.split)
        return out


def _with_seed(section, seed):
    return type(section)(**{**asdict(section), "seed": seed})


def _coerce(section_obj, key, raw, where):
    names = {f.name: f for f in fields(section_obj)}
    if key not in names:
        raise ConfigError(f"unknown option {key!r} in [{where}]")
    if key == "seed":
        raise ConfigError(f"set the seed under [run], not [{where}]")
    default = getattr(section_obj, key)
    try:
        if isinstance(default, bool):
            value = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(default, tuple):
            value = parse_grid(raw)
        else:
            value = type(default)(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} in [{where}]") from None
    setattr(section_obj, key, value)


def load_config(path=None, text: str | None = None, env=None) -> RunConfig:
    """Read an INI-style config; every key is optional.

    The environment variable ``SAFER_SEED`` overrides ``[run] seed``.
    """
    parser = configparser.ConfigParser()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    if text is not None:
        parser.read_string(text)
    cfg = RunConfig()
    sections = {"teacher": cfg.teacher, "student": cfg.student, "finetune": cfg.finetune,
                "outcome": cfg.outcome, "conformal": cfg.conformal, "case_study": cfg.case_study}
    for name in parser.sections():
        items = dict(parser.items(name))
        if name == "run":
            for key, raw in items.items():
                if key == "seed":
                    cfg.seed = int(raw)
                elif key == "threads":
                    cfg.threads = int(raw)
                elif key == "split":
                    cfg.split = parse_grid(raw)
                else:
                    raise ConfigError(f"unknown option {key!r} in [run]")
        elif name == "cohort":
            if "seed" in items:
                raise ConfigError("set the seed under [run], not [cohort]")
            cfg.cohort = items
            CohortConfig.from_mapping(items)  # validate early
        elif name in sections:
            for key, raw in items.items():
                _coerce(sections[name], key, raw, name)
        else:
            raise ConfigError(f"unknown config section [{name}]")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    if cfg.conformal.predictor_fit not in ("train", "calibration"):
        raise ConfigError("predictor_fit must be 'train' or 'calibration'")
    if cfg.conformal.predictor_features not in PREDICTOR_FEATURES:
        raise ConfigError(f"predictor_features must be one of {PREDICTOR_FEATURES}")
    return cfg


# -- conformal score table ------------------------------------------------------


@dataclass
class ScoreTable:
    """Per-patient scores for the calibration and test splits.

    ``kappa_norm`` is the raw score clipped at the training bound and min-max
    scaled by the training range; thresholds ``c`` live on this scale.
    """

    split: list[str]
    patient_id: list[str]
    survived: np.ndarray
    kappa: np.ndarray
    kappa_norm: np.ndarray
    kappa_pred: np.ndarray
    lower: float
    bound: float

    def pool(self) -> ScorePool:
        order = np.argsort([s != "cal" for s in self.split], kind="stable")
        n_cal = sum(s == "cal" for s in self.split)
        return ScorePool(self.kappa_norm[order], self.kappa_pred[order], n_cal, 1.0)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("split,patient_id,survived,kappa,kappa_norm,kappa_pred\n")
            for row in zip(self.split, self.patient_id, self.survived, self.kappa,
                           self.kappa_norm, self.kappa_pred):
                s, pid, surv, k, kn, kp = row
                fh.write(f"{s},{pid},{int(surv)},{k:.9g},{kn:.9g},{kp:.9g}\n")

    @classmethod
    def from_csv(cls, path) -> "ScoreTable":
        import csv

        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise InsufficientDataError(f"{path} has no score rows")
        try:
            return cls([r["split"] for r in rows], [r["patient_id"] for r in rows],
                       np.array([r["survived"] == "1" for r in rows]),
                       np.array([float(r["kappa"]) for r in rows]),
                       np.array([float(r["kappa_norm"]) for r in rows]),
                       np.array([float(r["kappa_pred"]) for r in rows]), 0.0, 1.0)
        except KeyError as exc:
            raise ConfigError(f"{path} is missing column {exc}") from None


def predictor_features(teacher: FusionParams, student: StudentParams, h: np.ndarray,
                       kind: str = "log_probs") -> np.ndarray:
    """Label-free inputs for the score regression.

    ``log_probs`` stacks the teacher and student log-probabilities, ``embedding``
    is the unified embedding alone and ``both`` joins the two.
    """
    if kind == "embedding":
        return h
    logp = np.hstack([log_softmax(logits_from_embedding(teacher, h), axis=-1),
                      log_softmax(student.logits(h), axis=-1)])
    if kind == "log_probs":
        return logp
    if kind == "both":
        return np.hstack([h, logp])
    raise ConfigError(f"unknown predictor features {kind!r}")


def score_table(teacher: FusionParams, student: StudentParams, train: Cohort, cal: Cohort,
                test: Cohort, section: ConformalSection | None = None) -> ScoreTable:
    """KL scores for every split, normalised by the training range, plus the
    ridge-predicted score used to rank calibration and test points."""
    section = section or ConformalSection()
    h_train = encode_cohort(teacher, train)
    k_train = kappa_from_embeddings(teacher, student, h_train)
    lower, bound = float(k_train.min()), clip_bound(k_train, section.clip_quantile)
    span = bound - lower if bound > lower else 1.0

    def norm(k):
        return np.clip((np.minimum(k, bound) - lower) / span, 0.0, 1.0)

    h_cal, h_test = encode_cohort(teacher, cal), encode_cohort(teacher, test)
    k_cal = kappa_from_embeddings(teacher, student, h_cal)
    k_test = kappa_from_embeddings(teacher, student, h_test)
    def feats(h):
        return predictor_features(teacher, student, h, section.predictor_features)

    if section.predictor_fit == "train":
        predictor = fit_score_predictor(feats(h_train), norm(k_train), section.ridge_lambda)
    else:
        predictor = fit_score_predictor(feats(h_cal), norm(k_cal), section.ridge_lambda)
    h_all = np.concatenate([h_cal, h_test])
    k_all = np.concatenate([k_cal, k_test])
    recs = cal.records + test.records
    return ScoreTable(
        ["cal"] * len(cal) + ["test"] * len(test), [r.id for r in recs],
        np.array([r.survived for r in recs]), k_all, norm(k_all),
        np.clip(predictor.predict(feats(h_all)), 0.0, 1.0), lower, bound)


@dataclass
class Prepared:
    cohort: Cohort
    train: Cohort
    cal: Cohort
    test: Cohort
    teacher: FusionParams
    student: StudentParams


def prepare(cfg: RunConfig) -> Prepared:
    """Generate, split and fit the teacher/student pair from the master seed."""
    from .synthgen import generate_cohort, split_cohort
    from .teacher import train_teacher
    from .uncertainty import train_student_on_cohort

    cohort = generate_cohort(cfg.cohort_config())
    train, cal, test = split_cohort(cohort, cfg.split, cfg.stage_seed("split"))
    teacher = train_teacher(train, cfg.teacher_init(cohort), cfg.teacher_train())
    student = train_student_on_cohort(teacher, train, cfg.student_hyper())
    return Prepared(cohort, train, cal, test, teacher, student)


def case_study_cohort(cfg: RunConfig, survivors: int, deceased: int) -> Cohort:
    """Fresh held-out patients drawn from the configured generator."""
    from .synthgen import generate_cohort

    return generate_cohort(cfg.cohort_config(n_survivors=survivors, n_deceased=deceased,
                                             seed=cfg.stage_seed("case_study")))
