"""The fusion predictor: per-modality causal self-attention, bidirectional
cross-attention, static embedding and a feedforward treatment classifier."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InsufficientDataError, NumericError, ShapeError
from .nncore import (Adam, AttentionParams, Tensor, affine, as_tensors, concat, cross_attention,
                     load_checkpoint, masked_self_attention, minibatches, save_checkpoint,
                     sinusoidal_pe, softmax, softmax_cross_entropy)
from .synthgen import N_CLASSES, Cohort, PatientRecord


@dataclass
class FusionParams:
    """All teacher weights keyed by name, plus the model width ``d_k``."""

    weights: dict[str, np.ndarray]
    d_k: int

    @classmethod
    def init(cls, d_struct: int, d_note: int, d_static: int, d_k: int = 128, seed: int = 0):
        if d_k < 2 or d_k % 2:
            raise ConfigError(f"d_k must be even, got {d_k}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))

        def dense(fan_in, fan_out):
            return rng.normal(scale=1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

        w = {
            "embed_E.W": dense(d_struct, d_k), "embed_E.b": np.zeros(d_k),
            "embed_O.W": dense(d_note, d_k), "embed_O.b": np.zeros(d_k),
        }
        for block in ("self_E", "self_O", "cross_E", "cross_O"):
            for proj in ("W_Q", "W_K", "W_V"):
                w[f"{block}.{proj}"] = dense(d_k, d_k)
        w["static.W"] = dense(d_static, d_k)
        w["static.b"] = np.zeros(d_k)
        w["head.W1"] = dense(3 * d_k, d_k)
        w["head.b1"] = np.zeros(d_k)
        w["head.W2"] = dense(d_k, N_CLASSES)
        w["head.b2"] = np.zeros(N_CLASSES)
        return cls(w, d_k)

    @classmethod
    def for_cohort(cls, cohort: Cohort, d_k: int = 128, seed: int = 0):
        c = cohort.config
        return cls.init(c.d_struct, c.d_note, c.d_static, d_k=d_k, seed=seed)

    def copy(self) -> "FusionParams":
        return FusionParams({k: v.copy() for k, v in self.weights.items()}, self.d_k)

    def save(self, path):
        save_checkpoint(path, self.weights)

    @classmethod
    def load(cls, path) -> "FusionParams":
        w = load_checkpoint(path)
        return cls(w, w["embed_E.W"].shape[1])


@dataclass
class Batch:
    structured: np.ndarray
    notes: np.ndarray
    static: np.ndarray
    labels: np.ndarray
    survived: np.ndarray

    @classmethod
    def from_records(cls, records: list[PatientRecord]) -> "Batch":
        if not records:
            raise InsufficientDataError("empty batch")
        lengths = {r.seq_len for r in records}
        if 0 in lengths:
            raise ShapeError("records need at least one time step")
        if len(lengths) != 1:
            raise ShapeError(f"records in one batch must share T, got {sorted(lengths)}")
        return cls(
            structured=np.stack([r.structured for r in records]),
            notes=np.stack([r.notes for r in records]),
            static=np.stack([r.static for r in records]),
            labels=np.array([r.next_treatment for r in records], dtype=np.int64),
            survived=np.array([r.survived for r in records], dtype=bool),
        )

    def take(self, idx) -> "Batch":
        return Batch(self.structured[idx], self.notes[idx], self.static[idx],
                     self.labels[idx], self.survived[idx])

    def __len__(self):
        return self.labels.shape[0]


def _attn(t, block):
    return AttentionParams(t[f"{block}.W_Q"], t[f"{block}.W_K"], t[f"{block}.W_V"])


def embed(t: dict, batch: Batch) -> Tensor:
    """Unified embedding ``h`` (B x 3 d_k): last cross-attention row joined with
    the static embedding."""
    d_k = t["embed_E.W"].shape[1]
    T = batch.structured.shape[1]
    if T == 0:
        raise ShapeError("empty sequence")
    if batch.structured.shape[2] != t["embed_E.W"].shape[0]:
        raise ShapeError("structured width does not match the embedding map")
    if batch.notes.shape[2] != t["embed_O.W"].shape[0]:
        raise ShapeError("note width does not match the embedding map")
    pe = sinusoidal_pe(T, d_k)
    x_e = affine(Tensor(batch.structured), t["embed_E.W"], t["embed_E.b"])
    x_o = affine(Tensor(batch.notes), t["embed_O.W"], t["embed_O.b"])
    s_e = masked_self_attention(x_e, _attn(t, "self_E"), pe=pe)
    s_o = masked_self_attention(x_o, _attn(t, "self_O"), pe=pe)
    fused = cross_attention(s_e, s_o, _attn(t, "cross_E"), _attn(t, "cross_O"))
    x_d = affine(Tensor(batch.static), t["static.W"], t["static.b"])
    return concat([fused[:, -1, :], x_d], axis=-1)


def head_logits(t: dict, h: Tensor, prefix="head") -> Tensor:
    hidden = affine(h, t[f"{prefix}.W1"], t[f"{prefix}.b1"]).tanh()
    return affine(hidden, t[f"{prefix}.W2"], t[f"{prefix}.b2"])


def _frozen(params: FusionParams):
    return as_tensors(params.weights, requires_grad=False)


def encode_cohort(params: FusionParams, records) -> np.ndarray:
    records = records.records if isinstance(records, Cohort) else records
    return embed(_frozen(params), Batch.from_records(records)).data


def encode_patient(record: PatientRecord, params: FusionParams) -> np.ndarray:
    return encode_cohort(params, [record])[0]


def logits_from_embedding(params: FusionParams, h: np.ndarray) -> np.ndarray:
    h = np.atleast_2d(h)
    if h.shape[1] != 3 * params.d_k:
        raise ShapeError(f"embedding must have length {3 * params.d_k}, got {h.shape[1]}")
    return head_logits(_frozen(params), Tensor(h)).data


def predict_treatment(h: np.ndarray, params: FusionParams) -> np.ndarray:
    """Class probabilities for one embedding (or a stack of embeddings)."""
    probs = softmax(logits_from_embedding(params, h), axis=-1)
    return probs[0] if np.ndim(h) == 1 else probs


def predict_proba(params: FusionParams, records) -> np.ndarray:
    return softmax(logits_from_embedding(params, encode_cohort(params, records)), axis=-1)


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 5e-4
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 1e-2


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("epoch,mean_loss\n")
            for i, loss in enumerate(self.epoch_loss):
                fh.write(f"{i},{loss:.9g}\n")


def run_epochs(weights: dict, loss_fn, n: int, hyper: TrainConfig, log: TrainLog | None = None,
               trainable=None, stream=0, optimizer: Adam | None = None) -> dict:
    """Minibatch Adam over ``n`` items; ``loss_fn(tensors, idx)`` returns the batch loss.

    Batch order comes from the stream ``(hyper.seed, stream)``; pass
    ``optimizer`` to carry moment estimates across calls.
    """
    rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, 31, stream]))
    opt = optimizer or Adam(lr=hyper.lr, weight_decay=hyper.weight_decay)
    names = list(weights) if trainable is None else list(trainable)
    for epoch in range(hyper.epochs):
        total = 0.0
        for b, idx in enumerate(minibatches(n, hyper.batch_size, rng)):
            tensors = {k: Tensor(v, requires_grad=k in names, name=k) for k, v in weights.items()}
            loss = loss_fn(tensors, idx)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            grads = {k: (tensors[k].grad if tensors[k].grad is not None
                         else np.zeros_like(weights[k])) for k in names}
            weights = opt.step(weights, grads)
            total += value * len(idx)
        if log is not None:
            log.epoch_loss.append(total / n)
    return weights


def mean_cross_entropy(t: dict, batch: Batch) -> Tensor:
    return softmax_cross_entropy(head_logits(t, embed(t, batch)), batch.labels).mean()


def train_teacher(train: Cohort, params0: FusionParams, hyper: TrainConfig | None = None,
                  log: TrainLog | None = None) -> FusionParams:
    """Cross-entropy training on the decision-window label of every patient."""
    hyper = hyper or TrainConfig()
    if len(train) == 0:
        raise InsufficientDataError("training split is empty")
    batch = Batch.from_records(train.records)
    weights = run_epochs(dict(params0.weights),
                         lambda t, idx: mean_cross_entropy(t, batch.take(idx)),
                         len(batch), hyper, log)
    return FusionParams(weights, params0.d_k)
