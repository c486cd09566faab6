"""Minimal reverse-mode differentiation over numpy arrays.

Everything runs in float64. A :class:`Tensor` records the operation that
produced it; calling :meth:`Tensor.backward` on a scalar walks the graph in
reverse topological order, visiting each node once.

The layer helpers (attention, positional encoding, cross-entropy) accept
either 2-D ``T x d`` inputs or batched ``B x T x d`` inputs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

MASK_VALUE = -1e9


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An array node in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    # make ``ndarray <op> Tensor`` defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def _child(self, data, parents, backward):
        needs = any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                      _backward=backward if needs else None)

    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return self._child(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            a._accumulate(-g)

        return self._child(-a.data, (a,), backward)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return self._child(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / other)

    def __pow__(self, exponent: float):
        a = self

        def backward(g):
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

        return self._child(a.data ** exponent, (a,), backward)

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self, other

        # a stack of rows times one matrix: fold the leading axes into a single GEMM
        folded = b.ndim == 2 and a.ndim > 2

        def backward(g):
            if a.requires_grad:
                gb = np.swapaxes(b.data, -1, -2) if b.ndim > 1 else b.data
                ga = g @ gb if b.ndim > 1 else np.multiply.outer(g, b.data)
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                if folded:
                    gbv = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gbv = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
                b._accumulate(gbv)

        if folded:
            out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
        else:
            out = a.data @ b.data
        return self._child(out, (a, b), backward)

    @property
    def mT(self):
        a = self

        def backward(g):
            a._accumulate(np.swapaxes(g, -1, -2))

        return self._child(np.swapaxes(a.data, -1, -2), (a,), backward)

    def __getitem__(self, index):
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            a._accumulate(full)

        return self._child(a.data[index], (a,), backward)

    def reshape(self, *shape):
        a = self

        def backward(g):
            a._accumulate(g.reshape(a.shape))

        return self._child(a.data.reshape(*shape), (a,), backward)

    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

        return self._child(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def tanh(self):
        a = self
        out = np.tanh(a.data)

        def backward(g):
            a._accumulate(g * (1.0 - out * out))

        return self._child(out, (a,), backward)

    def sigmoid(self):
        a = self
        out = _sigmoid(a.data)

        def backward(g):
            a._accumulate(g * out * (1.0 - out))

        return self._child(out, (a,), backward)

    def exp(self):
        a = self
        out = np.exp(a.data)

        def backward(g):
            a._accumulate(g * out)

        return self._child(out, (a,), backward)

    def log(self):
        a = self

        def backward(g):
            a._accumulate(g / a.data)

        return self._child(np.log(a.data), (a,), backward)

    def softmax(self, axis=-1):
        a = self
        out = softmax(a.data, axis=axis)

        def backward(g):
            a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

        return self._child(out, (a,), backward)

    def log_softmax(self, axis=-1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

        def backward(g):
            a._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

        return self._child(out, (a,), backward)


def concat(tensors: Iterable[Tensor], axis=-1) -> Tensor:
    parts = [Tensor._lift(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for part, piece in zip(parts, np.split(g, splits, axis=axis)):
            if part.requires_grad:
                part._accumulate(piece)

    return parts[0]._child(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray, axis=-1) -> np.ndarray:
    """Max-shifted softmax on a plain array."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def as_tensors(weights: Mapping[str, np.ndarray], requires_grad=True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in weights.items()}


# -- layers ---------------------------------------------------------------------


@dataclass
class AttentionParams:
    """Single-head query/key/value projections (arrays or Tensors)."""

    W_Q: object
    W_K: object
    W_V: object

    @property
    def d_k(self) -> int:
        return np.shape(getattr(self.W_Q, "data", self.W_Q))[1]


def sinusoidal_pe(T: int, d_k: int) -> np.ndarray:
    if T < 1:
        raise ConfigError("positional encoding needs T >= 1")
    if d_k < 2 or d_k % 2:
        raise ConfigError(f"positional encoding needs an even d_k, got {d_k}")
    t = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(0, d_k, 2, dtype=np.float64)
    angle = t / np.power(10000.0, i / d_k)
    pe = np.empty((T, d_k))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def causal_mask(T: int) -> np.ndarray:
    """0 on and below the diagonal, a large negative value strictly above."""
    return np.triu(np.full((T, T), MASK_VALUE), k=1)


def _check_attention_shapes(X, params: AttentionParams):
    d_in = X.shape[-1]
    for name in ("W_Q", "W_K", "W_V"):
        w = getattr(params, name)
        if np.ndim(getattr(w, "data", w)) != 2 or np.shape(getattr(w, "data", w))[0] != d_in:
            raise ShapeError(f"{name} must be {d_in} x d_k, got {np.shape(getattr(w, 'data', w))}")


def scaled_attention(Q: Tensor, K: Tensor, V: Tensor, mask=None, return_weights=False):
    d_k = Q.shape[-1]
    logits = Q @ K.mT
    if mask is not None:
        logits = logits + mask
    weights = (logits * (1.0 / np.sqrt(d_k))).softmax(axis=-1)
    out = weights @ V
    return (out, weights) if return_weights else out


def masked_self_attention(X, params: AttentionParams, mask=None, pe=None, return_weights=False):
    """Causal single-head self-attention followed by an additive position encoding.

    ``softmax((X W_Q (X W_K)^T + M) / sqrt(d_k)) X W_V + PE``
    """
    X = Tensor._lift(X)
    if X.ndim not in (2, 3):
        raise ShapeError(f"self-attention input must be T x d or B x T x d, got {X.shape}")
    _check_attention_shapes(X, params)
    T = X.shape[-2]
    if mask is None:
        mask = causal_mask(T)
    if np.shape(mask) != (T, T):
        raise ShapeError(f"mask must be {T} x {T}, got {np.shape(mask)}")
    out, weights = scaled_attention(X @ params.W_Q, X @ params.W_K, X @ params.W_V,
                                    mask=mask, return_weights=True)
    if pe is not None:
        if np.shape(pe) != out.shape[-2:]:
            raise ShapeError(f"position encoding must be {out.shape[-2:]}, got {np.shape(pe)}")
        out = out + pe
    return (out, weights) if return_weights else out


def cross_attention(S_E, S_O, params_E: AttentionParams, params_O: AttentionParams,
                    return_weights=False):
    """Bidirectional cross-attention between the two modality streams.

    Branch one lets the note stream query the structured stream, branch two
    the reverse; the outputs are concatenated on the feature axis.
    """
    S_E, S_O = Tensor._lift(S_E), Tensor._lift(S_O)
    if S_E.shape != S_O.shape:
        raise ShapeError(f"cross-attention streams differ in shape: {S_E.shape} vs {S_O.shape}")
    _check_attention_shapes(S_E, params_E)
    _check_attention_shapes(S_O, params_O)
    b1, w1 = scaled_attention(S_O @ params_E.W_Q, S_E @ params_E.W_K, S_E @ params_E.W_V,
                              return_weights=True)
    b2, w2 = scaled_attention(S_E @ params_O.W_Q, S_O @ params_O.W_K, S_O @ params_O.W_V,
                              return_weights=True)
    out = concat([b1, b2], axis=-1)
    return (out, (w1, w2)) if return_weights else out


def affine(x, W, b):
    return x @ W + b


def cross_entropy(pred_dist, label: int) -> float:
    """Negative log-likelihood of ``label`` under a probability vector."""
    pred = np.asarray(pred_dist, dtype=np.float64)
    if not 0 <= label < pred.shape[-1]:
        raise IndexError(f"label {label} outside [0, {pred.shape[-1]})")
    if np.any(pred <= 0) or abs(pred.sum() - 1.0) > 1e-6:
        raise NumericError("prediction must be strictly positive and sum to one")
    return float(-np.log(pred[label]))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-row cross-entropy from raw logits; d/dlogits = softmax - onehot."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"labels must lie in [0, {n_classes})")
    logp = logits.log_softmax(axis=-1)
    return -logp[np.arange(labels.shape[0]), labels]


def kl_from_logits(logits_p: Tensor, logits_q) -> Tensor:
    """Row-wise KL(softmax(p) || softmax(q))."""
    logp = Tensor._lift(logits_p).log_softmax(axis=-1)
    logq = Tensor._lift(logits_q).log_softmax(axis=-1)
    return (logp.exp() * (logp - logq)).sum(axis=-1)


# -- optimisation ---------------------------------------------------------------


class Adam:
    """Adam with optional coupled L2 weight decay."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict:
        for name, g in grads.items():
            if name not in params:
                raise ShapeError(f"gradient for unknown parameter {name!r}")
            if np.shape(g) != np.shape(params[name]):
                raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape "
                                 f"{np.shape(params[name])} for {name!r}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        updated = dict(params)
        for name, g in grads.items():
            p = params[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            updated[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return updated


def optimizer_step(params, grads, optimizer: Adam | None = None, **hyper):
    """One Adam update; pass an existing optimizer to carry moment state."""
    optimizer = optimizer or Adam(**hyper)
    return optimizer.step(params, grads)


def value_and_grad(loss_fn: Callable[[dict], Tensor], weights: Mapping[str, np.ndarray]):
    tensors = as_tensors(weights)
    loss = loss_fn(tensors)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in tensors.items()}
    return float(loss.data), grads


def grad_check(loss_fn: Callable[[dict], Tensor], weights: Mapping[str, np.ndarray],
               h=1e-4, floor=1e-6) -> float:
    """Max elementwise relative error between analytic and central-difference gradients.

    The error for one entry is ``|a - n| / max(|a|, |n|, floor)``, so entries
    whose gradient is below ``floor`` in magnitude are compared absolutely.
    """
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    _, grads = value_and_grad(loss_fn, weights)
    worst = 0.0
    for name, value in weights.items():
        flat = np.array(value, dtype=np.float64).ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn(as_tensors({**weights, name: flat.reshape(np.shape(value))},
                                          requires_grad=False)).data)
            flat[i] = orig - h
            down = float(loss_fn(as_tensors({**weights, name: flat.reshape(np.shape(value))},
                                            requires_grad=False)).data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = grads[name].ravel()[i]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
    return worst


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; the final partial batch is kept."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# -- checkpoints ----------------------------------------------------------------

_MAGIC = b"SAFERCK1"


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]):
    """Write named float64 tensors: magic, count, then per tensor a name,
    a shape header and little-endian doubles."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 8
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return out
