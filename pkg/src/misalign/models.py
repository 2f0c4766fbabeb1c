"""Losses, classifiers and the point-transformer layer, all plain numpy.

Ordinal class targets are trained with a mix of cross-entropy and the
one-dimensional Wasserstein loss on class CDFs; a softplus regression head is
available as the direct-regression alternative. Gradients are written by hand
and checked against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateLabelsError,
    TooFewPointsError,
    TrainingDivergedError,
)
from .features import FEATURE_DIM, FeatureMap
from .geometry import bin_epsilon

__all__ = [
    "softmax",
    "validate_distribution",
    "cross_entropy",
    "wasserstein1",
    "cdf_l1",
    "combined_loss",
    "combined_loss_grad",
    "cross_entropy_grad",
    "regression_head_loss",
    "regression_head_grad",
    "softplus",
    "PTLayerParams",
    "init_pt_layer",
    "pt_layer_forward",
    "pt_layer_backward",
    "POOLED_DIM",
    "pool_feature_map",
    "MlpParams",
    "TrainConfig",
    "TrainingSet",
    "train_mlp",
    "predict",
    "predict_class",
    "CoralModel",
    "coral_fit",
    "coral_predict",
    "save_model",
    "load_model",
    "save_history_csv",
]

_PROB_FLOOR = 1e-12


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def validate_distribution(p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(p < 0.0) or abs(p.sum(axis=-1).max() - 1.0) > tol or abs(
        p.sum(axis=-1).min() - 1.0
    ) > tol:
        raise ValueError("probabilities must be non-negative and sum to 1")
    return p


def _as_batch(y, p):
    p = validate_distribution(np.atleast_2d(np.asarray(p, dtype=float)))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    if y.shape[0] != p.shape[0]:
        raise ValueError("one label per distribution required")
    if np.any(y < 0) or np.any(y >= p.shape[1]):
        raise ValueError("label out of range")
    return y, p


def cross_entropy(y, p) -> float:
    """Mean negative log-probability of the true class."""
    y, p = _as_batch(y, p)
    picked = np.clip(p[np.arange(len(y)), y], _PROB_FLOOR, None)
    return float(-np.log(picked).mean())


def cdf_l1(p, q) -> np.ndarray:
    """L1 distance between class CDFs, the 1-D Wasserstein distance."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    return np.abs(np.cumsum(p, axis=1) - np.cumsum(q, axis=1)).sum(axis=1)


def wasserstein1(y, p) -> float:
    """Mean CDF distance between one-hot labels and predicted distributions."""
    y, p = _as_batch(y, p)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y] = 1.0
    return float(cdf_l1(onehot, p).mean())


def combined_loss(y, p) -> float:
    """Equal mix of cross-entropy and the 1-D Wasserstein loss."""
    return 0.5 * cross_entropy(y, p) + 0.5 * wasserstein1(y, p)


def cross_entropy_grad(y, logits) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    n = logits.shape[0]
    p = softmax(logits, axis=1)
    picked = np.clip(p[np.arange(n), y], _PROB_FLOOR, None)
    loss = float(-np.log(picked).mean())
    grad = p.copy()
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def _w1_grad_probs(y, p) -> np.ndarray:
    # d/dp_l sum_k |P_k - Y_k| = sum_{k >= l} sign(P_k - Y_k).
    n, m = p.shape
    onehot = np.zeros_like(p)
    onehot[np.arange(n), y] = 1.0
    signs = np.sign(np.cumsum(p, axis=1) - np.cumsum(onehot, axis=1))
    return np.cumsum(signs[:, ::-1], axis=1)[:, ::-1]


def combined_loss_grad(y, logits) -> tuple[float, np.ndarray]:
    """Combined loss of softmax(logits) and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    n = logits.shape[0]
    p = softmax(logits, axis=1)
    ce_loss = float(-np.log(np.clip(p[np.arange(n), y], _PROB_FLOOR, None)).mean())
    onehot = np.zeros_like(p)
    onehot[np.arange(n), y] = 1.0
    w1_loss = float(cdf_l1(onehot, p).mean())

    grad_ce = p - onehot
    c = _w1_grad_probs(y, p)
    # Softmax Jacobian applied to the probability-space gradient c.
    grad_w1 = p * (c - (c * p).sum(axis=1, keepdims=True))
    grad = (0.5 * grad_ce + 0.5 * grad_w1) / n
    return 0.5 * ce_loss + 0.5 * w1_loss, grad


def regression_head_loss(target, logit) -> float:
    """Squared error between softplus(logit) and a non-negative target."""
    target = np.asarray(target, dtype=float)
    logit = np.asarray(logit, dtype=float)
    return float(np.mean((softplus(logit) - target) ** 2))


def regression_head_grad(target, logit) -> tuple[float, np.ndarray]:
    target = np.atleast_1d(np.asarray(target, dtype=float))
    logit = np.atleast_1d(np.asarray(logit, dtype=float))
    sp = softplus(logit)
    loss = float(np.mean((sp - target) ** 2))
    grad = 2.0 * (sp - target) * _sigmoid(logit) / logit.shape[0]
    return loss, grad


# ---------------------------------------------------------------------------
# Point transformer layer (vector attention over k nearest neighbors)
# ---------------------------------------------------------------------------


@dataclass
class PTLayerParams:
    """Query/key/value maps, position-encoding MLP and attention MLP."""

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    pos_w1: np.ndarray
    pos_b1: np.ndarray
    pos_w2: np.ndarray
    pos_b2: np.ndarray
    att_w1: np.ndarray
    att_b1: np.ndarray
    att_w2: np.ndarray
    att_b2: np.ndarray
    k_nn: int = 8

    ARRAY_FIELDS = (
        "wq", "bq", "wk", "bk", "wv", "bv",
        "pos_w1", "pos_b1", "pos_w2", "pos_b2",
        "att_w1", "att_b1", "att_w2", "att_b2",
    )


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_pt_layer(rng: np.random.Generator, d_in: int, d_attn: int, k_nn: int = 8) -> PTLayerParams:
    return PTLayerParams(
        wq=_uniform_init(rng, d_in, (d_in, d_attn)),
        bq=_uniform_init(rng, d_in, d_attn),
        wk=_uniform_init(rng, d_in, (d_in, d_attn)),
        bk=_uniform_init(rng, d_in, d_attn),
        wv=_uniform_init(rng, d_in, (d_in, d_attn)),
        bv=_uniform_init(rng, d_in, d_attn),
        pos_w1=_uniform_init(rng, 3, (3, d_attn)),
        pos_b1=_uniform_init(rng, 3, d_attn),
        pos_w2=_uniform_init(rng, d_attn, (d_attn, d_attn)),
        pos_b2=_uniform_init(rng, d_attn, d_attn),
        att_w1=_uniform_init(rng, d_attn, (d_attn, d_attn)),
        att_b1=_uniform_init(rng, d_attn, d_attn),
        att_w2=_uniform_init(rng, d_attn, (d_attn, d_attn)),
        att_b2=_uniform_init(rng, d_attn, d_attn),
        k_nn=k_nn,
    )


def _knn_indices(coords: np.ndarray, k: int) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diff, diff)
    # Stable sort keeps index order on ties, so neighbor choice is deterministic.
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def pt_layer_forward(features, coords, params: PTLayerParams, return_cache: bool = False):
    """Vector self-attention over each point's k nearest neighbors (self included).

    For point i with neighbors j the output is
    sum_j rho(gamma(q_i - k_j + e_ij)) * (v_j + e_ij) with rho a per-channel
    softmax over j and e_ij the encoding of the relative position p_i - p_j.
    """
    x = np.asarray(features, dtype=float)
    p = np.asarray(coords, dtype=float)
    n = x.shape[0]
    if n < params.k_nn:
        raise TooFewPointsError(f"{n} points but k_nn={params.k_nn}")
    idx = _knn_indices(p, params.k_nn)

    q = x @ params.wq + params.bq
    k_feat = x @ params.wk + params.bk
    v = x @ params.wv + params.bv

    rel = p[:, None, :] - p[idx]
    z_pos = rel @ params.pos_w1 + params.pos_b1
    h_pos = np.maximum(z_pos, 0.0)
    e = h_pos @ params.pos_w2 + params.pos_b2

    u = q[:, None, :] - k_feat[idx] + e
    z_att = u @ params.att_w1 + params.att_b1
    h_att = np.maximum(z_att, 0.0)
    a = h_att @ params.att_w2 + params.att_b2

    a_shift = a - a.max(axis=1, keepdims=True)
    w_exp = np.exp(a_shift)
    w = w_exp / w_exp.sum(axis=1, keepdims=True)

    s = v[idx] + e
    y = (w * s).sum(axis=1)
    if not return_cache:
        return y
    cache = dict(x=x, idx=idx, rel=rel, z_pos=z_pos, h_pos=h_pos, e=e,
                 u=u, z_att=z_att, h_att=h_att, w=w, s=s, params=params)
    return y, cache


def pt_layer_backward(cache: dict, grad_y) -> dict:
    """Parameter gradients given d(loss)/d(output); keys match field names."""
    params: PTLayerParams = cache["params"]
    x, idx = cache["x"], cache["idx"]
    w, s, u = cache["w"], cache["s"], cache["u"]
    g_y = np.asarray(grad_y, dtype=float)

    d_s = w * g_y[:, None, :]
    d_w = g_y[:, None, :] * s
    # Per-channel softmax backward over the neighbor axis.
    d_a = w * (d_w - (w * d_w).sum(axis=1, keepdims=True))

    d_h_att = d_a @ params.att_w2.T
    g_att_w2 = np.einsum("nki,nkj->ij", cache["h_att"], d_a)
    g_att_b2 = d_a.sum(axis=(0, 1))
    d_z_att = d_h_att * (cache["z_att"] > 0.0)
    g_att_w1 = np.einsum("nki,nkj->ij", u, d_z_att)
    g_att_b1 = d_z_att.sum(axis=(0, 1))
    d_u = d_z_att @ params.att_w1.T

    d_q = d_u.sum(axis=1)
    d_k = np.zeros((x.shape[0], params.wk.shape[1]))
    np.add.at(d_k, idx, -d_u)
    d_e = d_s + d_u

    d_h_pos = d_e @ params.pos_w2.T
    g_pos_w2 = np.einsum("nki,nkj->ij", cache["h_pos"], d_e)
    g_pos_b2 = d_e.sum(axis=(0, 1))
    d_z_pos = d_h_pos * (cache["z_pos"] > 0.0)
    g_pos_w1 = np.einsum("nki,nkj->ij", cache["rel"], d_z_pos)
    g_pos_b1 = d_z_pos.sum(axis=(0, 1))

    d_v = np.zeros_like(d_k)
    np.add.at(d_v, idx, d_s)

    return dict(
        wq=x.T @ d_q, bq=d_q.sum(axis=0),
        wk=x.T @ d_k, bk=d_k.sum(axis=0),
        wv=x.T @ d_v, bv=d_v.sum(axis=0),
        pos_w1=g_pos_w1, pos_b1=g_pos_b1, pos_w2=g_pos_w2, pos_b2=g_pos_b2,
        att_w1=g_att_w1, att_b1=g_att_b1, att_w2=g_att_w2, att_b2=g_att_b2,
    )


# ---------------------------------------------------------------------------
# Pooled-feature MLP classifier
# ---------------------------------------------------------------------------

# Per-cloud mean and max pooling of the 8 feature columns, plus the global
# joint-minus-separate entropy gap.
POOLED_DIM = 4 * FEATURE_DIM + 1


def pool_feature_map(fm: FeatureMap) -> np.ndarray:
    """Permutation-invariant summary vector of one feature map."""
    feats = np.asarray(fm.features, dtype=float)
    origin = feats[:, 4]
    parts = []
    for flag in (0.0, 1.0):
        rows = feats[origin == flag]
        if rows.shape[0] == 0:
            rows = np.zeros((1, FEATURE_DIM))
        parts.append(rows.mean(axis=0))
        parts.append(rows.max(axis=0))
    gap = feats[:, 1].mean() - feats[:, 0].mean()
    return np.concatenate(parts + [np.array([gap])])


@dataclass
class MlpParams:
    """Weights of the pooled-feature classifier plus its input scaler."""

    kind: str                      # "rbc", "ce-only" or "regression"
    num_classes: int
    norm_mean: np.ndarray
    norm_std: np.ndarray
    weights: list                  # [(W, b), ...]

    def output_dim(self) -> int:
        return self.weights[-1][0].shape[1]


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "rbc"
    num_classes: int = 5
    hidden: tuple[int, ...] = (64, 64)
    epochs: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-3
    lr_step: int = 50
    lr_gamma: float = 0.5
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("rbc", "ce-only", "regression"):
            raise ValueError("loss must be rbc, ce-only or regression")


@dataclass(frozen=True)
class TrainingSet:
    """Pooled inputs with class labels and registration errors."""

    inputs: np.ndarray
    labels: np.ndarray
    epsilons: np.ndarray

    @staticmethod
    def from_feature_maps(maps: Sequence[FeatureMap], epsilons=None) -> "TrainingSet":
        inputs = np.stack([pool_feature_map(fm) for fm in maps])
        labels = np.array([fm.label for fm in maps], dtype=int)
        if epsilons is None:
            eps = np.zeros(len(maps))
        else:
            eps = np.asarray(epsilons, dtype=float)
        return TrainingSet(inputs, labels, eps)

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _forward_mlp(weights, x):
    acts = [x]
    h = x
    for w, b in weights[:-1]:
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    w, b = weights[-1]
    return h @ w + b, acts


def _backward_mlp(weights, acts, grad_logits):
    grads = []
    delta = grad_logits
    for layer in range(len(weights) - 1, -1, -1):
        w, _ = weights[layer]
        a_in = acts[layer]
        gw = a_in.T @ delta
        gb = delta.sum(axis=0)
        grads.append((gw, gb))
        if layer > 0:
            delta = (delta @ w.T) * (acts[layer] > 0.0)
    grads.reverse()
    return grads


def _batch_loss_grad(model: MlpParams, x, labels, epsilons):
    logits, acts = _forward_mlp(model.weights, x)
    if model.kind == "regression":
        loss, grad = regression_head_grad(epsilons, logits[:, 0])
        grad = grad[:, None]
    elif model.kind == "ce-only":
        loss, grad = cross_entropy_grad(labels, logits)
    else:
        loss, grad = combined_loss_grad(labels, logits)
    return loss, _backward_mlp(model.weights, acts, grad)


def _eval_loss_acc(model: MlpParams, data: TrainingSet):
    x = (data.inputs - model.norm_mean) / model.norm_std
    logits, _ = _forward_mlp(model.weights, x)
    if model.kind == "regression":
        loss = regression_head_loss(data.epsilons, logits[:, 0])
        pred = np.array([bin_epsilon(v) for v in softplus(logits[:, 0])])
    else:
        p = softmax(logits, axis=1)
        if model.kind == "ce-only":
            loss = cross_entropy(data.labels, p)
        else:
            loss = combined_loss(data.labels, p)
        pred = np.argmax(logits, axis=1)
    acc = float((pred == data.labels).mean()) if len(data) else float("nan")
    return float(loss), acc


def train_mlp(
    train: TrainingSet, val: TrainingSet, config: TrainConfig = TrainConfig()
) -> tuple[MlpParams, list[dict]]:
    """Train the pooled-feature MLP; returns the best-on-validation model.

    Adam with bias-corrected moments, decoupled weight decay on the weight
    matrices and a step learning-rate schedule. Deterministic given
    ``config.seed``; raises TrainingDivergedError when the loss goes
    non-finite.
    """
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    mean = train.inputs.mean(axis=0)
    std = train.inputs.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)

    out_dim = 1 if config.loss == "regression" else config.num_classes
    sizes = (train.inputs.shape[1],) + tuple(config.hidden) + (out_dim,)
    weights = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append((_uniform_init(rng, fan_in, (fan_in, fan_out)),
                        _uniform_init(rng, fan_in, fan_out)))
    model = MlpParams(config.loss, config.num_classes, mean, std, weights)

    x_all = (train.inputs - mean) / std
    n = len(train)
    adam_m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in weights]
    adam_v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in weights]
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    step = 0
    best = None
    history = []
    for epoch in range(config.epochs):
        lr = config.learning_rate * config.lr_gamma ** (epoch // config.lr_step)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grads = _batch_loss_grad(
                model, x_all[batch], train.labels[batch], train.epsilons[batch]
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            step += 1
            for layer, (gw, gb) in enumerate(grads):
                mw, mb = adam_m[layer]
                vw, vb = adam_v[layer]
                mw[:] = beta1 * mw + (1.0 - beta1) * gw
                mb[:] = beta1 * mb + (1.0 - beta1) * gb
                vw[:] = beta2 * vw + (1.0 - beta2) * gw**2
                vb[:] = beta2 * vb + (1.0 - beta2) * gb**2
                corr1 = 1.0 - beta1**step
                corr2 = 1.0 - beta2**step
                w, b = model.weights[layer]
                w -= lr * (mw / corr1) / (np.sqrt(vw / corr2) + adam_eps)
                b -= lr * (mb / corr1) / (np.sqrt(vb / corr2) + adam_eps)
                # Decoupled decay, weight matrices only.
                w -= lr * config.weight_decay * w

        train_loss, train_acc = _eval_loss_acc(model, train)
        if len(val):
            val_loss, val_acc = _eval_loss_acc(model, val)
        else:
            val_loss, val_acc = train_loss, train_acc
        if not np.isfinite(train_loss):
            raise TrainingDivergedError(epoch)
        history.append(dict(epoch=epoch, train_loss=train_loss,
                            val_loss=val_loss, val_accuracy=val_acc))
        if best is None or val_loss < best[0]:
            best = (val_loss, [(w.copy(), b.copy()) for w, b in model.weights])

    model.weights = best[1]
    return model, history


def predict(model: MlpParams, fm: FeatureMap) -> np.ndarray:
    """Class distribution for one feature map (softmax over the logits)."""
    if model.kind == "regression":
        raise ValueError("regression models do not produce distributions; use predict_class")
    x = (pool_feature_map(fm) - model.norm_mean) / model.norm_std
    logits, _ = _forward_mlp(model.weights, x[None, :])
    return softmax(logits[0])


def predict_class(model: MlpParams, fm: FeatureMap) -> int:
    """Predicted class index; regression heads are binned by error edges."""
    x = (pool_feature_map(fm) - model.norm_mean) / model.norm_std
    logits, _ = _forward_mlp(model.weights, x[None, :])
    if model.kind == "regression":
        return bin_epsilon(float(softplus(logits[0, 0])))
    return int(np.argmax(logits[0]))


# ---------------------------------------------------------------------------
# CorAl baseline: logistic regression on (H_joint, H_sep)
# ---------------------------------------------------------------------------


@dataclass
class CoralModel:
    weight: np.ndarray
    bias: float


def coral_fit(features, labels, l2: float = 1e-4, lr: float = 0.5,
              iters: int = 4000) -> CoralModel:
    """Maximum-likelihood logistic regression via full-batch gradient descent."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    if x.ndim != 2:
        raise ValueError("features must be 2-D")
    classes = np.unique(y)
    if classes.size < 2:
        raise DegenerateLabelsError("need examples of both classes")

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    xs = (x - mean) / std
    w = np.zeros(x.shape[1])
    b = 0.0
    n = x.shape[0]
    for _ in range(iters):
        p = _sigmoid(xs @ w + b)
        err = p - y
        gw = xs.T @ err / n + l2 * w
        gb = err.mean()
        w -= lr * gw
        b -= lr * gb
    # Undo the internal standardization so the stored weights act on raw features.
    w_raw = w / std
    b_raw = float(b - np.dot(w, mean / std))
    return CoralModel(w_raw, b_raw)


def coral_predict(model: CoralModel, features) -> np.ndarray:
    """Probability that a pair is misaligned (label 1)."""
    x = np.asarray(features, dtype=float)
    return _sigmoid(x @ model.weight + model.bias)


# ---------------------------------------------------------------------------
# Model serialization (magic "MMDL", descriptor JSON, f64 arrays)
# ---------------------------------------------------------------------------

_MMDL_MAGIC = b"MMDL"
_MMDL_VERSION = 1


def _pack_arrays(arrays: list[tuple[str, np.ndarray]]) -> bytes:
    blob = bytearray()
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays:
        encoded = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    return bytes(blob)


def _unpack_arrays(blob: bytes, offset: int) -> dict[str, np.ndarray]:
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode()
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += 8 * size
        out[name] = arr.copy()
    return out


def save_model(model, path: str) -> None:
    """Serialize an MlpParams or CoralModel to the binary model format."""
    if isinstance(model, MlpParams):
        descriptor = {
            "model": "mlp",
            "kind": model.kind,
            "num_classes": model.num_classes,
            "layers": len(model.weights),
        }
        arrays = [("norm_mean", model.norm_mean), ("norm_std", model.norm_std)]
        for i, (w, b) in enumerate(model.weights):
            arrays.append((f"w{i}", w))
            arrays.append((f"b{i}", b))
    elif isinstance(model, CoralModel):
        descriptor = {"model": "coral"}
        arrays = [("weight", model.weight), ("bias", np.array(model.bias))]
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")

    desc = json.dumps(descriptor, sort_keys=True).encode()
    blob = bytearray()
    blob += _MMDL_MAGIC
    blob += struct.pack("<I", _MMDL_VERSION)
    blob += struct.pack("<I", len(desc))
    blob += desc
    blob += _pack_arrays(arrays)
    directory = os.path.dirname(os.path.abspath(path))
    tmp = os.path.join(directory, f".tmp-{os.path.basename(path)}")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_model(path: str):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MMDL_MAGIC:
        raise ValueError(f"{path} is not a model file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _MMDL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    (desc_len,) = struct.unpack_from("<I", blob, 8)
    descriptor = json.loads(blob[12:12 + desc_len].decode())
    arrays = _unpack_arrays(blob, 12 + desc_len)
    if descriptor["model"] == "coral":
        return CoralModel(arrays["weight"], float(arrays["bias"].reshape(-1)[0]))
    weights = [
        (arrays[f"w{i}"], arrays[f"b{i}"]) for i in range(descriptor["layers"])
    ]
    return MlpParams(
        descriptor["kind"],
        int(descriptor["num_classes"]),
        arrays["norm_mean"],
        arrays["norm_std"],
        weights,
    )


def save_history_csv(history: list[dict], path: str) -> None:
    from .geometry import atomic_write_text

    lines = ["epoch,train_loss,val_loss,val_accuracy"]
    for row in history:
        lines.append(
            f"{row['epoch']},{row['train_loss']!r},{row['val_loss']!r},{row['val_accuracy']!r}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")
