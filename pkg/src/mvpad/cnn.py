"""Lightweight two-conv / two-FC network with batch normalization, in plain numpy.

Public tensors are NCHW (batch, channels, height, width). Internally activations are kept
NHWC so convolutions reduce to one im2col matrix product, and the flatten before the first
fully connected layer follows (height, width, channel) order.
"""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .common import THRESHOLD, Label, atomic_write_bytes, atomic_write_text

MODEL_MAGIC = b"MVPC"
MODEL_VERSION = 1
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}, step {step} (loss={loss})")
        self.epoch = epoch
        self.step = step
        self.loss = loss


class NonFiniteLossError(FloatingPointError):
    def __init__(self, batch_id):
        super().__init__(f"non-finite loss on batch {batch_id}")
        self.batch_id = batch_id


def pool_size(d: int, k: int, s: int) -> int:
    return (d - k) // s + 1


@dataclass(frozen=True)
class Architecture:
    input_size: int = 64
    in_channels: int = 1
    conv1: int = 16
    conv2: int = 32
    pool1: tuple[int, int] = (9, 2)
    pool2: tuple[int, int] = (9, 8)
    hidden: int = 1024
    classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "pool1", tuple(self.pool1))
        object.__setattr__(self, "pool2", tuple(self.pool2))
        if self.pooled2 < 1:
            raise ValueError(f"input size {self.input_size} is too small for the pooling layers")

    @property
    def pooled1(self) -> int:
        return pool_size(self.input_size, *self.pool1)

    @property
    def pooled2(self) -> int:
        p1 = self.pooled1
        return pool_size(p1, *self.pool2) if p1 >= 1 else 0

    @property
    def flat(self) -> int:
        return self.pooled2 ** 2 * self.conv2

    def shapes(self) -> list[tuple[int, ...]]:
        """Activation shapes (H, W, C) after conv1, pool1, conv2, pool2, then the vector sizes."""
        s, p1, p2 = self.input_size, self.pooled1, self.pooled2
        return [(s, s, self.conv1), (p1, p1, self.conv1), (p1, p1, self.conv2),
                (p2, p2, self.conv2), (self.flat,), (self.hidden,), (self.classes,)]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c1, c2 = self.conv1, self.conv2
        return {
            "conv1.w": (c1, self.in_channels, 3, 3), "conv1.b": (c1,),
            "bn1.gamma": (c1,), "bn1.beta": (c1,), "bn1.mean": (c1,), "bn1.var": (c1,),
            "conv2.w": (c2, c1, 3, 3), "conv2.b": (c2,),
            "bn2.gamma": (c2,), "bn2.beta": (c2,), "bn2.mean": (c2,), "bn2.var": (c2,),
            "fc1.w": (self.hidden, self.flat), "fc1.b": (self.hidden,),
            "fc2.w": (self.classes, self.hidden), "fc2.b": (self.classes,),
        }


PARAM_ORDER = tuple(Architecture().param_shapes())
BUFFERS = ("bn1.mean", "bn1.var", "bn2.mean", "bn2.var")
TRAINABLE = tuple(k for k in PARAM_ORDER if k not in BUFFERS)
DECAYED = ("conv1.w", "conv2.w", "fc1.w", "fc2.w")


@dataclass
class CnnModel:
    arch: Architecture
    params: dict[str, np.ndarray]
    view: str = "raw"

    @property
    def dtype(self):
        return self.params["conv1.w"].dtype

    def astype(self, dtype) -> "CnnModel":
        return CnnModel(self.arch, {k: v.astype(dtype) for k, v in self.params.items()}, self.view)

    def copy(self) -> "CnnModel":
        return CnnModel(self.arch, {k: v.copy() for k, v in self.params.items()}, self.view)


def init_model(arch: Architecture, rng: np.random.Generator, view: str = "raw",
               dtype=np.float32) -> CnnModel:
    """Kaiming fan-in normal weights, zero biases, unit BN scale and running variance."""
    p = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            p[name] = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif name.endswith(("gamma", ".var")):
            p[name] = np.ones(shape)
        else:
            p[name] = np.zeros(shape)
    return CnnModel(arch, {k: v.astype(dtype) for k, v in p.items()}, view)


# -- layers (NHWC) ----------------------------------------------------------------------------

def conv_forward(x, w, b):
    """3x3 same-padded convolution; w has shape (F, C, 3, 3)."""
    B, H, W, C = x.shape
    F = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(B * H * W, C * 9)
    out = cols @ w.reshape(F, C * 9).T + b
    return out.reshape(B, H, W, F), cols


def conv_backward(dout, cols, w, xshape):
    B, H, W, C = xshape
    F = w.shape[0]
    d2 = dout.reshape(-1, F)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(F, C * 9)).reshape(B, H, W, C, 3, 3)
    dxp = np.zeros((B, H + 2, W + 2, C), dtype=dout.dtype)
    for u in range(3):
        for v in range(3):
            dxp[:, u:u + H, v:v + W, :] += dcols[..., u, v]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _pool_axis(x, k, s, axis):
    # running max over the k taps of each window along one axis, tracking the winning tap
    n_out = pool_size(x.shape[axis], k, s)
    span = s * (n_out - 1) + 1

    def tap(t):
        return x[(slice(None),) * axis + (slice(t, t + span, s),)]

    m = tap(0).copy()
    arg = np.zeros(m.shape, np.uint8)
    gt = np.empty(m.shape, bool)
    tmp = np.empty(m.shape, np.uint8)
    for t in range(1, k):
        c = tap(t)
        np.greater(c, m, out=gt)
        np.maximum(m, c, out=m)
        np.multiply(gt, np.uint8(t), out=tmp)
        np.maximum(arg, tmp, out=arg)
    return m, arg


def maxpool_forward(x, k, s):
    """k x k max-pool with stride s (no padding), separable over rows then columns.

    Returns the pooled map and the flat input index of every selected maximum.
    """
    B, H, W, C = x.shape
    m1, a1 = _pool_axis(x, k, s, 1)
    m2, a2 = _pool_axis(m1, k, s, 2)
    Ho, Wo = m2.shape[1:3]
    col = np.arange(Wo, dtype=np.intp)[None, None, :, None] * s + a2
    row = np.take_along_axis(a1, col, axis=2) + np.arange(Ho, dtype=np.intp)[None, :, None, None] * s
    idx = ((np.arange(B)[:, None, None, None] * H + row) * W + col) * C + np.arange(C)[None, None, None, :]
    return m2, idx


def maxpool_backward(dout, idx, shape):
    flat = np.bincount(idx.ravel(), weights=dout.ravel(), minlength=int(np.prod(shape)))
    return flat.reshape(shape).astype(dout.dtype)


def bn_forward(x, gamma, beta, mean, var, train: bool):
    axes = (0, 1, 2)
    if train:
        mu = x.mean(axis=axes)
        sigma2 = x.var(axis=axes)
    else:
        mu, sigma2 = mean, var
    inv = 1.0 / np.sqrt(sigma2 + BN_EPS)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv, mu, sigma2)


def bn_backward(dout, cache, gamma):
    xhat, inv, _, _ = cache
    axes = (0, 1, 2)
    m = dout.size // dout.shape[-1]
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# -- network -------------------------------------------------------------------------------

def _check_batch(model: CnnModel, batch: np.ndarray) -> np.ndarray:
    a = model.arch
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise ValueError(f"input: expected a 4-D (batch, channels, height, width) tensor, got {batch.shape}")
    if batch.shape[1] != a.in_channels:
        raise ValueError(f"conv1: expected {a.in_channels} input channel(s), got {batch.shape[1]}")
    if batch.shape[2:] != (a.input_size, a.input_size):
        raise ValueError(f"conv1: expected {a.input_size}x{a.input_size} input, got "
                         f"{batch.shape[2]}x{batch.shape[3]}")
    if not np.isfinite(batch).all():
        raise ValueError("input: non-finite values")
    return np.ascontiguousarray(batch.transpose(0, 2, 3, 1), dtype=model.dtype)


def forward(model: CnnModel, batch: np.ndarray, mode: str = "eval", update_stats: bool = True):
    """Class probabilities (float64, column 1 = bona fide) and the cache for ``backward``.

    In train mode batch statistics normalize the activations and, with ``update_stats``,
    the running statistics move towards them.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    train = mode == "train"
    p, a = model.params, model.arch
    x = _check_batch(model, batch)
    if train and x.shape[0] < 2:
        raise ValueError("train mode needs a batch of at least 2 samples")
    cache = {"x_shape": x.shape}
    h, cache["cols1"] = conv_forward(x, p["conv1.w"], p["conv1.b"])
    cache["r1"] = h > 0
    h = np.maximum(h, 0)
    cache["p1_shape"] = h.shape
    h, cache["idx1"] = maxpool_forward(h, *a.pool1)
    h, cache["bn1"] = bn_forward(h, p["bn1.gamma"], p["bn1.beta"], p["bn1.mean"], p["bn1.var"], train)
    cache["c2_in"] = h.shape
    h, cache["cols2"] = conv_forward(h, p["conv2.w"], p["conv2.b"])
    cache["r2"] = h > 0
    h = np.maximum(h, 0)
    cache["p2_shape"] = h.shape
    h, cache["idx2"] = maxpool_forward(h, *a.pool2)
    h, cache["bn2"] = bn_forward(h, p["bn2.gamma"], p["bn2.beta"], p["bn2.mean"], p["bn2.var"], train)
    cache["flat_shape"] = h.shape
    f = h.reshape(h.shape[0], -1)
    cache["f"] = f
    z = f @ p["fc1.w"].T + p["fc1.b"]
    cache["r3"] = z > 0
    z = np.maximum(z, 0)
    cache["z"] = z
    logits = z @ p["fc2.w"].T + p["fc2.b"]
    if train and update_stats:
        m = x.shape[0]
        for bn in ("bn1", "bn2"):
            _, _, mu, sigma2 = cache[bn]
            count = m * cache[bn][0].shape[1] * cache[bn][0].shape[2]
            unbiased = sigma2 * count / max(count - 1, 1)
            p[f"{bn}.mean"] = (BN_MOMENTUM * p[f"{bn}.mean"] + (1 - BN_MOMENTUM) * mu).astype(model.dtype)
            p[f"{bn}.var"] = (BN_MOMENTUM * p[f"{bn}.var"] + (1 - BN_MOMENTUM) * unbiased).astype(model.dtype)
    return softmax(logits), cache


def backward(model: CnnModel, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    dt = model.dtype
    d = dlogits.astype(dt)
    g = {"fc2.w": d.T @ cache["z"], "fc2.b": d.sum(axis=0)}
    d = (d @ p["fc2.w"]) * cache["r3"]
    g["fc1.w"] = d.T @ cache["f"]
    g["fc1.b"] = d.sum(axis=0)
    d = (d @ p["fc1.w"]).reshape(cache["flat_shape"])
    d, g["bn2.gamma"], g["bn2.beta"] = bn_backward(d, cache["bn2"], p["bn2.gamma"])
    d = maxpool_backward(d, cache["idx2"], cache["p2_shape"]) * cache["r2"]
    d, g["conv2.w"], g["conv2.b"] = conv_backward(d, cache["cols2"], p["conv2.w"], cache["c2_in"])
    d, g["bn1.gamma"], g["bn1.beta"] = bn_backward(d, cache["bn1"], p["bn1.gamma"])
    d = maxpool_backward(d, cache["idx1"], cache["p1_shape"]) * cache["r1"]
    _, g["conv1.w"], g["conv1.b"] = conv_backward(d, cache["cols1"], p["conv1.w"], cache["x_shape"])
    return {k: v.astype(dt) for k, v in g.items()}


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, np.finfo(np.float64).tiny))))


def loss_and_gradients(model: CnnModel, batch: np.ndarray, labels: Sequence[int],
                       batch_id=None, update_stats: bool = False):
    """Mean cross-entropy of a train-mode pass and the gradient of every trainable parameter."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (len(batch),) or not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be one 0/1 value per sample")
    probs, cache = forward(model, batch, "train", update_stats)
    loss = cross_entropy(probs, labels)
    if not math.isfinite(loss):
        raise NonFiniteLossError(batch_id)
    dlogits = probs.copy()
    dlogits[np.arange(len(labels)), labels] -= 1.0
    grads = backward(model, cache, dlogits / len(labels))
    for k, v in grads.items():
        if not np.isfinite(v).all():
            raise NonFiniteLossError(batch_id)
    return loss, grads


# -- training -----------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    patience: int = 10
    input_size: int = 64
    recalibrate_bn: bool = True     # population BN statistics at every epoch end

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1 or self.input_size < 1:
            raise ValueError("epochs, patience and input_size must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch normalization")
        if self.lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive, momentum and weight_decay nonnegative")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_hter: float
    val_loss: float = field(default=float("nan"), compare=False)


def log_to_csv(log: Sequence[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_hter"])
    for e in log:
        w.writerow([e.epoch, repr(e.train_loss), repr(e.val_hter)])
    return buf.getvalue()


def _hter(decisions: np.ndarray, labels: np.ndarray) -> float:
    live = labels == 1
    apcer = np.mean(decisions[~live] == 1) if (~live).any() else 0.0
    bpcer = np.mean(decisions[live] == 0) if live.any() else 0.0
    return float(100.0 * (apcer + bpcer) / 2)


def recalibrate_bn(model: CnnModel, x: np.ndarray, batch_size: int = 64) -> None:
    """Replace the BN running statistics by population statistics of ``x`` (unbiased variance).

    With few steps per epoch the momentum estimates trail the moving weights far enough to
    wreck eval-mode predictions, so they are re-estimated once the weights stop changing.
    """
    p, a = model.params, model.arch
    chunks = [_check_batch(model, x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    pooled = []
    for c in chunks:
        h, _ = conv_forward(c, p["conv1.w"], p["conv1.b"])
        pooled.append(maxpool_forward(np.maximum(h, 0), *a.pool1)[0])
    for bn, feed in (("bn1", None), ("bn2", "conv2")):
        if feed:
            nxt = []
            for h in pooled:
                h, _ = bn_forward(h, p["bn1.gamma"], p["bn1.beta"], p["bn1.mean"], p["bn1.var"], False)
                h, _ = conv_forward(h, p["conv2.w"], p["conv2.b"])
                nxt.append(maxpool_forward(np.maximum(h, 0), *a.pool2)[0])
            pooled = nxt
        flat = np.concatenate([h.reshape(-1, h.shape[-1]) for h in pooled]).astype(np.float64)
        count = flat.shape[0]
        p[f"{bn}.mean"] = flat.mean(axis=0).astype(model.dtype)
        p[f"{bn}.var"] = (flat.var(axis=0) * count / max(count - 1, 1)).astype(model.dtype)


def predict_proba(model: CnnModel, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode probability of bona fide for every sample."""
    if len(x) == 0:
        return np.zeros(0)
    out = [forward(model, x[i:i + batch_size], "eval")[0][:, 1] for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def _check_split(name: str, y: np.ndarray) -> None:
    if len(y) == 0:
        raise ValueError(f"{name} split is empty")
    if len(np.unique(y)) < 2:
        raise ValueError(f"{name} split must contain both classes")


def train_view(view: str, train_x: np.ndarray, train_y: Sequence[int], val_x: np.ndarray,
               val_y: Sequence[int], cfg: TrainConfig, arch: Architecture | None = None,
               dtype=np.float32) -> tuple[CnnModel, list[EpochLog]]:
    """Mini-batch SGD with momentum and weight decay; returns the best-validation-HTER epoch.

    Epochs tie-break on lower validation loss. Training stops early after ``cfg.patience``
    epochs without improvement. Everything random derives from ``cfg.seed``.
    """
    train_y = np.asarray(train_y, dtype=np.intp)
    val_y = np.asarray(val_y, dtype=np.intp)
    _check_split("training", train_y)
    _check_split("validation", val_y)
    if len(train_x) != len(train_y) or len(val_x) != len(val_y):
        raise ValueError("inputs and labels differ in length")
    if arch is None:
        arch = Architecture(input_size=cfg.input_size, in_channels=train_x.shape[1])
    rng = np.random.default_rng(cfg.seed)
    model = init_model(arch, rng, view, dtype)
    velocity = {k: np.zeros_like(model.params[k]) for k in TRAINABLE}
    best, best_key, since = model.copy(), (math.inf, math.inf), 0
    log: list[EpochLog] = []
    n = len(train_y)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        batches = [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        if len(batches[-1]) < 2:
            batches.pop()
        losses = []
        for step, idx in enumerate(batches, 1):
            try:
                loss, grads = loss_and_gradients(model, train_x[idx], train_y[idx],
                                                 batch_id=(epoch, step), update_stats=True)
            except NonFiniteLossError:
                raise TrainingDivergedError(epoch, step, float("nan")) from None
            losses.append(loss * len(idx))
            for k in TRAINABLE:
                gk = grads[k]
                if k in DECAYED and cfg.weight_decay:
                    gk = gk + model.dtype.type(cfg.weight_decay) * model.params[k]
                v = velocity[k]
                v *= model.dtype.type(cfg.momentum)
                v += gk
                model.params[k] = model.params[k] - model.dtype.type(cfg.lr) * v
            if not all(np.isfinite(model.params[k]).all() for k in TRAINABLE):
                raise TrainingDivergedError(epoch, step, loss)
        train_loss = float(sum(losses) / sum(len(b) for b in batches))
        if cfg.recalibrate_bn:
            recalibrate_bn(model, train_x)
        prob = predict_proba(model, val_x)
        val_hter = _hter((prob >= THRESHOLD).astype(np.int8), val_y)
        val_loss = cross_entropy(np.stack([1 - prob, prob], axis=1), val_y)
        log.append(EpochLog(epoch, train_loss, val_hter, val_loss))
        key = (val_hter, val_loss)
        since = 0 if val_hter < best_key[0] else since + 1
        if key < best_key:
            best, best_key = model.copy(), key
        if since >= cfg.patience:
            break
    return best, log


# -- prediction ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ViewPrediction:
    sample_id: str
    score: float
    decision: Label

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")
        want = Label.BONA_FIDE if self.score >= THRESHOLD else Label.ATTACK
        if self.decision != want:
            raise ValueError("decision inconsistent with the 0.5 threshold")

    @classmethod
    def from_score(cls, sample_id: str, score: float) -> "ViewPrediction":
        score = float(score)
        return cls(sample_id, score, Label.BONA_FIDE if score >= THRESHOLD else Label.ATTACK)


def predict_view(model: CnnModel, samples: np.ndarray, sample_ids: Sequence[str]) -> list[ViewPrediction]:
    if len(samples) != len(sample_ids):
        raise ValueError("samples and sample_ids differ in length")
    scores = predict_proba(model, samples)
    return [ViewPrediction.from_score(s, p) for s, p in zip(sample_ids, scores)]


# -- checkpoints --------------------------------------------------------------------------

def model_to_bytes(model: CnnModel) -> bytes:
    a = model.arch
    header = json.dumps({"view": model.view, "input_size": a.input_size,
                         "architecture": asdict(a)}).encode()
    blobs = b"".join(np.ascontiguousarray(model.params[k], dtype="<f4").tobytes() for k in PARAM_ORDER)
    return MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(header)) + header + blobs


def model_from_bytes(data: bytes) -> CnnModel:
    if data[:4] != MODEL_MAGIC:
        raise ValueError("not a model checkpoint")
    if len(data) < 12:
        raise ValueError("truncated model checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    try:
        head = json.loads(data[12:12 + hlen])
    except ValueError:
        raise ValueError("truncated model checkpoint") from None
    arch = Architecture(**head["architecture"])
    shapes = arch.param_shapes()
    need = 12 + hlen + 4 * sum(int(np.prod(shapes[k])) for k in PARAM_ORDER)
    if len(data) != need:
        raise ValueError(f"truncated model checkpoint: {len(data)} of {need} bytes"
                         if len(data) < need else "trailing bytes after model checkpoint")
    params, off = {}, 12 + hlen
    for k in PARAM_ORDER:
        count = int(np.prod(shapes[k]))
        params[k] = np.frombuffer(data, "<f4", count, off).reshape(shapes[k]).astype(np.float32)
        off += 4 * count
    return CnnModel(arch, params, head["view"])


def save_model(model: CnnModel, path: str | Path) -> None:
    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path: str | Path) -> CnnModel:
    return model_from_bytes(Path(path).read_bytes())


def save_log(log: Sequence[EpochLog], path: str | Path) -> None:
    atomic_write_text(path, log_to_csv(log))
