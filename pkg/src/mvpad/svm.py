"""Binary kernel SVM trained by sequential minimal optimization.

The solver follows the usual two-variable SMO scheme with maximal-violating-pair /
second-order working set selection; labels are +1 (bona fide) and -1 (attack).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .common import atomic_write_bytes

SVM_MAGIC = b"MVSV"
SVM_VERSION = 1
TAU = 1e-12


class SvmConvergenceError(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(f"SMO stopped after {iterations} iterations with KKT residual {residual:.3e}")
        self.iterations = iterations
        self.residual = residual


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(d, 0.0))


def kernel_matrix(a: np.ndarray, b: np.ndarray, kernel: str, gamma: float) -> np.ndarray:
    if kernel == "rbf":
        return rbf_kernel(a, b, gamma)
    if kernel == "linear":
        return a @ b.T
    raise ValueError(f"unknown kernel {kernel!r}")


def smo(K: np.ndarray, y: np.ndarray, C: float, tol: float = 1e-3, max_iter: int = 200_000):
    """Solve min 1/2 a'Qa - sum(a), 0 <= a <= C, y'a = 0 with Q = yy' * K.

    Returns (alpha, rho, iterations); the decision function is sum_i a_i y_i K(x_i, x) - rho.
    """
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    alpha = np.zeros(n)
    grad = -np.ones(n)
    Q = np.outer(y, y) * K
    diag = np.diag(K).copy()
    pos, neg = y > 0, y < 0
    residual = np.inf
    for it in range(1, max_iter + 1):
        yg = -y * grad
        up = (pos & (alpha < C)) | (neg & (alpha > 0))
        low = (pos & (alpha > 0)) | (neg & (alpha < C))
        if not up.any() or not low.any():
            residual = 0.0
            break
        i = int(np.argmax(np.where(up, yg, -np.inf)))
        g_max = yg[i]
        residual = g_max - np.min(np.where(low, yg, np.inf))
        if residual < tol:
            break
        b = g_max - yg
        cand = low & (b > 0)
        quad = np.maximum(diag[i] + diag - 2.0 * K[i], TAU)
        j = int(np.argmin(np.where(cand, -(b * b) / quad, np.inf)))

        ai, aj = alpha[i], alpha[j]
        q = max(diag[i] + diag[j] - 2.0 * K[i, j], TAU)
        if y[i] != y[j]:
            delta = (-grad[i] - grad[j]) / q
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            elif nj > C:
                nj, ni = C, C + diff
        else:
            delta = (grad[i] - grad[j]) / q
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > C:
                if ni > C:
                    ni, nj = C, total - C
            elif nj < 0:
                nj, ni = 0.0, total
            if total > C:
                if nj > C:
                    nj, ni = C, total - C
            elif ni < 0:
                ni, nj = 0.0, total
        grad += Q[:, i] * (ni - ai) + Q[:, j] * (nj - aj)
        alpha[i], alpha[j] = ni, nj
    else:
        raise SvmConvergenceError(max_iter, float(residual))

    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = float(np.mean(yg[free]))
    else:
        at_upper = alpha >= C
        ub_mask = (at_upper & neg) | (~at_upper & pos)
        lb_mask = (at_upper & pos) | (~at_upper & neg)
        ub = np.min(yg[ub_mask]) if ub_mask.any() else np.inf
        lb = np.max(yg[lb_mask]) if lb_mask.any() else -np.inf
        rho = float((ub + lb) / 2) if np.isfinite(ub + lb) else float(ub if np.isfinite(ub) else lb)
    return alpha, rho, it


@dataclass
class SvmModel:
    view_ids: tuple[str, ...]
    support_vectors: np.ndarray     # standardized feature rows
    alpha: np.ndarray
    y: np.ndarray                   # +1 / -1 per support vector
    bias: float
    C: float
    gamma: float
    kernel: str
    mean: np.ndarray
    scale: np.ndarray
    use_scores: bool = True

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        z = self.standardize(x)
        if len(self.alpha) == 0:
            return np.full(len(z), self.bias)
        k = kernel_matrix(z, self.support_vectors, self.kernel, self.gamma)
        return k @ (self.alpha * self.y) + self.bias


def fit_svm(x: np.ndarray, labels: np.ndarray, C: float, gamma: float, kernel: str = "rbf",
            tol: float = 1e-3, view_ids: tuple[str, ...] = (), use_scores: bool = True,
            max_iter: int = 200_000) -> SvmModel:
    """Standardize features on ``x`` and train a C-SVM; labels are 0/1 (1 = bona fide)."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if min(int(np.sum(labels == 1)), int(np.sum(labels == 0))) < 2:
        raise ValueError("SVM training needs at least two samples of each class")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    z = (x - mean) / scale
    y = np.where(labels == 1, 1.0, -1.0)
    K = kernel_matrix(z, z, kernel, gamma)
    alpha, rho, _ = smo(K, y, C, tol, max_iter)
    sv = alpha > 0
    return SvmModel(tuple(view_ids), z[sv], alpha[sv], y[sv], -rho, C, gamma, kernel, mean, scale,
                    use_scores)


def svm_to_bytes(m: SvmModel) -> bytes:
    n, p = m.support_vectors.shape if m.support_vectors.size else (0, len(m.mean))
    header = json.dumps({"view_ids": list(m.view_ids), "C": m.C, "gamma": m.gamma, "kernel": m.kernel,
                         "bias": m.bias, "use_scores": m.use_scores, "n_sv": int(n),
                         "n_features": int(p)}).encode()
    arrays = [m.mean, m.scale, m.support_vectors.reshape(n, p), m.alpha, m.y]
    return (SVM_MAGIC + struct.pack("<II", SVM_VERSION, len(header)) + header
            + b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays))


def svm_from_bytes(data: bytes) -> SvmModel:
    if data[:4] != SVM_MAGIC:
        raise ValueError("not an SVM model")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != SVM_VERSION:
        raise ValueError(f"unsupported SVM model version {version}")
    head = json.loads(data[12:12 + hlen])
    n, p = head["n_sv"], head["n_features"]
    need = 12 + hlen + 8 * (2 * p + n * p + 2 * n)
    if len(data) != need:
        raise ValueError(f"SVM model has {len(data)} bytes, expected {need}")
    flat = np.frombuffer(data, dtype="<f8", offset=12 + hlen).copy()
    mean, scale = flat[:p], flat[p:2 * p]
    sv = flat[2 * p:2 * p + n * p].reshape(n, p)
    alpha = flat[2 * p + n * p:2 * p + n * p + n]
    y = flat[2 * p + n * p + n:]
    return SvmModel(tuple(head["view_ids"]), sv, alpha, y, head["bias"], head["C"], head["gamma"],
                    head["kernel"], mean, scale, head["use_scores"])


def save_svm(m: SvmModel, path: str | Path) -> None:
    atomic_write_bytes(path, svm_to_bytes(m))


def load_svm(path: str | Path) -> SvmModel:
    return svm_from_bytes(Path(path).read_bytes())
