"""Binarized statistical image features over a grid of filter banks."""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .common import atomic_write_bytes
from .imaging import GrayImage

BANK_MAGIC = b"BSF1"
SCALES = (3, 5, 7, 9, 11, 13, 15, 17)
DEPTHS = tuple(range(5, 13))
BORDER_MODES = {"wrap": "wrap", "replicate": "edge"}


class BankFormatError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, iterations: int, last_change: float):
        super().__init__(f"{message} (iterations={iterations}, last change={last_change:.3e})")
        self.iterations = iterations
        self.last_change = last_change


@dataclass(frozen=True, order=True)
class ViewId:
    kind: str
    l: int | None = None
    n: int | None = None

    def __post_init__(self):
        if self.kind == "raw":
            if self.l is not None or self.n is not None:
                raise ValueError("raw view carries no filter parameters")
        elif self.kind == "bsif":
            if self.l is None or self.n is None:
                raise ValueError("bsif view needs l and n")
        else:
            raise ValueError(f"unknown view kind {self.kind!r}")

    @property
    def name(self) -> str:
        return "raw" if self.kind == "raw" else f"{self.l}x{self.l}x{self.n}"

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str) -> "ViewId":
        if text == "raw":
            return RAW_VIEW
        m = re.fullmatch(r"(\d+)x(\d+)x(\d+)", text)
        if not m or m.group(1) != m.group(2):
            raise ValueError(f"not a view id: {text!r}")
        return cls("bsif", int(m.group(1)), int(m.group(3)))


RAW_VIEW = ViewId("raw")


def enumerate_views() -> list[ViewId]:
    """The raw view followed by every feasible (l, n) bank, sorted by (l, n): 61 views."""
    views = [RAW_VIEW]
    views += [ViewId("bsif", l, n) for l in SCALES for n in DEPTHS if n <= l * l - 1]
    return views


def view_index(view: ViewId | str) -> int:
    name = view.name if isinstance(view, ViewId) else view
    return _VIEW_INDEX[name]


_VIEW_INDEX = {v.name: i for i, v in enumerate(enumerate_views())}


@dataclass(frozen=True)
class FilterBank:
    """``kernels`` has shape (n, l, l); kernel k drives bit k of the code."""

    kernels: np.ndarray

    def __post_init__(self):
        k = np.array(self.kernels, dtype=np.float64)
        if k.ndim != 3 or k.shape[1] != k.shape[2]:
            raise ValueError(f"kernels must have shape (n, l, l), got {k.shape}")
        n, l = k.shape[0], k.shape[1]
        if l % 2 == 0 or not 3 <= l <= 17:
            raise ValueError(f"kernel side must be odd and within 3..17, got {l}")
        if not 5 <= n <= 12:
            raise ValueError(f"bank depth must be within 5..12, got {n}")
        if n > l * l - 1:
            raise ValueError(f"a {l}x{l} bank supports at most {l * l - 1} kernels, got {n}")
        if not np.isfinite(k).all():
            raise ValueError("kernel coefficients must be finite")
        k.setflags(write=False)
        object.__setattr__(self, "kernels", k)

    @property
    def n(self) -> int:
        return self.kernels.shape[0]

    @property
    def l(self) -> int:
        return self.kernels.shape[1]

    @property
    def bank_id(self) -> str:
        return f"{self.l}x{self.l}x{self.n}"

    @property
    def view(self) -> ViewId:
        return ViewId("bsif", self.l, self.n)


@dataclass(frozen=True)
class BsifImage:
    codes: np.ndarray
    n: int

    @property
    def height(self) -> int:
        return self.codes.shape[0]

    @property
    def width(self) -> int:
        return self.codes.shape[1]


def _pixels(img: GrayImage | np.ndarray) -> np.ndarray:
    return img.pixels if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)


def filter_responses(img: GrayImage | np.ndarray, kernels: np.ndarray, border: str = "wrap") -> np.ndarray:
    """Responses of a stack of (n, l, l) kernels; output (n, height, width).

    s_k(i, j) = sum_{u,v} w_k(u, v) * I(i + u, j + v), with out-of-range indices resolved by
    ``border`` ("wrap": modular, "replicate": clamp to the last row/column).
    """
    px = _pixels(img)
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim == 2:
        kernels = kernels[None]
    n, l, l2 = kernels.shape
    if l != l2 or l % 2 == 0:
        raise ValueError(f"kernel must be square with odd side, got {l}x{l2}")
    h, w = px.shape
    if l > min(h, w):
        raise ValueError(f"kernel larger than image ({l} > {min(h, w)})")
    if border not in BORDER_MODES:
        raise ValueError(f"unknown border mode {border!r}")
    padded = np.pad(px, ((0, l - 1), (0, l - 1)), mode=BORDER_MODES[border])
    windows = sliding_window_view(padded, (l, l))[:h, :w]
    flat = kernels.reshape(n, l * l).T
    out = np.empty((h, w, n))
    step = max(1, (1 << 20) // (w * l * l))     # bound the im2col block to ~8 MB
    for r in range(0, h, step):
        block = windows[r:r + step]
        out[r:r + step] = (block.reshape(-1, l * l) @ flat).reshape(block.shape[0], w, n)
    return np.moveaxis(out, 2, 0)


def filter_response(img: GrayImage | np.ndarray, kernel: np.ndarray, border: str = "wrap") -> np.ndarray:
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2:
        raise ValueError("expected a single l x l kernel")
    return filter_responses(img, kernel, border)[0]


def bsif_transform(img: GrayImage | np.ndarray, bank: FilterBank, border: str = "wrap") -> BsifImage:
    s = filter_responses(img, bank.kernels, border)
    codes = np.zeros(s.shape[1:], dtype=np.uint16)
    for k in range(bank.n):
        codes |= (s[k] >= 0).astype(np.uint16) << np.uint16(k)
    return BsifImage(codes, bank.n)


def bsif_transform_many(img: GrayImage | np.ndarray, banks: Sequence[FilterBank],
                        border: str = "wrap") -> list[BsifImage]:
    """``bsif_transform`` for several banks, filtering once per kernel size."""
    out: list[BsifImage | None] = [None] * len(banks)
    for l in sorted({b.l for b in banks}):
        group = [i for i, b in enumerate(banks) if b.l == l]
        s = filter_responses(img, np.concatenate([banks[i].kernels for i in group]), border)
        bits = s >= 0
        off = 0
        for i in group:
            n = banks[i].n
            codes = np.zeros(s.shape[1:], dtype=np.uint16)
            for k in range(n):
                codes |= bits[off + k].astype(np.uint16) << np.uint16(k)
            out[i] = BsifImage(codes, n)
            off += n
    return out


def bsif_to_cnn_input(b: BsifImage) -> GrayImage:
    return GrayImage(b.codes / float(2 ** b.n - 1))


def bsif_to_planes(b: BsifImage) -> np.ndarray:
    """Alternative encoding: n binary planes, plane k holding bit k."""
    return np.stack([(b.codes >> k) & 1 for k in range(b.n)]).astype(np.float64)


# -- bank files ---------------------------------------------------------------------------

def bank_to_bytes(bank: FilterBank) -> bytes:
    return BANK_MAGIC + struct.pack("<II", bank.l, bank.n) + bank.kernels.astype("<f8").tobytes()


def bank_from_bytes(data: bytes) -> FilterBank:
    if data[:4] != BANK_MAGIC:
        raise BankFormatError("not a filter bank")
    if len(data) < 12:
        raise BankFormatError("truncated filter bank header")
    l, n = struct.unpack("<II", data[4:12])
    expected = 12 + 8 * n * l * l
    if len(data) < expected:
        raise BankFormatError(f"truncated filter bank: {len(data)} of {expected} bytes")
    if len(data) > expected:
        raise BankFormatError("trailing bytes after filter bank payload")
    kernels = np.frombuffer(data, dtype="<f8", count=n * l * l, offset=12).reshape(n, l, l)
    return FilterBank(kernels)


def save_bank(bank: FilterBank, path: str | Path) -> None:
    atomic_write_bytes(path, bank_to_bytes(bank))


def load_bank(path: str | Path) -> FilterBank:
    return bank_from_bytes(Path(path).read_bytes())


def bank_filename(l: int, n: int) -> str:
    return f"bsif_{l}x{l}x{n}.bnk"


def load_banks(directory: str | Path | None = None, views: Iterable[ViewId] | None = None) -> dict[str, FilterBank]:
    """Load banks keyed by view name; ``directory=None`` reads the packaged banks."""
    wanted = [v for v in (views if views is not None else enumerate_views()) if v.kind == "bsif"]
    banks = {}
    for v in wanted:
        fname = bank_filename(v.l, v.n)
        if directory is None:
            data = resources.files("mvpad").joinpath("banks", fname).read_bytes()
        else:
            data = (Path(directory) / fname).read_bytes()
        banks[v.name] = bank_from_bytes(data)
    return banks


@lru_cache(maxsize=None)
def packaged_bank(name: str) -> FilterBank:
    return load_banks(None, [ViewId.parse(name)])[name]


# -- ICA filter learning ------------------------------------------------------------------

def sample_patches(images: Sequence[np.ndarray], l: int, count: int, seed: int) -> np.ndarray:
    """Draw ``count`` random l x l patches, spread evenly over ``images``."""
    rng = np.random.default_rng(seed)
    images = [np.asarray(im, dtype=np.float64) for im in images if min(np.shape(im)) >= l]
    if not images:
        raise ValueError(f"no image is large enough for {l}x{l} patches")
    which = rng.integers(0, len(images), size=count)
    out = np.empty((count, l, l))
    for i, k in enumerate(which):
        im = images[k]
        r = rng.integers(0, im.shape[0] - l + 1)
        c = rng.integers(0, im.shape[1] - l + 1)
        out[i] = im[r:r + l, c:c + l]
    return out


def _sym_decorrelate(w: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(w @ w.T)
    return (vecs / np.sqrt(vals)) @ vecs.T @ w


def learn_filter_bank(patches: np.ndarray, n: int, seed: int, max_iter: int = 1000,
                      tol: float = 1e-6) -> FilterBank:
    """Learn n statistically independent l x l filters from image patches.

    Patches lose their DC component, are PCA-whitened to n dimensions and rotated by
    symmetric FastICA with the log-cosh (tanh) contrast. The kernels are the ICA rows
    composed with the whitening matrix, so each has zero mean.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3 or patches.shape[1] != patches.shape[2]:
        raise ValueError("patches must have shape (count, l, l)")
    m, l = patches.shape[0], patches.shape[1]
    if n > l * l - 1:
        raise ValueError(f"n={n} exceeds l*l-1={l * l - 1}")
    if m < 50 * l * l:
        raise ValueError(f"need at least {50 * l * l} patches for l={l}, got {m}")
    x = patches.reshape(m, l * l)
    x = x - x.mean(axis=1, keepdims=True)
    x = x - x.mean(axis=0)
    cov = x.T @ x / m
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n]
    vals, vecs = vals[order], vecs[:, order]
    if vals[-1] <= 1e-12 * vals[0]:
        raise ValueError("patch covariance is rank deficient for the requested depth")
    # fix eigenvector signs so the whitening (and thus the bank) is reproducible
    flip = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(n)])
    vecs = vecs * flip
    whitening = vecs.T / np.sqrt(vals)[:, None]
    z = x @ whitening.T

    rng = np.random.default_rng(seed)
    w = _sym_decorrelate(rng.standard_normal((n, n)))
    change = np.inf
    for it in range(1, max_iter + 1):
        wz = z @ w.T
        g = np.tanh(wz)
        w_new = _sym_decorrelate(g.T @ z / m - (1.0 - g ** 2).mean(axis=0)[:, None] * w)
        change = float(np.max(np.abs(np.abs(np.einsum("ij,ij->i", w_new, w)) - 1.0)))
        w = w_new
        if change < tol:
            break
    else:
        raise ConvergenceError("FastICA did not converge", max_iter, change)

    kernels = (w @ whitening).reshape(n, l, l)
    kernels -= kernels.mean(axis=(1, 2), keepdims=True)
    # canonical sign: largest-magnitude coefficient positive
    flat = kernels.reshape(n, -1)
    kernels *= np.sign(flat[np.arange(n), np.argmax(np.abs(flat), axis=1)])[:, None, None]
    return FilterBank(kernels)
