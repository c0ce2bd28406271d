"""Fusion of per-view predictions: random forest, majority vote and best-worst weighted vote."""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .common import THRESHOLD, Label, atomic_write_bytes, atomic_write_text

FOREST_MAGIC = b"MVRF"
FOREST_VERSION = 1


@dataclass(frozen=True)
class EnsembleMatrix:
    """Samples x views liveness scores; ``labels`` is None when they are withheld."""

    sample_ids: tuple[str, ...]
    view_ids: tuple[str, ...]
    scores: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "view_ids", tuple(self.view_ids))
        if scores.shape != (len(self.sample_ids), len(self.view_ids)):
            raise ValueError(f"scores shape {scores.shape} does not match "
                             f"{len(self.sample_ids)} samples x {len(self.view_ids)} views")
        if len(set(self.view_ids)) != len(self.view_ids):
            raise ValueError("view ids must be unique")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("sample ids must be unique")
        if not np.isfinite(scores).all() or (scores < 0).any() or (scores > 1).any():
            raise ValueError("scores must be finite and within [0, 1]")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int8)
            if labels.shape != (len(self.sample_ids),) or not np.isin(labels, (0, 1)).all():
                raise ValueError("labels must be one 0/1 value per sample")
            object.__setattr__(self, "labels", labels)

    @property
    def decisions(self) -> np.ndarray:
        return (self.scores >= THRESHOLD).astype(np.int8)

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    def columns(self, views: Sequence[str]) -> "EnsembleMatrix":
        missing = [v for v in views if v not in self.view_ids]
        if missing:
            raise KeyError(f"ensemble matrix lacks views: {', '.join(missing)}")
        idx = [self.view_ids.index(v) for v in views]
        return EnsembleMatrix(self.sample_ids, tuple(views), self.scores[:, idx], self.labels)

    def rows(self, idx: Sequence[int]) -> "EnsembleMatrix":
        idx = np.asarray(idx, dtype=np.intp)
        return EnsembleMatrix(tuple(self.sample_ids[i] for i in idx), self.view_ids,
                              self.scores[idx], None if self.labels is None else self.labels[idx])

    def with_labels(self, labels: np.ndarray | None) -> "EnsembleMatrix":
        return EnsembleMatrix(self.sample_ids, self.view_ids, self.scores, labels)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sample_id", "label", *self.view_ids])
        for i, sid in enumerate(self.sample_ids):
            label = "" if self.labels is None else Label(int(self.labels[i])).manifest_name
            writer.writerow([sid, label, *(repr(float(s)) for s in self.scores[i])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EnsembleMatrix":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header[:2] != ["sample_id", "label"]:
            raise ValueError("ensemble CSV must start with sample_id,label")
        ids, labels, rows = [], [], []
        for row in reader:
            if not row:
                continue
            ids.append(row[0])
            labels.append(row[1])
            rows.append([float(v) for v in row[2:]])
        if any(labels) and not all(labels):
            raise ValueError("labels must be given for all rows or none")
        lab = np.array([int(Label.parse(x)) for x in labels], dtype=np.int8) if all(labels) and labels else None
        scores = np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 2)
        return cls(tuple(ids), tuple(header[2:]), scores, lab)

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, self.to_csv())

    @classmethod
    def load(cls, path: str | Path) -> "EnsembleMatrix":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


# -- decision trees -------------------------------------------------------------------------

def gini(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / total[..., None]
    return np.where(total > 0, 1.0 - np.sum(p * p, axis=-1), 0.0)


@dataclass
class DecisionTree:
    """Array-encoded binary tree. Internal nodes send ``x[feature] < threshold`` left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray
    bootstrap: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaf_index(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.intp)
        rows = np.arange(len(x))
        while True:
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                return node
            go_right = x[rows[inner], feat[inner]] >= self.threshold[node[inner]]
            node[inner] = np.where(go_right, self.right[node[inner]], self.left[node[inner]])

    def vote(self, x: np.ndarray) -> np.ndarray:
        """Per-sample majority class of the reached leaf; ties go to attack."""
        c = self.counts[self.leaf_index(x)]
        return (c[:, 1] > c[:, 0]).astype(np.int8)

    def used_features(self) -> set[int]:
        return set(int(f) for f in self.feature if f >= 0)


def _best_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """Best Gini split over the columns of x; returns (column, threshold, child_gini_sum) or None."""
    n, m = x.shape
    order = np.argsort(x, axis=0, kind="stable")
    xs = np.take_along_axis(x, order, axis=0)
    ys = y[order]
    left_pos = np.cumsum(ys, axis=0)[:-1].astype(np.float64)
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    n_right = n - n_left
    right_pos = ys.sum(axis=0)[None, :] - left_pos
    g_left = 1.0 - (left_pos / n_left) ** 2 - (1.0 - left_pos / n_left) ** 2
    g_right = 1.0 - (right_pos / n_right) ** 2 - (1.0 - right_pos / n_right) ** 2
    weighted = (n_left * g_left + n_right * g_right) / n
    valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n_right >= min_leaf)
    if not valid.any():
        return None
    weighted = np.where(valid, weighted, np.inf)
    best = np.min(weighted)
    # first column in candidate order, then the lowest threshold, among the ties
    cand = np.argwhere(weighted.T == best)[0]
    col, pos = int(cand[0]), int(cand[1])
    return col, 0.5 * (xs[pos, col] + xs[pos + 1, col]), best


def grow_tree(x: np.ndarray, y: np.ndarray, rng: np.random.Generator, max_features: int,
              min_leaf: int = 2):
    """Grow one tree on a bootstrap of (x, y). Returns (tree, per-feature weighted impurity decrease)."""
    n_total, n_features = x.shape
    boot = rng.integers(0, n_total, size=n_total)
    xb, yb = x[boot], y[boot].astype(np.int64)
    feature, threshold, left, right, counts = [], [], [], [], []
    decrease = np.zeros(n_features)

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        c1 = int(yb[idx].sum())
        counts.append((len(idx) - c1, c1))
        return len(feature) - 1

    stack = [(new_node(np.arange(n_total)), np.arange(n_total))]
    while stack:
        node, idx = stack.pop()
        n0, n1 = counts[node]
        if n0 == 0 or n1 == 0 or len(idx) < 2 * min_leaf:
            continue
        xn = xb[idx]
        nonconst = np.flatnonzero(xn.max(axis=0) > xn.min(axis=0))
        if nonconst.size == 0:
            continue
        cands = rng.permutation(nonconst)[:max_features]
        split = _best_split(xn[:, cands], yb[idx], min_leaf)
        if split is None:
            continue
        col, thr, child = split
        f = int(cands[col])
        parent = gini(np.array([n0, n1]))
        decrease[f] += len(idx) / n_total * (float(parent) - child)
        go_left = xn[:, f] < thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # right pushed first so the left subtree is expanded first
        stack.append((right[node], ri))
        stack.append((left[node], li))
    tree = DecisionTree(np.array(feature, dtype=np.int32), np.array(threshold),
                        np.array(left, dtype=np.int32), np.array(right, dtype=np.int32),
                        np.array(counts, dtype=np.int64), boot.astype(np.int32))
    return tree, np.maximum(decrease, 0.0)


@dataclass
class RandomForestModel:
    view_ids: tuple[str, ...]
    trees: list[DecisionTree]
    oob_error: float
    importance_mdi: np.ndarray
    importance_permutation: np.ndarray
    seed: int
    use_scores: bool = False
    params: dict = field(default_factory=dict)

    def features(self, m: EnsembleMatrix) -> np.ndarray:
        missing = [v for v in self.view_ids if v not in m.view_ids]
        if missing:
            raise KeyError(f"ensemble matrix lacks views: {', '.join(missing)}")
        sub = m.columns(self.view_ids)
        return sub.scores if self.use_scores else sub.decisions.astype(np.float64)

    def importance(self, kind: str = "mdi") -> dict[str, float]:
        vals = self.importance_mdi if kind == "mdi" else self.importance_permutation
        return dict(zip(self.view_ids, map(float, vals)))


def _oob_error(trees: Sequence[DecisionTree], votes: Sequence[np.ndarray], y: np.ndarray,
               oob_masks: Sequence[np.ndarray]) -> float:
    yes = np.zeros(len(y))
    seen = np.zeros(len(y))
    for v, mask in zip(votes, oob_masks):
        yes += np.where(mask, v, 0)
        seen += mask
    have = seen > 0
    if not have.any():
        return float("nan")
    pred = (yes[have] / seen[have] >= THRESHOLD).astype(np.int8)
    return float(np.mean(pred != y[have]))


def train_forest(m: EnsembleMatrix, trees: int = 100, seed: int = 0, min_leaf: int = 2,
                 max_features: int | None = None, use_scores: bool = False,
                 permutation_repeats: int = 1) -> RandomForestModel:
    """Bagged Gini trees over the view columns, with OOB error and both importance measures.

    Each tree gets its own generator spawned from ``seed``. MDI sums the sample-weighted
    impurity decrease of every split per view, averages over trees and normalizes to 1.
    Permutation importance is the mean rise of the forest OOB error after shuffling one
    column (``permutation_repeats`` shuffles per view, drawn from a generator on ``seed``).
    """
    if m.labels is None:
        raise ValueError("forest training needs labelled samples")
    y = m.labels.astype(np.int8)
    if min(int(np.sum(y == 0)), int(np.sum(y == 1))) < 2:
        raise ValueError("forest training needs at least two samples of each class")
    if trees < 1:
        raise ValueError("trees must be >= 1")
    x = m.scores if use_scores else m.decisions.astype(np.float64)
    n, p = x.shape
    mtry = max_features or max(1, math.ceil(math.sqrt(p)))
    children = np.random.SeedSequence(seed).spawn(trees)
    grown, mdi = [], np.zeros(p)
    for child in children:
        tree, dec = grow_tree(x, y, np.random.default_rng(child), mtry, min_leaf)
        grown.append(tree)
        mdi += dec
    mdi /= trees
    mdi = mdi / mdi.sum() if mdi.sum() > 0 else np.full(p, 1.0 / p)

    oob = []
    for t in grown:
        mask = np.ones(n, dtype=bool)
        mask[t.bootstrap] = False
        oob.append(mask)
    votes = [t.vote(x) for t in grown]
    oob_err = _oob_error(grown, votes, y, oob)

    perm_imp = np.zeros(p)
    if permutation_repeats > 0 and not math.isnan(oob_err):
        rng = np.random.default_rng((seed, 0x5EED))
        users = [t.used_features() for t in grown]
        for j in range(p):
            total = 0.0
            for _ in range(permutation_repeats):
                xp = x.copy()
                xp[:, j] = x[rng.permutation(n), j]
                pv = [t.vote(xp) if j in u else v for t, u, v in zip(grown, users, votes)]
                total += _oob_error(grown, pv, y, oob) - oob_err
            perm_imp[j] = total / permutation_repeats
    return RandomForestModel(tuple(m.view_ids), grown, oob_err, mdi, perm_imp, seed, use_scores,
                             {"trees": trees, "min_leaf": min_leaf, "max_features": mtry})


def predict_forest(f: RandomForestModel, m: EnsembleMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of trees voting bona fide, and the decision at the 0.5 threshold."""
    x = f.features(m)
    score = np.mean([t.vote(x) for t in f.trees], axis=0)
    return (score >= THRESHOLD).astype(np.int8), score


def forest_to_bytes(f: RandomForestModel) -> bytes:
    header = json.dumps({"view_ids": list(f.view_ids), "oob_error": f.oob_error, "seed": f.seed,
                         "use_scores": f.use_scores, "params": f.params,
                         "nodes": [t.n_nodes for t in f.trees],
                         "boot": [len(t.bootstrap) for t in f.trees]}).encode()
    parts = [FOREST_MAGIC, struct.pack("<II", FOREST_VERSION, len(header)), header,
             f.importance_mdi.astype("<f8").tobytes(), f.importance_permutation.astype("<f8").tobytes()]
    for t in f.trees:
        parts += [t.feature.astype("<i4").tobytes(), t.threshold.astype("<f8").tobytes(),
                  t.left.astype("<i4").tobytes(), t.right.astype("<i4").tobytes(),
                  t.counts.astype("<i8").tobytes(), t.bootstrap.astype("<i4").tobytes()]
    return b"".join(parts)


def forest_from_bytes(data: bytes) -> RandomForestModel:
    if data[:4] != FOREST_MAGIC:
        raise ValueError("not a forest model")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FOREST_VERSION:
        raise ValueError(f"unsupported forest model version {version}")
    head = json.loads(data[12:12 + hlen])
    pos = 12 + hlen

    def take(dtype, count):
        nonlocal pos
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        pos += arr.nbytes
        return arr.copy()

    try:
        p = len(head["view_ids"])
        mdi, perm = take("<f8", p), take("<f8", p)
        trees = []
        for nodes, nboot in zip(head["nodes"], head["boot"]):
            trees.append(DecisionTree(take("<i4", nodes), take("<f8", nodes), take("<i4", nodes),
                                      take("<i4", nodes), take("<i8", 2 * nodes).reshape(nodes, 2),
                                      take("<i4", nboot)))
    except ValueError as exc:
        raise ValueError(f"truncated forest model: {exc}") from None
    if pos != len(data):
        raise ValueError("trailing bytes after forest model")
    return RandomForestModel(tuple(head["view_ids"]), trees, head["oob_error"], mdi, perm,
                             head["seed"], head["use_scores"], head["params"])


def save_forest(f: RandomForestModel, path: str | Path) -> None:
    atomic_write_bytes(path, forest_to_bytes(f))


def load_forest(path: str | Path) -> RandomForestModel:
    return forest_from_bytes(Path(path).read_bytes())


# -- voting -----------------------------------------------------------------------------------

def majority_vote(m: EnsembleMatrix) -> np.ndarray:
    """Bona fide only with strictly more bona fide votes; ties resolve to attack."""
    if not m.view_ids:
        raise ValueError("majority vote needs at least one view")
    d = m.decisions
    yes = d.sum(axis=1)
    return (yes > d.shape[1] - yes).astype(np.int8)


@dataclass(frozen=True)
class VoteWeights:
    view_ids: tuple[str, ...]
    weights: np.ndarray
    criterion: str

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.view_ids, map(float, self.weights)))


def bwwv_weights(values: Sequence[float], view_ids: Sequence[str], criterion: str) -> VoteWeights:
    """Best-worst linear weights: best value -> 1, worst -> 0, the rest in proportion.

    ``criterion`` is "accuracy" (BWWVA) or "importance" (BWWVI); larger values rank higher
    in both cases. Equal values everywhere give every view weight 1.
    """
    if criterion not in ("accuracy", "importance"):
        raise ValueError(f"unknown criterion {criterion!r}")
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or len(v) < 2:
        raise ValueError("best-worst weighting needs at least two views")
    if len(view_ids) != len(v):
        raise ValueError("one value per view is required")
    lo, hi = v.min(), v.max()
    w = np.ones_like(v) if hi == lo else (v - lo) / (hi - lo)
    return VoteWeights(tuple(view_ids), w, criterion)


def weighted_vote(m: EnsembleMatrix, w: VoteWeights) -> np.ndarray:
    weights = w.as_dict()
    missing = [v for v in m.view_ids if v not in weights]
    if missing:
        raise KeyError(f"no weight for views: {', '.join(missing)}")
    wv = np.array([weights[v] for v in m.view_ids])
    d = m.decisions.astype(bool)
    live = np.where(d, wv, 0.0).sum(axis=1)
    attack = np.where(d, 0.0, wv).sum(axis=1)
    return (live > attack).astype(np.int8)
