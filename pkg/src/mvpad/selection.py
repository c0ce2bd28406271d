"""Importance/complementarity driven view selection and SVM meta-fusion."""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .common import atomic_write_text
from .fusion import EnsembleMatrix, train_forest
from .metrics import evaluate
from .svm import SvmModel, fit_svm

DEFAULT_C_GRID = (0.1, 1.0, 10.0, 100.0)
DEFAULT_GAMMA_GRID = (0.01, 0.1, 1.0, 10.0)


def cohen_kappa(a: Sequence[int], b: Sequence[int]) -> float:
    """Chance-corrected agreement of two raters over the categories either of them uses."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("rater sequences must be 1-D and of equal length")
    n = len(a)
    if n == 0:
        raise ValueError("rater sequences must not be empty")
    agree = int(np.sum(a == b))
    cats = np.union1d(a, b)
    chance = sum(int(np.sum(a == c)) * int(np.sum(b == c)) for c in cats)
    # kappa = (p_o - p_e) / (1 - p_e) with both sides scaled by n^2
    denom = n * n - chance
    if denom == 0:
        return 1.0 if agree == n else 0.0
    return (n * agree - chance) / denom


def kappa_matrix(decisions: np.ndarray) -> np.ndarray:
    """Pairwise kappa between the binary columns of a samples x views matrix."""
    d = np.asarray(decisions, dtype=np.int64)
    n = d.shape[0]
    ones = d.sum(axis=0)
    both = d.T @ d
    agree = n - ones[:, None] - ones[None, :] + 2 * both
    chance = ones[:, None] * ones[None, :] + (n - ones)[:, None] * (n - ones)[None, :]
    num = n * agree - chance
    den = n * n - chance
    safe = np.where(den == 0, 1, den)
    k = np.where(den == 0, np.where(agree == n, 1.0, 0.0), num / safe)
    np.fill_diagonal(k, 1.0)
    return k


def complement_matrix(kappa: np.ndarray, top: Sequence[int], l: int) -> list[list[int]]:
    """For each top view, the l other views with the lowest kappa (ties -> lower index)."""
    p = kappa.shape[0]
    rows = []
    for r in top:
        others = [j for j in range(p) if j != r]
        others.sort(key=lambda j: (kappa[r, j], j))
        rows.append(others[:l])
    return rows


def occurrences(C: Sequence[Sequence], mode: str = "rows") -> dict:
    """How many distinct rows (or column positions) of C each entry appears in."""
    seen: dict = {}
    if mode == "rows":
        for row in C:
            for v in set(row):
                seen[v] = seen.get(v, 0) + 1
    elif mode == "columns":
        width = max((len(r) for r in C), default=0)
        for j in range(width):
            for v in {row[j] for row in C if j < len(row)}:
                seen[v] = seen.get(v, 0) + 1
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return seen


def pick_from_matrix(C: Sequence[Sequence], top: Sequence, mode: str = "rows",
                     union: bool = False, order: Sequence | None = None) -> tuple[list, bool]:
    """Entries occurring in >= 2 rows (or columns) of C; falls back to ``top`` when fewer than 2.

    Returns (selected, fallback). ``order`` fixes the output ordering (defaults to first appearance).
    """
    counts = occurrences(C, mode)
    if order is None:
        order = list(dict.fromkeys(itertools.chain(top, *C)))
    chosen = [v for v in order if counts.get(v, 0) >= 2]
    if len(chosen) < 2:
        return [v for v in order if v in set(top)], True
    if union:
        chosen = [v for v in order if v in set(chosen) | set(top)]
    return chosen, False


@dataclass
class SelectionResult:
    ranking: list[tuple[str, float]]      # (view, MDI importance), most important first
    top: list[str]
    complements: list[list[str]]          # one row per top view
    selected: list[str]
    fallback: bool
    k: int
    l: int
    mode: str = "rows"
    union: bool = False
    view_ids: list[str] = field(default_factory=list)
    kappa: list[list[float]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SelectionResult":
        d = json.loads(text)
        d["ranking"] = [tuple(x) for x in d["ranking"]]
        return cls(**d)

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json())


def select_views(m: EnsembleMatrix, k: int, l: int, seed: int = 0, trees: int = 100,
                 mode: str = "rows", union: bool = False) -> SelectionResult:
    """Rank views by forest MDI, pair each of the top k with its l least-agreeing views,
    and keep the views that recur across the resulting matrix."""
    p = len(m.view_ids)
    if not 1 <= k <= p:
        raise ValueError(f"k must lie in 1..{p}")
    if not 1 <= l <= p - 1:
        raise ValueError(f"l must lie in 1..{p - 1}")
    forest = train_forest(m, trees=trees, seed=seed, permutation_repeats=0)
    mdi = forest.importance_mdi
    rank = sorted(range(p), key=lambda j: (-mdi[j], j))
    top = rank[:k]
    kap = kappa_matrix(m.decisions)
    C = complement_matrix(kap, top, l)
    picked, fallback = pick_from_matrix(C, top, mode, union, order=list(range(p)))
    names = m.view_ids
    return SelectionResult(
        ranking=[(names[j], float(mdi[j])) for j in rank],
        top=[names[j] for j in top],
        complements=[[names[j] for j in row] for row in C],
        selected=[names[j] for j in picked],
        fallback=fallback, k=k, l=l, mode=mode, union=union,
        view_ids=list(names), kappa=kap.tolist())


# -- meta-fusion ------------------------------------------------------------------------------

def stratified_folds(labels: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Fold index per sample; each class is shuffled and dealt round-robin."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    fold = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in (1, 0):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        fold[idx] = (np.arange(len(idx)) + offset) % folds
        offset += len(idx)
    return fold


def _features(m: EnsembleMatrix, use_scores: bool) -> np.ndarray:
    return m.scores if use_scores else m.decisions.astype(np.float64)


def _hter(decisions, labels) -> float:
    h = evaluate(decisions, labels, "cv").hter
    return float(h) if h is not None else 100.0


def train_meta_svm(m: EnsembleMatrix, c_grid: Sequence[float] = DEFAULT_C_GRID,
                   gamma_grid: Sequence[float] = DEFAULT_GAMMA_GRID, folds: int = 5,
                   seed: int = 0, tol: float = 1e-3, use_scores: bool = True,
                   kernel: str = "rbf") -> tuple[SvmModel, tuple[float, float], dict]:
    """Grid-search (C, gamma) by stratified cross-validated HTER, then refit on all of ``m``.

    The fold count shrinks to the minority class size when that is below ``folds``.
    Returns (model, (C, gamma), {(C, gamma): cv_hter}); ties go to the earlier grid cell.
    """
    if m.labels is None:
        raise ValueError("meta-fusion training needs labelled samples")
    y = m.labels
    minority = min(int(np.sum(y == 1)), int(np.sum(y == 0)))
    if minority < 2:
        raise ValueError("meta-fusion training needs at least two samples of each class")
    if not m.view_ids:
        raise ValueError("meta-fusion needs at least one view")
    x = _features(m, use_scores)
    k = min(folds, minority)
    fold = stratified_folds(y, k, seed)
    table: dict[tuple[float, float], float] = {}
    best, best_h = None, np.inf
    for C in c_grid:
        for g in gamma_grid:
            pred = np.empty(len(y), dtype=np.int8)
            for f in range(k):
                tr, te = fold != f, fold == f
                model = fit_svm(x[tr], y[tr], C, g, kernel, tol)
                pred[te] = model.decision_function(x[te]) > 0
            h = _hter(pred, y)
            table[(C, g)] = h
            if h < best_h:
                best, best_h = (C, g), h
    model = fit_svm(x, y, best[0], best[1], kernel, tol, tuple(m.view_ids), use_scores)
    return model, best, table


def predict_meta(svm: SvmModel, m: EnsembleMatrix) -> tuple[np.ndarray, np.ndarray]:
    sub = m.columns(svm.view_ids)
    margin = svm.decision_function(_features(sub, svm.use_scores))
    return (margin > 0).astype(np.int8), margin


def grid_search_k(matrices: Sequence[EnsembleMatrix], k_values: Sequence[int], l: int = 5,
                  folds: int = 5, seed: int = 0, trees: int = 100, mode: str = "rows",
                  union: bool = False, c_grid: Sequence[float] = DEFAULT_C_GRID,
                  gamma_grid: Sequence[float] = DEFAULT_GAMMA_GRID,
                  use_scores: bool = True) -> tuple[int, dict[int, float]]:
    """Pick k by cross-validated HTER of the whole select + meta-SVM chain.

    For each k and dataset, selection and SVM fitting see only the training folds; the
    held-out fold predictions are pooled into one HTER per dataset and averaged over
    datasets. Ties go to the smaller k.
    """
    k_values = sorted(set(int(k) for k in k_values))
    if not k_values:
        raise ValueError("empty k range")
    for mat in matrices:
        if not 1 <= k_values[0] <= k_values[-1] <= len(mat.view_ids):
            raise ValueError(f"k range must lie within 1..{len(mat.view_ids)}")
    scores: dict[int, float] = {}
    for k in k_values:
        per_dataset = []
        for d, mat in enumerate(matrices):
            y = mat.labels
            nfold = min(folds, int(np.sum(y == 1)), int(np.sum(y == 0)))
            fold = stratified_folds(y, nfold, seed + d)
            pred = np.empty(len(y), dtype=np.int8)
            for f in range(nfold):
                tr = np.flatnonzero(fold != f)
                te = np.flatnonzero(fold == f)
                train = mat.rows(tr)
                sel = select_views(train, k, l, seed=seed, trees=trees, mode=mode, union=union)
                svm, _, _ = train_meta_svm(train.columns(sel.selected), c_grid, gamma_grid,
                                           folds, seed, use_scores=use_scores)
                pred[te], _ = predict_meta(svm, mat.rows(te))
            per_dataset.append(_hter(pred, y))
        scores[k] = float(np.mean(per_dataset))
    best = min(k_values, key=lambda k: (scores[k], k))
    return best, scores
