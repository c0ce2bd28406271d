from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvpad.fusion import EnsembleMatrix, majority_vote, train_forest
from mvpad.selection import (SelectionResult, cohen_kappa, complement_matrix, grid_search_k,
                             kappa_matrix, occurrences, pick_from_matrix, predict_meta, select_views,
                             stratified_folds, train_meta_svm)


def kappa_direct(a, b):
    """Textbook formula on exact rationals."""
    n = len(a)
    po = Fraction(sum(x == y for x, y in zip(a, b)), n)
    pe = sum(Fraction(list(a).count(c), n) * Fraction(list(b).count(c), n) for c in (0, 1))
    if pe == 1:
        return 1.0 if list(a) == list(b) else 0.0
    return float((po - pe) / (1 - pe))


def test_kappa_examples():
    assert cohen_kappa([1, 0, 1, 1], [1, 0, 1, 1]) == 1.0
    assert cohen_kappa([1, 1, 0, 0], [1, 0, 0, 1]) == 0.0
    assert cohen_kappa([1, 1, 1, 0], [1, 1, 0, 0]) == 0.5


def test_kappa_degenerate_marginals():
    assert cohen_kappa([1, 1, 1], [1, 1, 1]) == 1.0
    assert cohen_kappa([1, 1, 1], [0, 0, 0]) == 0.0


def test_kappa_length_mismatch():
    with pytest.raises(ValueError, match="equal length"):
        cohen_kappa([1, 0], [1])


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 50).flatmap(lambda n: st.tuples(st.lists(st.integers(0, 1), min_size=n, max_size=n),
                                                      st.lists(st.integers(0, 1), min_size=n, max_size=n))))
def test_kappa_matches_formula(pair):
    a, b = pair
    k = cohen_kappa(a, b)
    assert abs(k - kappa_direct(a, b)) <= 1e-12
    assert k == cohen_kappa(b, a)
    assert cohen_kappa(a, a) == 1.0
    assert -1 <= k <= 1


def test_kappa_matrix_matches_pairwise():
    d = np.random.default_rng(0).integers(0, 2, (37, 9))
    d[:, 3] = 1                                   # constant column
    K = kappa_matrix(d)
    for i in range(9):
        for j in range(9):
            assert abs(K[i, j] - (1.0 if i == j else cohen_kappa(d[:, i], d[:, j]))) <= 1e-12
    np.testing.assert_array_equal(K, K.T)


def test_selection_rule_examples():
    assert pick_from_matrix([["v3", "v7"], ["v7", "v9"]], ["t1", "t2"]) == (["t1", "t2"], True)
    sel, fb = pick_from_matrix([["v3", "v7"], ["v7", "v9"], ["v3", "v9"]], ["t1", "t2", "t3"])
    assert set(sel) == {"v3", "v7", "v9"} and not fb


def test_columns_mode_and_union():
    C = [["a", "b"], ["b", "a"], ["c", "d"]]
    assert occurrences(C, "rows") == {"a": 2, "b": 2, "c": 1, "d": 1}
    assert occurrences(C, "columns") == {"a": 2, "b": 2, "c": 1, "d": 1}
    C = [["a", "b"], ["a", "c"]]
    assert occurrences(C, "columns")["a"] == 1 and occurrences(C, "rows")["a"] == 2
    sel, fb = pick_from_matrix([["a", "b"], ["a", "b"]], ["t1", "t2"], union=True)
    assert set(sel) == {"a", "b", "t1", "t2"} and not fb
    with pytest.raises(ValueError):
        occurrences(C, "diagonal")


def clustered(seed, n=120, p=12, clusters=((0, 1, 2), (3, 4, 5))):
    """Views within a cluster share one noisy copy of the label; others are independent."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    cols = np.empty((n, p))
    done = set()
    for cl in clusters:
        base = np.where(rng.random(n) < 0.85, y, 1 - y)
        for j in cl:
            flip = rng.random(n) < 0.05
            cols[:, j] = np.where(flip, 1 - base, base)
            done.add(j)
    for j in range(p):
        if j not in done:
            cols[:, j] = np.where(rng.random(n) < rng.uniform(0.5, 0.8), y, 1 - y)
    s = cols * 0.6 + 0.2
    return EnsembleMatrix([f"s{i}" for i in range(n)], [f"v{j}" for j in range(p)], s, y)


def exhaustive_selection(m, ranking, k, l):
    """Independent steps 2-4: enumerate all (top view, candidate) pairs."""
    d = m.decisions
    p = d.shape[1]
    top = ranking[:k]
    count = {}
    for r in top:
        kap = {j: kappa_direct(d[:, r].tolist(), d[:, j].tolist()) for j in range(p) if j != r}
        # j is among the l least-agreeing partners iff fewer than l partners beat it
        for j in kap:
            better = sum(1 for q in kap if (kap[q], q) < (kap[j], j))
            if better < l:
                count[j] = count.get(j, 0) + 1
    chosen = sorted(j for j, c in count.items() if c >= 2)
    if len(chosen) < 2:
        return sorted(top), True
    return chosen, False


@pytest.mark.parametrize("seed", range(10))
def test_select_views_matches_exhaustive(seed):
    m = clustered(seed)
    rng = np.random.default_rng(seed)
    k, l = int(rng.integers(1, 12)), int(rng.integers(1, 12))
    res = select_views(m, k, l, seed=seed, trees=30)
    f = train_forest(m, 30, seed, permutation_repeats=0)
    ranking = sorted(range(12), key=lambda j: (-f.importance_mdi[j], j))
    assert res.top == [m.view_ids[j] for j in ranking[:k]]
    want, fb = exhaustive_selection(m, ranking, k, l)
    assert res.fallback == fb
    assert sorted(m.view_ids.index(v) for v in res.selected) == want


def test_full_width_selects_views_complementary_to_two_others():
    m = clustered(3)
    p = len(m.view_ids)
    res = select_views(m, p - 1, p - 1, seed=3, trees=20)
    # every view is a complement of every other view, so all views recur
    assert sorted(res.selected) == sorted(m.view_ids) and not res.fallback


def test_selected_views_recur_or_fallback():
    for seed in range(5):
        res = select_views(clustered(seed), 3, 2, seed=seed, trees=20)
        counts = occurrences(res.complements)
        assert res.fallback or all(counts[v] >= 2 for v in res.selected)
        if res.fallback:
            assert res.selected == [v for v in res.view_ids if v in res.top]


def test_select_bounds():
    m = clustered(0)
    with pytest.raises(ValueError, match="k must"):
        select_views(m, 0, 2)
    with pytest.raises(ValueError, match="l must"):
        select_views(m, 2, 12)


def test_selection_json_round_trip(tmp_path):
    res = select_views(clustered(1), 4, 3, seed=1, trees=20)
    res.save(tmp_path / "s.json")
    assert SelectionResult.from_json((tmp_path / "s.json").read_text()) == res


def test_complement_ties_go_to_lower_index():
    K = np.zeros((4, 4))
    np.fill_diagonal(K, 1)
    assert complement_matrix(K, [2], 2) == [[0, 1]]


def test_stratified_folds_balance():
    y = np.array([1] * 23 + [0] * 17)
    f = stratified_folds(y, 5, 0)
    for i in range(5):
        assert abs(np.sum((f == i) & (y == 1)) - 23 / 5) < 1
        assert abs(np.sum((f == i) & (y == 0)) - 17 / 5) < 1


def separable(seed, n=60):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    s = np.clip(y[:, None] * 0.5 + 0.25 + rng.normal(0, 0.08, (n, 2)), 0, 1)
    return EnsembleMatrix([f"s{i}" for i in range(n)], ["a", "b"], s, y)


def test_meta_svm_separable_training_hter_zero():
    m = separable(0)
    svm, (C, g), table = train_meta_svm(m, seed=0)
    dec, margin = predict_meta(svm, m)
    assert (dec == m.labels).all()
    assert len(table) == 16 and table[(C, g)] == min(table.values())
    assert np.mean(dec != m.labels) <= np.mean(majority_vote(m) != m.labels)


def test_meta_svm_tie_picks_first_grid_cell():
    _, best, table = train_meta_svm(separable(1), seed=0)
    first = next(k for k, v in table.items() if v == min(table.values()))
    assert best == first


def test_meta_svm_missing_view():
    svm, _, _ = train_meta_svm(separable(2), c_grid=(1.0,), gamma_grid=(0.1,))
    m = separable(3)
    with pytest.raises(KeyError, match="b"):
        predict_meta(svm, m.columns(["a"]))


def test_grid_search_single_k():
    m = clustered(4)
    best, scores = grid_search_k([m], [7], l=3, trees=10, c_grid=(1.0,), gamma_grid=(0.1,))
    assert best == 7 and list(scores) == [7]


def test_grid_search_bounds():
    with pytest.raises(ValueError, match="k range"):
        grid_search_k([clustered(0)], [0, 3])


def four_informative(seed, n=200, p=20):
    """Views 0-3 are independent 80%-accurate predictors, the rest are uninformative."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    cols = []
    for j in range(p):
        if j < 4:
            d = np.where(rng.random(n) < 0.8, y, 1 - y)
            cols.append(np.clip(d * 0.5 + 0.25 + rng.normal(0, 0.15, n), 0, 1))
        else:
            cols.append(rng.random(n))
    return EnsembleMatrix([f"s{i}" for i in range(n)], [f"v{j}" for j in range(p)], np.column_stack(cols), y)


@pytest.mark.slow
def test_grid_search_k_concentrates_near_informative_count():
    # with the union option the SVM also sees the top-k views, so k near 4 pays off;
    # without it the lowest-kappa partners of informative views are the noise views
    best = [grid_search_k([four_informative(s)], range(1, 11), l=5, seed=s, trees=30, union=True,
                          c_grid=(1.0, 10.0), gamma_grid=(0.1, 1.0))[0] for s in range(5)]
    assert sum(3 <= k <= 8 for k in best) >= 4, best
