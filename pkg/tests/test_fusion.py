import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvpad.fusion import (EnsembleMatrix, bwwv_weights, forest_from_bytes, forest_to_bytes,
                          majority_vote, predict_forest, train_forest, weighted_vote)


def matrix(scores, labels=None):
    scores = np.asarray(scores, dtype=np.float64)
    n, p = scores.shape
    return EnsembleMatrix([f"s{i}" for i in range(n)], [f"v{j}" for j in range(p)], scores, labels)


def informative(seed, n=200, noise=10):
    """One view equal to the label plus independent coin-flip views."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    s = np.column_stack([y * 0.8 + 0.1] + [rng.random(n) for _ in range(noise)])
    return EnsembleMatrix([f"s{i}" for i in range(n)], ["info"] + [f"n{j}" for j in range(noise)], s, y)


def votes(bits):
    return matrix(np.asarray(bits, dtype=np.float64) * 0.8 + 0.1)


# -- ensemble matrix -----------------------------------------------------------------------

def test_decisions_follow_threshold():
    m = matrix([[0.5, 0.4999, 1.0, 0.0]])
    assert m.decisions.tolist() == [[1, 0, 1, 0]]


def test_matrix_validation():
    with pytest.raises(ValueError, match="unique"):
        EnsembleMatrix(["a"], ["v", "v"], [[0.1, 0.2]])
    with pytest.raises(ValueError, match="within"):
        matrix([[1.2]])
    with pytest.raises(ValueError, match="shape"):
        EnsembleMatrix(["a", "b"], ["v"], [[0.1]])
    with pytest.raises(KeyError, match="lacks views: zz"):
        matrix([[0.1]]).columns(["zz"])


def test_matrix_csv_round_trip(tmp_path):
    m = matrix(np.random.default_rng(0).random((4, 3)), [1, 0, 1, 0])
    m.save(tmp_path / "m.csv")
    back = EnsembleMatrix.load(tmp_path / "m.csv")
    assert back.sample_ids == m.sample_ids and back.view_ids == m.view_ids
    assert back.scores.tobytes() == m.scores.tobytes()
    assert back.labels.tolist() == [1, 0, 1, 0]
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "sample_id,label,v0,v1,v2"


def test_unlabelled_matrix_round_trip():
    m = matrix([[0.2, 0.9]])
    assert EnsembleMatrix.from_csv(m.to_csv()).labels is None


# -- voting --------------------------------------------------------------------------------

def test_majority_examples():
    assert majority_vote(votes([[0] * 31 + [1] * 30])).tolist() == [0]
    assert majority_vote(votes([[1] * 31 + [0] * 30])).tolist() == [1]
    assert majority_vote(votes([[1] * 30 + [0] * 30])).tolist() == [0]


def test_uniform_weights_equal_majority_exhaustive():
    patterns = np.array(list(itertools.product([0, 1], repeat=9)))
    m = votes(patterns)
    w = bwwv_weights([0.8] * 9, m.view_ids, "accuracy")
    np.testing.assert_array_equal(w.weights, 1.0)
    assert (weighted_vote(m, w) == majority_vote(m)).all()


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 30), p=st.integers(1, 12))
def test_uniform_weights_equal_majority_random(seed, n, p):
    m = matrix(np.random.default_rng(seed).random((n, p)))
    from mvpad.fusion import VoteWeights
    w = VoteWeights(m.view_ids, np.ones(p), "accuracy")
    assert (weighted_vote(m, w) == majority_vote(m)).all()


def test_bwwv_examples():
    np.testing.assert_allclose(bwwv_weights([0.9, 0.8, 0.7], "abc", "accuracy").weights, [1, 0.5, 0],
                               atol=1e-15)
    w = bwwv_weights([0.95, 0.60, 0.93, 0.61], "abcd", "accuracy").weights
    # independent exact cast
    lo, hi = Fraction("0.60"), Fraction("0.95")
    ref = [float((Fraction(v) - lo) / (hi - lo)) for v in ("0.95", "0.60", "0.93", "0.61")]
    assert ref == pytest.approx([1, 0, 33 / 35, 1 / 35], abs=1e-15)
    np.testing.assert_allclose(w, ref, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=61))
def test_bwwv_endpoints(values):
    w = bwwv_weights(values, [str(i) for i in range(len(values))], "importance").weights
    assert ((w >= 0) & (w <= 1)).all()
    if max(values) > min(values):
        assert w[int(np.argmax(values))] == 1.0 and w[int(np.argmin(values))] == 0.0
    else:
        assert (w == 1).all()


def test_bwwv_errors():
    with pytest.raises(ValueError, match="at least two"):
        bwwv_weights([0.5], ["a"], "accuracy")
    with pytest.raises(ValueError, match="criterion"):
        bwwv_weights([0.5, 0.4], ["a", "b"], "speed")


def test_weighted_vote_examples():
    m = votes([[0, 1, 1]])
    assert weighted_vote(m, bwwv_weights([1, 0, 0], m.view_ids, "accuracy")).tolist() == [0]
    m = votes([[1, 0, 0, 1]])
    from mvpad.fusion import VoteWeights
    w = VoteWeights(m.view_ids, np.array([0.9, 0.4, 0.4, 0.2]), "accuracy")
    assert weighted_vote(m, w).tolist() == [1]
    with pytest.raises(KeyError, match="no weight"):
        weighted_vote(matrix([[0.2, 0.3, 0.1]]), VoteWeights(("v0",), np.ones(1), "accuracy"))


def test_condorcet_jury():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 10_000)
    correct = rng.random((10_000, 61)) < 0.7
    d = np.where(correct, y[:, None], 1 - y[:, None])
    assert np.mean(majority_vote(votes(d)) == y) > 0.95


# -- random forest -------------------------------------------------------------------------

def test_forest_ranks_informative_view_first():
    wins = sum(int(np.argmax(train_forest(informative(s), 100, s, permutation_repeats=0).importance_mdi) == 0)
               for s in range(20))
    assert wins >= 19


def test_forest_invariants():
    f = train_forest(informative(3), 100, 3)
    assert abs(f.importance_mdi.sum() - 1) <= 1e-9
    assert (f.importance_mdi >= 0).all()
    assert 0 <= f.oob_error < 0.1
    assert np.abs(f.importance_permutation[1:]).max() < 0.05
    assert f.importance_permutation[0] > 0.2


def test_forest_deterministic():
    m = informative(4)
    a, b = train_forest(m, 30, 9), train_forest(m, 30, 9)
    assert forest_to_bytes(a) == forest_to_bytes(b)


def test_forest_unanimous_attack():
    f = train_forest(informative(5), 50, 5)
    m = EnsembleMatrix(["x"], f.view_ids, np.full((1, 11), 0.1))
    dec, score = predict_forest(f, m)
    assert dec.tolist() == [0] and score[0] < 0.5


def _stump_forest(live_trees, total):
    from mvpad.fusion import DecisionTree, RandomForestModel
    trees = []
    for i in range(total):
        counts = np.array([[0, 3]] if i < live_trees else [[3, 0]])
        trees.append(DecisionTree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]), counts,
                                  np.zeros(3, dtype=np.int32)))
    return RandomForestModel(("v0",), trees, 0.0, np.ones(1), np.zeros(1), 0)


def test_forest_score_is_tree_fraction():
    dec, score = predict_forest(_stump_forest(60, 100), matrix([[0.2]]))
    assert score.tolist() == [0.6] and dec.tolist() == [1]
    dec, score = predict_forest(_stump_forest(0, 100), matrix([[0.9]]))
    assert score.tolist() == [0.0] and dec.tolist() == [0]
    dec, _ = predict_forest(_stump_forest(50, 100), matrix([[0.9]]))
    assert dec.tolist() == [1]


def _walk(tree, x):
    node = 0
    while tree.feature[node] >= 0:
        node = tree.right[node] if x[tree.feature[node]] >= tree.threshold[node] else tree.left[node]
    c0, c1 = tree.counts[node]
    return int(c1 > c0)


def test_forest_matches_hand_traced_walk():
    rng = np.random.default_rng(7)
    y = rng.integers(0, 2, 40)
    s = np.where(rng.random((40, 5)) < 0.75, y[:, None], 1 - y[:, None]) * 0.8 + 0.1
    m = matrix(s, y)
    f = train_forest(m, 15, 7)
    x = m.decisions.astype(float)
    for i in range(40):
        frac = np.mean([_walk(t, x[i]) for t in f.trees])
        assert predict_forest(f, m.rows([i]))[1][0] == frac


def test_forest_tree_structure_valid():
    f = train_forest(informative(8), 10, 8)
    for t in f.trees:
        inner = t.feature >= 0
        assert (t.left[inner] > 0).all() and (t.right[inner] > 0).all()
        assert (t.counts >= 0).all()
        assert (t.counts[t.left[inner]].sum(1) + t.counts[t.right[inner]].sum(1) == t.counts[inner].sum(1)).all()


def test_forest_errors():
    with pytest.raises(ValueError, match="two samples of each class"):
        train_forest(matrix([[0.1], [0.9], [0.3]], [1, 1, 1]))
    with pytest.raises(ValueError, match="labelled"):
        train_forest(matrix([[0.1], [0.9]]))
    f = train_forest(informative(9), 5, 9)
    with pytest.raises(KeyError, match="info"):
        predict_forest(f, matrix([[0.1]]))


def test_forest_file_round_trip(tmp_path):
    from mvpad.fusion import load_forest, save_forest
    m = informative(10)
    f = train_forest(m, 20, 10)
    save_forest(f, tmp_path / "f.mvrf")
    g = load_forest(tmp_path / "f.mvrf")
    assert (tmp_path / "f.mvrf").read_bytes()[:4] == b"MVRF"
    np.testing.assert_array_equal(predict_forest(f, m)[1], predict_forest(g, m)[1])
    data = forest_to_bytes(f)
    with pytest.raises(ValueError, match="truncated"):
        forest_from_bytes(data[:-10])
    with pytest.raises(ValueError, match="not a forest"):
        forest_from_bytes(b"XXXX" + data[4:])
