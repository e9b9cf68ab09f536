import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradattn.errors import ContractError
from gradattn.metrics import (
    MetricBundle,
    PredictionSet,
    confusion_matrix,
    evaluate,
    expected_calibration_error,
    generalization_gap,
    precision_recall_f1,
    topk_accuracy,
)


def random_preds(rng, n, k):
    logits = rng.normal(0, 2, size=(n, k))
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    return PredictionSet(p / p.sum(axis=1, keepdims=True), rng.integers(0, k, n))


def brute_topk(preds, k):
    hits = 0
    for row, y in zip(preds.probs, preds.labels):
        ranked = sorted(range(len(row)), key=lambda c: (-row[c], c))
        hits += y in ranked[:k]
    return hits / len(preds.labels)


def brute_prf(preds, averaging):
    k = preds.num_classes
    yhat = preds.predictions()
    ps, rs, fs, sup = [], [], [], []
    for c in range(k):
        tp = sum(1 for a, b in zip(preds.labels, yhat) if a == c and b == c)
        fp = sum(1 for a, b in zip(preds.labels, yhat) if a != c and b == c)
        fn = sum(1 for a, b in zip(preds.labels, yhat) if a == c and b != c)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        ps.append(p)
        rs.append(r)
        fs.append(2 * p * r / (p + r) if p + r else 0.0)
        sup.append(tp + fn)
    w = np.ones(k) / k if averaging == "macro" else np.array(sup) / sum(sup)
    return tuple(float(np.dot(w, v)) for v in (ps, rs, fs))


def brute_ece(preds, bins):
    total = 0.0
    n = len(preds.labels)
    conf = preds.probs.max(axis=1)
    correct = preds.predictions() == preds.labels
    for m in range(1, bins + 1):
        lo, hi = (m - 1) / bins, m / bins
        members = [i for i in range(n) if lo < conf[i] <= hi or (m == 1 and conf[i] == 0)]
        if members:
            acc = np.mean([correct[i] for i in members])
            c = np.mean([conf[i] for i in members])
            total += len(members) / n * abs(acc - c)
    return total


def test_topk_examples():
    rng = np.random.default_rng(0)
    pr = random_preds(rng, 20, 5)
    assert topk_accuracy(pr, 5) == 1.0
    for k in range(1, 6):
        assert topk_accuracy(pr, k) == brute_topk(pr, k)
    onehot = PredictionSet(np.eye(4), np.arange(4))
    assert topk_accuracy(onehot, 1) == 1.0
    with pytest.raises(ContractError):
        topk_accuracy(pr, 6)


def test_topk_monotone_over_random_fixtures():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        k = int(rng.integers(2, 9))
        pr = random_preds(rng, int(rng.integers(1, 30)), k)
        accs = [topk_accuracy(pr, j) for j in range(1, k + 1)]
        assert all(a <= b for a, b in zip(accs, accs[1:])) and accs[-1] == 1.0


def test_topk_ties_rank_lowest_index_first():
    pr = PredictionSet(np.full((2, 4), 0.25), np.array([0, 3]))
    assert topk_accuracy(pr, 1) == 0.5
    assert topk_accuracy(pr, 3) == 0.5


def test_prf_binary_fixture():
    # class 1 positive: TP=2, FP=1, FN=1, TN=6
    labels = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0, 0])
    yhat = np.array([1, 1, 0, 1, 0, 0, 0, 0, 0, 0])
    pr = PredictionSet(np.eye(2)[yhat], labels)
    cm = confusion_matrix(labels, yhat, 2)
    assert cm.tolist() == [[6, 1], [1, 2]]
    p1, r1 = 2 / 3, 2 / 3
    p0, r0 = 6 / 7, 6 / 7
    f0 = 2 * p0 * r0 / (p0 + r0)
    p, r, f = precision_recall_f1(pr, "macro")
    assert abs(p - (p0 + p1) / 2) < 1e-12 and abs(r - (r0 + r1) / 2) < 1e-12
    assert abs(f - (f0 + 2 / 3) / 2) < 1e-12


def test_prf_perfect():
    pr = PredictionSet(np.eye(3)[[0, 1, 2, 2]], np.array([0, 1, 2, 2]))
    assert precision_recall_f1(pr, "macro") == (1.0, 1.0, 1.0)
    assert precision_recall_f1(pr, "weighted") == (1.0, 1.0, 1.0)


@pytest.mark.parametrize("seed", range(20))
def test_prf_matches_brute_force(seed):
    pr = random_preds(np.random.default_rng(seed), 50, 3)
    for avg in ("macro", "weighted"):
        np.testing.assert_allclose(precision_recall_f1(pr, avg), brute_prf(pr, avg), atol=1e-9)


def _calibrated_set():
    rows, labels = [], []
    for conf, n, n_correct in [(0.6, 10, 6), (0.8, 5, 4), (1.0, 3, 3), (0.75, 4, 3)]:
        for i in range(n):
            rows.append([conf, 1 - conf])
            labels.append(0 if i < n_correct else 1)
    return PredictionSet(np.array(rows), np.array(labels))


def test_ece_calibrated_and_extreme():
    assert abs(expected_calibration_error(_calibrated_set())) < 1e-9
    wrong = PredictionSet(np.eye(3)[[0, 1, 2, 0]], np.array([1, 2, 0, 2]))
    assert expected_calibration_error(wrong) == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_ece_matches_binning_oracle(seed):
    pr = random_preds(np.random.default_rng(seed), 100, 4)
    assert abs(expected_calibration_error(pr, bins=10) - brute_ece(pr, 10)) < 1e-9
    assert abs(expected_calibration_error(pr) - brute_ece(pr, 15)) < 1e-9


def test_ece_bin_edges_are_right_closed():
    # conf exactly 2/3 sits in bin 10 of 15 (edge (9/15, 10/15]), conf 0.5 in bin 8
    pr = PredictionSet(np.array([[2 / 3, 1 / 3], [0.5, 0.5]]), np.array([0, 1]))
    assert abs(expected_calibration_error(pr) - brute_ece(pr, 15)) < 1e-12


def test_ece_permutation_invariant():
    rng = np.random.default_rng(3)
    pr = random_preds(rng, 60, 5)
    perm = rng.permutation(60)
    shuffled = PredictionSet(pr.probs[perm], pr.labels[perm])
    assert abs(expected_calibration_error(pr) - expected_calibration_error(shuffled)) < 1e-12


def test_generalization_gap():
    assert generalization_gap(0.9, 0.9) == 0
    assert abs(generalization_gap(0.9971, 0.3350) - 0.6621) < 1e-12
    assert generalization_gap(0.3, 0.8) == generalization_gap(0.8, 0.3)
    with pytest.raises(ContractError):
        generalization_gap(1.2, 0.5)


probs_strategy = st.integers(2, 6).flatmap(
    lambda k: st.tuples(
        st.lists(st.lists(st.floats(0.01, 10), min_size=k, max_size=k), min_size=1, max_size=40),
        st.randoms(use_true_random=False),
    ).map(lambda t: _build(t[0], t[1], k))
)


def _build(rows, rnd, k):
    p = np.array(rows)
    p = p / p.sum(axis=1, keepdims=True)
    return PredictionSet(p, np.array([rnd.randrange(k) for _ in rows]))


@settings(max_examples=150, deadline=None)
@given(probs_strategy)
def test_weighted_recall_equals_top1(pr):
    _, r, _ = precision_recall_f1(pr, "weighted")
    assert abs(r - topk_accuracy(pr, 1)) < 1e-9


@settings(max_examples=150, deadline=None)
@given(probs_strategy)
def test_ece_in_unit_interval(pr):
    assert 0.0 <= expected_calibration_error(pr) <= 1.0 + 1e-12


@settings(max_examples=100, deadline=None)
@given(probs_strategy, st.randoms(use_true_random=False))
def test_macro_metrics_relabel_invariant(pr, rnd):
    k = pr.num_classes
    perm = list(range(k))
    rnd.shuffle(perm)
    perm = np.array(perm)
    # column c of the relabeled set holds old class perm^-1(c)
    inv = np.argsort(perm)
    relabeled = PredictionSet(pr.probs[:, inv], perm[pr.labels])
    if np.any(np.sort(pr.probs, axis=1)[:, -1] == np.sort(pr.probs, axis=1)[:, -2]):
        return  # argmax ties resolve by index, which relabeling moves
    np.testing.assert_allclose(precision_recall_f1(pr, "macro"), precision_recall_f1(relabeled, "macro"), atol=1e-12)


def test_bundle_json_round_trip():
    pr = random_preds(np.random.default_rng(4), 30, 6)
    b = evaluate(pr, loss=0.7, train_acc=0.95)
    assert MetricBundle.from_json(b.to_json()) == b
    assert b.top1 <= b.top3 <= b.top5
    assert abs(b.recall_weighted - b.top1) < 1e-9
    assert b.generalization_gap == abs(0.95 - b.top1)


def test_prediction_set_contract():
    with pytest.raises(ContractError):
        PredictionSet(np.array([[0.5, 0.6]]), np.array([0]))
    with pytest.raises(ContractError):
        PredictionSet(np.array([[0.5, 0.5]]), np.array([2]))
