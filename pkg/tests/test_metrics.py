import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advrec.dataset import ImplicitDataset, leave_one_out_split, synthetic_dataset
from advrec.errors import DomainError
from advrec.metrics import (
    EvalReport,
    efd_at_k,
    evaluate,
    evaluate_random,
    fit_line,
    item_coverage_at_k,
    ndcg_at_k,
    normalized_auc,
    precision_at_k,
    recall_at_k,
    rho,
    shannon_entropy_at_k,
)
from advrec.mf import ModelParams, init_params

from oracles import brute_metrics, brute_topk


def _train(pairs, nu, ni):
    u, i = np.array(pairs).T
    return ImplicitDataset.from_pairs(u, i, np.array([f"u{k}" for k in range(nu)], dtype=object),
                                      np.array([f"i{k}" for k in range(ni)], dtype=object))


def test_precision_examples():
    assert precision_at_k({0: [5, 6, 7, 1]}, {0: 1}, 10) == 0.1
    assert precision_at_k({0: [5], 1: [6]}, {0: 1, 1: 2}, 10) == 0.0
    slates = {0: [1], 1: [2], 2: [9], 3: [9]}
    assert precision_at_k(slates, {0: 1, 1: 2, 2: 3, 3: 4}, 10) == pytest.approx(0.05)
    with pytest.raises(DomainError):
        precision_at_k({}, {}, 10)


def test_recall_examples():
    assert recall_at_k({0: [1, 2]}, {0: 2}, 10) == 1.0
    assert recall_at_k({0: [1, 2], 1: [3], 2: [4]}, {0: 2, 1: 9, 2: 9}, 10) == pytest.approx(1 / 3)


def test_ndcg_examples():
    assert ndcg_at_k({0: [1, 2, 3]}, {0: 1}, 10) == 1.0
    assert ndcg_at_k({0: [1, 2, 3]}, {0: 3}, 10) == 0.5
    assert ndcg_at_k({0: [1], 1: [2]}, {0: 1, 1: 5}, 10) == 0.5


def test_efd_examples():
    train = _train([(0, 0), (1, 0), (2, 1), (3, 1)], 4, 3)
    assert efd_at_k({0: [0], 1: [9]}, {0: 0, 1: 1}, train, 10) == pytest.approx(0.05)
    assert efd_at_k({0: [0]}, {0: 0}, train, 10) == pytest.approx(0.1)
    assert efd_at_k({0: [1]}, {0: 0}, train, 10) == 0.0
    cold = efd_at_k({0: [2]}, {0: 2}, train, 10)
    assert cold == pytest.approx(math.log2(4) / 10)


def test_entropy_examples():
    same = {u: list(range(10)) for u in range(5)}
    assert shannon_entropy_at_k(same, 10) == pytest.approx(math.log2(10))
    assert shannon_entropy_at_k({0: [3], 1: [3]}, 1) == 0.0
    assert shannon_entropy_at_k({0: [1, 2], 1: [3, 4]}, 2) == 2.0


def test_coverage_examples():
    assert item_coverage_at_k({0: [0, 1], 1: [1, 2]}, 2) == 3
    assert item_coverage_at_k({0: [1, 2, 3], 1: [1, 2, 3]}, 3) == 3
    assert item_coverage_at_k({}, 10) == 0


def test_rho_examples():
    assert rho(0.2033, 0.1216) == pytest.approx(40.19, abs=0.01)
    assert rho(0.3, 0.3) == 0.0
    assert rho(0.5, 0.0) == 100.0
    with pytest.raises(DomainError):
        rho(0.0, 0.1)


@settings(max_examples=50)
@given(st.floats(0.01, 1), st.floats(0, 1), st.floats(0.001, 1))
def test_rho_monotone(init, after, dec):
    assert rho(init, after - dec) > rho(init, after)


def test_fit_line_examples():
    f = fit_line([(0, 0), (1, 2)])
    assert (f.slope, f.intercept) == (2.0, 0.0)
    xs = np.linspace(-2, 3, 7)
    assert fit_line(list(zip(xs, -3 * xs + 1))).slope == pytest.approx(-3, abs=1e-9)
    assert fit_line([(0, 1), (1, 1), (2, 1)]).slope == 0.0
    with pytest.raises(DomainError):
        fit_line([(1, 0), (1, 2)])


def test_normalized_auc():
    assert normalized_auc([1, 5, 10, 25], [2, 2, 2, 2]) == 2.0
    assert normalized_auc([0, 2], [0, 1]) == 0.5


def test_hand_laid_toy_case():
    # 5 users, 8 items, scores laid out by hand via one-hot embeddings
    pairs = [(0, 0), (1, 1), (2, 2), (3, 3), (4, 4)]
    train = _train(pairs, 5, 8)
    test = {0: 5, 1: 6, 2: 7, 3: 0, 4: 1}
    Q = np.eye(8, dtype=np.float32)
    P = np.zeros((5, 8), dtype=np.float32)
    P[0, [5, 6]] = [2, 1]        # slate 5, 6  -> hit at 1
    P[1, [5, 6]] = [2, 1]        # slate 5, 6  -> hit at 2
    P[2, [1, 2]] = [3, 1]        # slate 1, 0  -> miss (2 excluded)
    P[3, [2, 3]] = [1, 1]        # slate 2, 0  -> hit at 2
    P[4, [7]] = [1]              # slate 7, 0  -> miss
    rep = evaluate(ModelParams(P, Q), train, test, 2)
    assert rep.pr == pytest.approx(3 / 10)
    assert rep.re == pytest.approx(3 / 5)
    assert rep.ndcg == pytest.approx((1 + 2 / math.log2(3)) / 5)
    assert rep.efd == pytest.approx(3 * math.log2(5) / 2 / 5)
    counts = {5: 2, 6: 2, 1: 1, 0: 3, 2: 1, 7: 1}
    assert rep.se == pytest.approx(-sum(c / 10 * math.log2(c / 10) for c in counts.values()))
    assert rep.icov == 6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_oracle_equivalence_and_bounds(seed):
    rng = np.random.default_rng(seed)
    nu, ni, k = int(rng.integers(1, 11)), int(rng.integers(3, 21)), int(rng.integers(1, 8))
    seen, test, pairs = {}, {}, []
    for u in range(nu):
        order = rng.permutation(ni)
        n = int(rng.integers(1, ni - 1))
        seen[u] = set(order[:n].tolist())
        test[u] = int(order[n])
        pairs += [(u, i) for i in seen[u]]
    train = _train(pairs, nu, ni)
    params = ModelParams(rng.integers(-2, 3, (nu, 2)).astype(np.float32),
                         rng.integers(-2, 3, (ni, 2)).astype(np.float32))
    rep = evaluate(params, train, test, k)
    want = brute_metrics(brute_topk(params.P, params.Q, seen, k), test, seen, nu, k)
    for name, v in want.items():
        assert getattr(rep, name) == v
    ulp = 1e-15
    assert 0 <= rep.pr <= 1 / k + ulp and 0 <= rep.re <= 1 + ulp and 0 <= rep.ndcg <= 1 + ulp
    assert rep.efd >= 0 and 0 <= rep.icov <= ni
    if all(len(seen[u]) <= ni - k for u in seen):
        # slot shares form a distribution only when every slate is full
        assert rep.se <= math.log2(max(rep.icov, 1)) + 1e-12
        assert rep.se <= math.log2(nu * k) + 1e-12


@settings(max_examples=40)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=8), st.integers(1, 8))
def test_ndcg_improves_with_rank(ranks, k):
    slates, test = {}, {}
    for u, r in enumerate(ranks):
        slates[u] = list(range(100, 100 + k))
        if r < k:
            slates[u][r] = -1
        test[u] = -1
    base = ndcg_at_k(slates, test, k)
    for u, r in enumerate(ranks):
        if 0 < r < k:
            better = {v: list(s) for v, s in slates.items()}
            better[u][r], better[u][r - 1] = better[u][r - 1], better[u][r]
            assert ndcg_at_k(better, test, k) >= base


def test_entropy_max_when_distinct():
    nu, k = 4, 3
    slates = {u: list(range(u * k, (u + 1) * k)) for u in range(nu)}
    assert shannon_entropy_at_k(slates, k) == pytest.approx(math.log2(nu * k))


def test_random_and_determinism():
    ds = synthetic_dataset(seed=0, num_users=40, num_items=50, num_interactions=400)
    split = leave_one_out_split(ds, "last")
    rnd = evaluate_random(split.train, split.test, 10, seed=3)
    assert 0 <= rnd.ndcg <= 1 and rnd.icov <= ds.num_items
    params = init_params(ds.num_users, ds.num_items, 8, seed=0)
    assert evaluate(params, split.train, split.test).metrics() == evaluate(params, split.train, split.test).metrics()


def test_csv_row_provenance():
    rep = EvalReport(10, 0.1, 1.0, 1.0, 0.0, 0.0, 1, 1, {"model": "bpr_mf", "strategy": "BIM"})
    row = rep.csv_row()
    assert row["model"] == "bpr_mf" and row["rho"] == ""
