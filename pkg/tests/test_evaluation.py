import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dolg.errors import DataError, InvalidInputError, ShapeError
from dolg.evaluation import (
    QueryTruth, RetrievalGroundTruth, average_precision, evaluate, precision_at, rank,
)
from dolg.extraction import DescriptorStore


def _oracle_ap(ranked, positives, junk):
    """Definition-level AP: for each positive (in rank order) take its rank among
    non-junk items and the number of positives at or above it."""
    total = 0.0
    for idx, image_id in enumerate(ranked):
        if image_id not in positives:
            continue
        r = sum(1 for i in ranked[:idx + 1] if i not in junk)
        hits = sum(1 for i in ranked[:idx + 1] if i in positives)
        total += hits / r
    return total / len(positives)


def _exact_ap(ranked, positives, junk):
    kept = [i for i in ranked if i not in junk]
    total = Fraction(0)
    for k, image_id in enumerate(kept, 1):
        if image_id in positives:
            total += Fraction(sum(i in positives for i in kept[:k]), k)
    return total / len(positives)


def _instance(rng):
    n = int(rng.integers(1, 21))
    ranked = [f"i{j}" for j in rng.permutation(n)]
    labels = rng.integers(0, 3, size=n)
    pos = {f"i{j}" for j in range(n) if labels[j] == 0}
    junk = {f"i{j}" for j in range(n) if labels[j] == 1}
    return ranked, pos, junk


def _angles_store(ids, angles):
    v = np.stack([np.cos(angles), np.sin(angles)], axis=1).astype(np.float32)
    return DescriptorStore(ids, v)


def test_rank_examples():
    store = _angles_store(["a", "b", "c"], np.array([0.5, 0.1, 1.0]))
    assert rank([1.0, 0.0], store) == ["b", "a", "c"]
    tied = DescriptorStore(["z", "m", "a"], np.tile([[1.0, 0.0]], (3, 1)))
    assert rank([1.0, 0.0], tied) == ["a", "m", "z"]


def test_rank_matches_sorted_oracle(rng):
    v = rng.normal(size=(1000, 32))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    v[10] = v[20]  # a genuine tie
    ids = [f"d{rng.integers(1_000_000):07d}_{i}" for i in range(1000)]
    store = DescriptorStore(ids, v.astype(np.float32))
    q = store.vectors[20].astype(np.float64)
    sims = store.vectors.astype(np.float64) @ q
    oracle = [ids[i] for i in sorted(range(1000), key=lambda i: (-sims[i], ids[i]))]
    assert rank(q, store) == oracle


def test_rank_is_permutation_invariant(rng):
    v = rng.normal(size=(50, 8))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    ids = [f"x{i}" for i in range(50)]
    perm = rng.permutation(50)
    a = DescriptorStore(ids, v.astype(np.float32))
    b = DescriptorStore([ids[i] for i in perm], v[perm].astype(np.float32))
    q = v[3]
    assert rank(q, a) == rank(q, b)


def test_rank_errors():
    store = DescriptorStore(["a"], np.array([[1.0, 0.0]], np.float32))
    with pytest.raises(ShapeError, match="dim 3.*dim 2"):
        rank([1.0, 0.0, 0.0], store)
    with pytest.raises(InvalidInputError):
        rank([1.0], DescriptorStore([], np.zeros((0, 1))))


def test_ap_examples():
    assert average_precision(["a", "b", "c"], {"a"}) == 1.0
    assert average_precision(["b", "a"], {"a"}) == 0.5
    assert average_precision(["a", "x", "b"], {"a", "b"}) == pytest.approx((1 + 2 / 3) / 2)
    assert average_precision(["j", "a"], {"a"}, {"j"}) == 1.0
    assert average_precision(["a"], {"a", "missing"}) == 0.5
    with pytest.raises(ValueError):
        average_precision(["a"], set())


def test_ap_oracle_500_instances(rng):
    for _ in range(500):
        ranked, pos, junk = _instance(rng)
        if not pos:
            continue
        ap = average_precision(ranked, pos, junk)
        assert ap == _oracle_ap(ranked, pos, junk)
        assert abs(ap - float(_exact_ap(ranked, pos, junk))) <= 1e-15


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from("pnj"), min_size=1, max_size=20), st.randoms(use_true_random=False))
def test_junk_removal_invariance(kinds, rnd):
    ranked = [f"{k}{i}" for i, k in enumerate(kinds)]
    pos = {r for r in ranked if r[0] == "p"}
    junk = {r for r in ranked if r[0] == "j"}
    if not pos:
        return
    stripped = [r for r in ranked if r not in junk]
    assert average_precision(ranked, pos, junk) == average_precision(stripped, pos)
    # moving junk around does not change AP either
    shuffled = list(stripped)
    for j in sorted(junk):
        shuffled.insert(rnd.randint(0, len(shuffled)), j)
    assert average_precision(shuffled, pos, junk) == average_precision(ranked, pos, junk)


def test_ap_perfect_and_reversed():
    ids = [f"i{k}" for k in range(10)]
    assert average_precision(ids, set(ids[:3])) == 1.0
    assert average_precision(ids[::-1], set(ids[:1])) == 0.1


def test_precision_at_divides_by_available():
    assert precision_at(["a", "b", "c"], {"a", "c"}, k=10) == pytest.approx(2 / 3)
    assert precision_at(["j", "a"], {"a"}, {"j"}, k=10) == 1.0
    assert precision_at([f"i{k}" for k in range(20)], {"i0", "i15"}, k=10) == 0.1


def _six():
    store = _angles_store(list("abcdef"), np.linspace(0.1, 0.6, 6))
    query = DescriptorStore(["q"], np.array([[1.0, 0.0]], np.float32))
    gt = RetrievalGroundTruth([QueryTruth("q", easy=["a", "c"], hard=["e"], junk=["b"])], list("abcdef"))
    return gt, store, query


def test_hand_computed_instance():
    gt, store, query = _six()
    assert rank([1.0, 0.0], store) == list("abcdef")
    rep = evaluate(gt, store, query)
    # medium: filtered a c d e f -> (1/1 + 2/2 + 3/4) / 3
    assert rep.map_medium == pytest.approx(11 / 12)
    # hard: filtered d e f -> 1/2
    assert rep.map_hard == pytest.approx(0.5)
    assert rep.map_easy == pytest.approx(1.0)
    assert rep.mp10_medium == pytest.approx(3 / 5)
    assert rep.mp10_hard == pytest.approx(1 / 3)
    assert rep.mp10_easy == pytest.approx(2 / 4)
    keys = list(rep.to_dict())
    assert keys[:4] == ["map_medium", "map_hard", "mp10_medium", "mp10_hard"]


def test_query_without_hard_is_excluded_from_hard_mean():
    store = _angles_store(list("abc"), np.array([0.1, 0.2, 0.3]))
    query = DescriptorStore(["q1", "q2"], np.array([[1.0, 0.0], [0.0, 1.0]], np.float32))
    gt = RetrievalGroundTruth([QueryTruth("q1", easy=["a"], hard=["b"]), QueryTruth("q2", easy=["a"])],
                              list("abc"))
    rep = evaluate(gt, store, query)
    assert rep.excluded["hard"] == ["q2"]
    assert rep.map_hard == rep.per_query[0]["ap_hard"]
    aps = [row["ap_medium"] for row in rep.per_query]
    assert rep.map_medium == pytest.approx(np.mean(aps), abs=0)


def test_evaluate_errors():
    gt, store, query = _six()
    with pytest.raises(ShapeError):
        evaluate(gt, store, DescriptorStore(["q"], np.array([[1.0, 0.0, 0.0]], np.float32)))
    with pytest.raises(DataError, match="'q'"):
        evaluate(gt, store, DescriptorStore(["other"], np.array([[1.0, 0.0]], np.float32)))
    partial = DescriptorStore(list("abcde"), store.vectors[:5])
    with pytest.raises(DataError, match="'f'"):
        evaluate(gt, partial, query)


def test_ground_truth_validation(tmp_path):
    with pytest.raises(DataError, match="overlap"):
        RetrievalGroundTruth([QueryTruth("q", easy=["a"], junk=["a"])], ["a"])
    with pytest.raises(DataError, match="'zz'"):
        RetrievalGroundTruth([QueryTruth("q", easy=["zz"])], ["a"])
    path = tmp_path / "gt.json"
    path.write_text(json.dumps({"queries": [{"easy": []}], "database": []}))
    with pytest.raises(DataError):
        RetrievalGroundTruth.load(path)


def test_toy_ground_truth_loads(toy_paths):
    gt = RetrievalGroundTruth.load(toy_paths["gt"])
    assert len(gt.queries) == 16 and len(gt.database) == 96
    assert gt.crops()["q00"] == [8, 8, 48, 48]
