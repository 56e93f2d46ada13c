import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catdiv.errors import DataError
from catdiv.ingest import Catalog, InteractionLog
from catdiv.itemmatch import (
    CategoryIndex, ItemStats, build_index, compute_item_stats, load_index, posterior_score,
    read_recommendations, recommend_pipeline, retrieve_items, save_index, top_n_items,
    weighted_rate_score, write_recommendations,
)
from catdiv.model import category_tower
from catdiv.evaluate import rank_categories
from catdiv.samples import UserContext
from conftest import TINY, random_params


def index_of(lists, n=300):
    return CategoryIndex(n, {c: (np.array(ids, dtype=np.int64),
                                 np.linspace(1, 0, len(ids)).astype(np.float32)) for c, ids in lists.items()})


# -- stats and scores ----------------------------------------------------------------

def test_item_counts():
    log = InteractionLog.from_records([(1, 5, 1, "pv", 1)] * 3 + [(2, 5, 1, "buy", 2), (2, 6, 1, "cart", 3)])
    stats = compute_item_stats(log)
    assert stats[5] == ItemStats(5, views=3, purchases=1)
    assert stats[6].carts == 1
    assert 7 not in stats


def test_stats_group_by_oracle():
    rng = random.Random(1)
    rows = [(rng.randrange(5), rng.randrange(12), 0, rng.randrange(4), k + 1) for k in range(300)]
    stats = compute_item_stats(InteractionLog.from_records(rows))
    for item in {r[1] for r in rows}:
        c = [sum(1 for r in rows if r[1] == item and r[3] == b) for b in range(4)]
        assert stats[item] == ItemStats(item, *c)


def test_zero_counts_score_zero():
    assert posterior_score(ItemStats(1)) == 0.0
    assert posterior_score(ItemStats(1), smoothing=0.0) == 0.0


def test_injected_rates():
    assert weighted_rate_score(0.1, 0.01, 0.001) == pytest.approx(0.3, abs=1e-15)


def test_five_item_exact_oracle():
    items = [ItemStats(1, 3, 0, 0, 1), ItemStats(2, 0, 2, 1, 0), ItemStats(3, 1000, 40, 7, 12),
             ItemStats(4, 1, 0, 0, 0), ItemStats(5, 17, 3, 0, 2)]
    a = Fraction(10)
    for s in items:
        d = s.views + a
        exact = Fraction(s.views) / d + 10 * Fraction(s.carts + s.favorites) / d + 100 * Fraction(s.purchases) / d
        assert posterior_score(s, 10.0) == pytest.approx(float(exact), rel=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**9), st.integers(0, 10**9), st.integers(0, 10**9), st.integers(0, 10**9),
       st.floats(0, 1e6))
def test_scores_nonnegative_and_finite(v, c, f, p, a):
    s = posterior_score(ItemStats(1, v, c, f, p), a)
    assert s >= 0 and np.isfinite(s)


# -- index ---------------------------------------------------------------------------

def test_two_item_category_keeps_both():
    catalog = Catalog(np.array([1, 2]), np.array([0, 0]))
    idx = build_index({1: 0.2, 2: 0.9}, catalog, n=300)
    assert idx.items(0).tolist() == [2, 1]


def test_equal_scores_prefer_smaller_item():
    catalog = Catalog(np.array([9, 3, 5]), np.array([0, 0, 0]))
    idx = build_index({9: 1.0, 3: 1.0, 5: 1.0}, catalog, n=2)
    assert idx.items(0).tolist() == [3, 5]


def test_unscored_items_count_as_zero():
    catalog = Catalog(np.array([1, 2, 3]), np.array([0, 0, 1]))
    idx = build_index({2: 0.5}, catalog, n=5)
    assert idx.items(0).tolist() == [2, 1] and idx.items(1).tolist() == [3]
    assert idx.items(42).tolist() == []


def test_thousand_items_top_ten_matches_sort():
    rng = np.random.default_rng(2)
    ids = rng.permutation(5000)[:1000]
    scores = np.round(rng.random(1000), 2)  # plenty of ties
    catalog = Catalog(ids, np.zeros(1000, dtype=int))
    idx = build_index(dict(zip(ids.tolist(), scores.tolist())), catalog, n=10)
    oracle = sorted(zip(ids.tolist(), scores.tolist()), key=lambda x: (-np.float32(x[1]), x[0]))[:10]
    assert idx.items(0).tolist() == [i for i, _ in oracle]


def test_top_n_handles_short_lists():
    ids, sc = top_n_items(np.array([4, 2]), np.array([0.1, 0.3]), 10)
    assert ids.tolist() == [2, 4] and sc.dtype == np.float32


def test_index_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    items = np.arange(500)
    catalog = Catalog(items, rng.integers(0, 7, 500))
    idx = build_index(dict(zip(items.tolist(), rng.random(500).tolist())), catalog, n=30)
    save_index(idx, tmp_path / "a.idx")
    back = load_index(tmp_path / "a.idx")
    assert back == idx
    save_index(back, tmp_path / "b.idx")
    assert (tmp_path / "a.idx").read_bytes() == (tmp_path / "b.idx").read_bytes()


def test_bad_index_files(tmp_path):
    p = tmp_path / "x.idx"
    p.write_bytes(b"nope")
    with pytest.raises(DataError):
        load_index(p)
    save_index(index_of({1: [5, 6]}), p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(DataError):
        load_index(p)


# -- retrieval -----------------------------------------------------------------------

def test_single_trigger_gives_prefix():
    idx = index_of({1: [10, 11, 12, 13], 2: [20]})
    assert retrieve_items([1, 2], 1, idx, 3).item_ids == [10, 11, 12]


def test_round_robin_two_triggers():
    idx = index_of({1: [1, 2], 2: [3]})  # a1=1, a2=2, b1=3
    rec = retrieve_items([1, 2], 2, idx, 3)
    assert rec.item_ids == [1, 3, 2]
    assert [r.category_rank for r in rec.items] == [1, 2, 1]


def merge_oracle(ranked, k, lists, m):
    queues = [list(lists.get(c, [])) for c in ranked[:k]]
    out = []
    while len(out) < m and any(queues):
        for q in queues:
            while q and q[0] in out:
                q.pop(0)
            if q and len(out) < m:
                out.append(q.pop(0))
    return out


def test_five_trigger_merge_matches_simulation():
    rng = random.Random(6)
    lists = {c: rng.sample(range(100), rng.randrange(0, 12)) for c in range(8)}
    idx = index_of(lists)
    ranked = rng.sample(range(8), 8)
    for m in (1, 7, 23, 60):
        assert retrieve_items(ranked, 5, idx, m).item_ids == merge_oracle(ranked, 5, lists, m)


def test_empty_trigger_lists_are_skipped():
    idx = index_of({1: [], 2: [5, 6], 3: [7]})
    rec = retrieve_items([1, 2, 3], 2, idx, 10)
    assert rec.item_ids == [5, 6]  # rank 3 is not promoted


def pipeline_setup(seed=0):
    p = random_params(TINY, seed=seed)
    rng = np.random.default_rng(seed)
    items = np.arange(1000, 1200)
    catalog = Catalog(items, rng.integers(0, 8, len(items)))
    idx = build_index(dict(zip(items.tolist(), rng.random(len(items)).tolist())), catalog, n=15)
    ctx = UserContext(3, np.array([100, 104, 107]), np.array([1, 1, 4]), {1: 2, 4: 1})
    return p, idx, ctx


def test_full_k_and_large_m_give_union():
    p, idx, ctx = pipeline_setup()
    rec = recommend_pipeline(ctx, p, idx, k=8, m=10**6)
    assert set(rec.item_ids) == set(np.concatenate([v[0] for v in idx.lists.values()]).tolist())
    assert len(rec.item_ids) == len(set(rec.item_ids))


@pytest.mark.parametrize("seed", range(5))
def test_pipeline_constraints_and_nesting(seed):
    p, idx, ctx = pipeline_setup(seed)
    ranked = rank_categories(ctx, p).category_ids.tolist()
    prev = set()
    for k in range(1, 9):
        rec = recommend_pipeline(ctx, p, idx, k=k, m=10**6, tower=category_tower(p))
        assert set(rec.categories) <= set(ranked[:k])
        assert prev <= set(rec.item_ids)
        prev = set(rec.item_ids)
        # with a finite budget the exposed categories grow with K
        assert len(set(recommend_pipeline(ctx, p, idx, k=k, m=50).categories)) == min(k, 8)


def test_recommendation_file_round_trip(tmp_path):
    p, idx, ctx = pipeline_setup()
    recs = [recommend_pipeline(ctx, p, idx, k=3, m=7)]
    write_recommendations(recs, tmp_path / "r.tsv")
    back = read_recommendations(tmp_path / "r.tsv")
    assert [i for i, _, _ in back[3]] == recs[0].item_ids
    assert [c for _, c, _ in back[3]] == recs[0].categories
    assert all(np.float32(s) == np.float32(r.score) for (_, _, s), r in zip(back[3], recs[0].items))
