import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catdiv.errors import DataError
from catdiv.ingest import (
    Catalog, Interaction, InteractionLog, ParseReport, SplitSpec, assign_split,
    build_histories, parse_log, split_by_day,
)


def write(tmp_path, text, name="log.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_row_maps_to_interaction(tmp_path):
    log, _ = parse_log(write(tmp_path, "1,100,7,pv,1511544070\n"))
    assert list(log) == [Interaction(1, 100, 7, "view", 1511544070)]


def test_behavior_names_map(tmp_path):
    text = "1,1,1,pv,1\n1,2,1,cart,2\n1,3,1,fav,3\n1,4,1,buy,4\n"
    log, _ = parse_log(write(tmp_path, text))
    assert [r.behavior for r in log] == ["view", "cart", "favorite", "purchase"]


def test_unknown_behavior_is_skipped_and_counted(tmp_path):
    rep = ParseReport()
    log, _ = parse_log(write(tmp_path, "1,100,7,xyz,1511544070\n1,100,7,pv,1\n"), report=rep)
    assert len(log) == 1
    assert rep.malformed == 1


def test_header_and_short_rows(tmp_path):
    rep = ParseReport()
    text = "user_id,item_id,category_id,behavior,timestamp\n1,2,3,pv,4\n1,2,3\n5,6,7,buy,8\n"
    log, _ = parse_log(write(tmp_path, text), report=rep)
    assert len(log) == 2
    assert rep.malformed == 1


def test_majority_category_from_six_row_fixture(tmp_path):
    rows = [(1, 100, 7), (2, 100, 9), (3, 100, 7), (1, 101, 9), (2, 102, 4), (3, 102, 4)]
    text = "".join(f"{u},{i},{c},pv,{k + 1}\n" for k, (u, i, c) in enumerate(rows))
    rep = ParseReport()
    log, catalog = parse_log(write(tmp_path, text), report=rep)
    # oracle: brute-force frequency count per item
    freq = {}
    for _, i, c in rows:
        freq.setdefault(i, {}).setdefault(c, 0)
        freq[i][c] += 1
    oracle = {i: max(sorted(cs), key=lambda c: cs[c]) for i, cs in freq.items()}
    assert catalog.item_to_category == oracle
    assert catalog.item_to_category[100] == 7
    assert rep.category_conflicts == 1
    # log categories are rewritten through the catalog
    assert set(log.category[log.item == 100].tolist()) == {7}


def test_majority_tie_prefers_smaller_category():
    catalog, conflicts = Catalog.from_observations(np.array([5, 5]), np.array([9, 3]))
    assert catalog.item_to_category == {5: 3}
    assert conflicts == 1


def test_mostly_malformed_file_is_fatal(tmp_path):
    with pytest.raises(DataError) as e:
        parse_log(write(tmp_path, "a,b\nc,d\n1,2,3,pv,4\n"))
    assert e.value.code == "malformed-log"


def test_missing_and_empty_files(tmp_path):
    with pytest.raises(DataError) as e:
        parse_log(tmp_path / "nope.csv")
    assert e.value.code == "unreadable-log"
    with pytest.raises(DataError) as e:
        parse_log(write(tmp_path, ""))
    assert e.value.code == "empty-log"


def test_max_users_keeps_most_active(tmp_path):
    rows = [(1, 1)] * 3 + [(2, 2)] * 5 + [(3, 3)] * 3 + [(4, 4)]
    text = "".join(f"{u},{i},1,pv,{k + 1}\n" for k, (u, i) in enumerate(rows))
    rep = ParseReport()
    log, catalog = parse_log(write(tmp_path, text), max_users=2, report=rep)
    # user 2 (5 rows), then the tie 1 vs 3 goes to the smaller id
    assert sorted(set(log.user.tolist())) == [1, 2]
    assert rep.users_dropped == 2
    assert set(catalog.items.tolist()) == {1, 2}


def test_max_rows(tmp_path):
    text = "".join(f"1,{k},1,pv,{k + 1}\n" for k in range(10))
    log, _ = parse_log(write(tmp_path, text), max_rows=4)
    assert log.item.tolist() == [0, 1, 2, 3]


def test_parse_is_deterministic_and_closed(tmp_path):
    rng = random.Random(3)
    text = "".join(
        f"{rng.randrange(5)},{rng.randrange(30)},{rng.randrange(6)},{rng.choice(['pv', 'buy'])},{rng.randrange(1, 100)}\n"
        for _ in range(200)
    )
    p = write(tmp_path, text)
    a, ca = parse_log(p)
    b, cb = parse_log(p)
    for col in ("user", "item", "category", "behavior", "timestamp"):
        assert np.array_equal(getattr(a, col), getattr(b, col))
    assert np.array_equal(ca.items, cb.items) and np.array_equal(ca.categories, cb.categories)
    assert set(a.category.tolist()) <= set(ca.categories.tolist())


def test_category_of_unknown_item():
    cat = Catalog(np.array([1, 2]), np.array([5, 6]))
    assert cat.category_of(2) == 6
    assert cat.category_of(np.array([2, 1])).tolist() == [6, 5]
    with pytest.raises(KeyError):
        cat.category_of(np.array([3]))


# -- histories -----------------------------------------------------------------

def test_history_sorted_by_time():
    log = InteractionLog.from_records([(1, 10, 1, 0, 5), (1, 11, 1, 0, 3), (1, 12, 1, 0, 9)])
    h = build_histories(log)[1]
    assert h.timestamps.tolist() == [3, 5, 9]
    assert h.items.tolist() == [11, 10, 12]


def test_interleaved_users():
    log = InteractionLog.from_records(
        [(2, 1, 1, 0, 4), (1, 2, 1, 0, 2), (2, 3, 1, 0, 1), (1, 4, 1, 0, 1)]
    )
    hs = build_histories(log)
    assert hs[1].items.tolist() == [4, 2]
    assert hs[2].items.tolist() == [3, 1]


def test_twenty_shuffled_events_match_stable_sort():
    rng = random.Random(11)
    rows = [(rng.randrange(3), k, 1, 0, rng.randrange(6)) for k in range(20)]
    hs = build_histories(InteractionLog.from_records(rows))
    for u in {r[0] for r in rows}:
        oracle = [r[1] for _, r in sorted(((r[4], idx), r) for idx, r in enumerate(rows) if r[0] == u)]
        assert hs[u].items.tolist() == oracle


# -- splits --------------------------------------------------------------------

SPEC = SplitSpec(100, 200, 300)


def test_split_boundaries():
    assert assign_split(np.array([99, 100, 199, 200, 299, 300]), SPEC).tolist() == [0, 1, 1, 2, 2, -1]


def test_empty_train_is_fatal():
    log = InteractionLog.from_records([(1, 1, 1, 0, 250), (1, 2, 1, 0, 260)])
    with pytest.raises(DataError) as e:
        split_by_day(build_histories(log), SPEC)
    assert e.value.code == "empty-train"


def test_ten_event_fixture_matches_interval_check():
    ts = [5, 99, 100, 150, 199, 200, 250, 299, 300, 400]
    log = InteractionLog.from_records([(1, k, 1, 0, t) for k, t in enumerate(ts)])
    splits = split_by_day(build_histories(log), SPEC)

    def oracle(t):
        if t < 100:
            return "train"
        if t < 200:
            return "valid"
        if t < 300:
            return "test"
        return None

    for name in ("train", "valid", "test"):
        assert splits[name][1].timestamps.tolist() == [t for t in ts if oracle(t) == name]
    assert splits.dropped[1] == 2


def test_bad_spec():
    with pytest.raises(ValueError):
        SplitSpec(5, 5, 6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 400)), min_size=1, max_size=60))
def test_split_partitions_events(rows):
    rows = [(u, 1, 1, 0, t) for u, t in rows] + [(99, 1, 1, 0, 0)]  # train never empty
    log = InteractionLog.from_records(rows)
    hs = build_histories(log)
    splits = split_by_day(hs, SPEC)
    for u, h in hs.items():
        total = sum(len(splits[n].get(u, ())) for n in ("train", "valid", "test"))
        assert total + splits.dropped[u] == len(h)
