"""Deterministic synthetic logs for tests and demos."""

from __future__ import annotations

import csv

import numpy as np

from .ingest import BEHAVIORS, InteractionLog, SplitSpec

DAY = 86400
# 2017-11-25 00:00 in UTC+8, the first day of the public log
TAOBAO_START = 1511539200
_BEHAVIOR_NAMES = ("pv", "cart", "fav", "buy")


def cyclic_log(n_users: int = 500, n_events: int = 50, n_categories: int = 10,
               items_per_category: int = 5, seed: int = 0,
               base: int = TAOBAO_START) -> tuple[InteractionLog, SplitSpec]:
    """Every user walks categories c, c+1, c+2, ... (mod n_categories).

    The start category and the item picked inside each category are random.
    The last event of each user falls on the test day, the one before on the
    validation day, the rest on day 0.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for u in range(n_users):
        c = int(rng.integers(n_categories))
        for k in range(n_events):
            item = c * items_per_category + int(rng.integers(items_per_category))
            if k < n_events - 2:
                t = base + 60 * (k + 1)
            else:
                t = base + DAY * (k - n_events + 3) + 60
            rows.append((u, item, c, 0, t))
            c = (c + 1) % n_categories
    spec = SplitSpec(base + DAY, base + 2 * DAY, base + 3 * DAY)
    return InteractionLog.from_records(rows), spec


def topical_log(n_users: int = 1000, n_topics: int = 12, categories_per_topic: int = 6,
                items_per_category: int = 25, min_events: int = 20, max_events: int = 60,
                seed: int = 7) -> InteractionLog:
    """Taobao-shaped log with topical structure over nine days.

    Each user favors two topics; consecutive events mostly stay inside the
    current topic, so categories a user has not touched yet are still
    predictable from the ones they have.
    """
    rng = np.random.default_rng(seed)
    n_cat = n_topics * categories_per_topic
    cat_ids = 1000 + 7 * np.arange(n_cat)
    popularity = 1.0 / np.arange(1, items_per_category + 1) ** 1.1
    popularity /= popularity.sum()
    rows = []
    for u in range(n_users):
        user_id = 10 + 3 * u
        topics = rng.choice(n_topics, size=2, replace=False)
        n = int(rng.integers(min_events, max_events + 1))
        times = np.sort(rng.integers(TAOBAO_START, TAOBAO_START + 9 * DAY, size=n))
        topic = topics[0]
        for t in times.tolist():
            if rng.random() < 0.2:
                topic = topics[int(rng.integers(2))] if rng.random() < 0.85 else int(rng.integers(n_topics))
            c = topic * categories_per_topic + int(rng.integers(categories_per_topic))
            item = int(cat_ids[c]) * 100 + int(rng.choice(items_per_category, p=popularity))
            b = int(rng.choice(4, p=[0.88, 0.05, 0.03, 0.04]))
            rows.append((user_id, item, int(cat_ids[c]), b, int(t)))
    return InteractionLog.from_records(rows)


def taobao_split(start: int = TAOBAO_START, days: int = 9) -> SplitSpec:
    """Last day is test, the one before it validation, the rest train."""
    end = start + days * DAY
    return SplitSpec(end - 2 * DAY, end - DAY, end)


def write_csv(log: InteractionLog, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for r in log:
            w.writerow([r.user_id, r.item_id, r.category_id,
                        _BEHAVIOR_NAMES[BEHAVIORS.index(r.behavior)], r.timestamp])
