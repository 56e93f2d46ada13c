"""Constrained item matching: per-category top-N index and trigger retrieval.

Items are scored from their train-window behavior counts::

    score = 1 * CTR + 10 * CVR + 100 * CPR

with CTR = views / (views + a), CVR = (carts + favorites) / (views + a) and
CPR = purchases / (views + a). The public log has no impressions, so these
are view-normalized proxies; ``a`` damps items seen once or twice.

Index file layout (little-endian)::

    magic   b"CIDX"
    u32     format version
    u32     N
    u32     category count
    per category, ascending id:
        i64 category_id, u32 length, then length x (i64 item_id, f32 score)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .ingest import CART, FAVORITE, PURCHASE, VIEW, Catalog, InteractionLog

WEIGHTS = (1.0, 10.0, 100.0)
INDEX_MAGIC = b"CIDX"
INDEX_VERSION = 1


@dataclass(frozen=True)
class ItemStats:
    item_id: int
    views: int = 0
    carts: int = 0
    favorites: int = 0
    purchases: int = 0


def compute_item_stats(events: InteractionLog) -> dict[int, ItemStats]:
    if len(events) == 0:
        return {}
    items, inv = np.unique(events.item, return_inverse=True)
    counts = np.zeros((len(items), 4), dtype=np.int64)
    np.add.at(counts, (inv.ravel(), events.behavior.astype(np.int64)), 1)
    return {
        int(i): ItemStats(int(i), int(c[VIEW]), int(c[CART]), int(c[FAVORITE]), int(c[PURCHASE]))
        for i, c in zip(items, counts)
    }


def weighted_rate_score(ctr: float, cvr: float, cpr: float) -> float:
    return WEIGHTS[0] * ctr + WEIGHTS[1] * cvr + WEIGHTS[2] * cpr


def posterior_score(stats: ItemStats, smoothing: float = 10.0) -> float:
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    denom = stats.views + smoothing
    if denom == 0:
        return 0.0
    return weighted_rate_score(
        stats.views / denom, (stats.carts + stats.favorites) / denom, stats.purchases / denom
    )


@dataclass
class CategoryIndex:
    """category id -> (item ids, float32 scores), best first."""

    n: int
    lists: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def items(self, category: int) -> np.ndarray:
        entry = self.lists.get(category)
        return entry[0] if entry is not None else np.empty(0, dtype=np.int64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CategoryIndex) or self.n != other.n:
            return False
        if sorted(self.lists) != sorted(other.lists):
            return False
        return all(
            np.array_equal(a[0], b[0]) and a[1].tobytes() == b[1].tobytes()
            for a, b in ((self.lists[c], other.lists[c]) for c in self.lists)
        )


def top_n_items(item_ids: np.ndarray, scores: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-n by (score desc, item id asc); scores are compared as float32."""
    s32 = np.asarray(scores, dtype=np.float32)
    ids = np.asarray(item_ids, dtype=np.int64)
    if len(ids) > n:
        # partial selection, then a full ordering of the survivors
        kth = np.partition(-s32, n - 1)[n - 1]
        keep = np.flatnonzero(-s32 <= kth)
        ids, s32 = ids[keep], s32[keep]
    order = np.lexsort((ids, -s32))[:n]
    return ids[order], s32[order]


def build_index(scores: Mapping[int, float], catalog: Catalog, n: int = 300) -> CategoryIndex:
    """Top-``n`` items of every category. Items without a score count as 0."""
    if n < 1:
        raise ValueError("N must be >= 1")
    index = CategoryIndex(n)
    for cat, items in catalog.items_by_category.items():
        s = np.array([scores.get(int(i), 0.0) for i in items], dtype=np.float64)
        index.lists[int(cat)] = top_n_items(items, s, n)
    return index


def save_index(index: CategoryIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<III", INDEX_VERSION, index.n, len(index.lists)))
        rec = np.dtype([("item", "<i8"), ("score", "<f4")])
        for cat in sorted(index.lists):
            ids, sc = index.lists[cat]
            fh.write(struct.pack("<qI", cat, len(ids)))
            arr = np.empty(len(ids), dtype=rec)
            arr["item"], arr["score"] = ids, sc
            fh.write(arr.tobytes())


def load_index(path) -> CategoryIndex:
    raw = Path(path).read_bytes()
    if raw[:4] != INDEX_MAGIC or len(raw) < 16:
        raise DataError(f"{path}: not an index file", code="bad-index")
    version, n, count = struct.unpack_from("<III", raw, 4)
    if version != INDEX_VERSION:
        raise DataError(f"{path}: index version {version}", code="index-version")
    rec = np.dtype([("item", "<i8"), ("score", "<f4")])
    off = 16
    index = CategoryIndex(n)
    try:
        for _ in range(count):
            cat, length = struct.unpack_from("<qI", raw, off)
            off += 12
            arr = np.frombuffer(raw, dtype=rec, count=length, offset=off)
            off += length * rec.itemsize
            index.lists[cat] = (arr["item"].astype(np.int64), arr["score"].astype(np.float32))
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated index", code="bad-index") from exc
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes in index", code="bad-index")
    return index


@dataclass(frozen=True)
class RecommendedItem:
    item_id: int
    category_id: int
    score: float
    category_rank: int  # 1-based position of the trigger category


@dataclass
class Recommendation:
    user_id: int
    k: int
    items: list[RecommendedItem]

    @property
    def item_ids(self) -> list[int]:
        return [r.item_id for r in self.items]

    @property
    def categories(self) -> list[int]:
        return [r.category_id for r in self.items]


def retrieve_items(ranked_categories: Sequence[int], k: int, index: CategoryIndex, m: int,
                   user_id: int = -1) -> Recommendation:
    """Round-robin over the top-``k`` trigger categories, best items first.

    Each round takes the next-best unused item of every trigger in rank
    order. Triggers with empty lists are skipped without promoting rank k+1.
    """
    if k < 1 or m < 1:
        raise ValueError("K and M must be >= 1")
    triggers = [int(c) for c in list(ranked_categories)[:k]]
    pools = [(rank, c, index.lists[c]) for rank, c in enumerate(triggers, start=1)
             if c in index.lists and len(index.lists[c][0])]
    out: list[RecommendedItem] = []
    seen: set[int] = set()
    cursors = [0] * len(pools)
    while len(out) < m:
        progressed = False
        for j, (rank, cat, (ids, scores)) in enumerate(pools):
            if len(out) >= m:
                break
            while cursors[j] < len(ids) and int(ids[cursors[j]]) in seen:
                cursors[j] += 1
            if cursors[j] >= len(ids):
                continue
            item = int(ids[cursors[j]])
            out.append(RecommendedItem(item, cat, float(scores[cursors[j]]), rank))
            seen.add(item)
            cursors[j] += 1
            progressed = True
        if not progressed:
            break
    return Recommendation(user_id, k, out)


def recommend_pipeline(context, params, index: CategoryIndex, k: int, m: int,
                       tower: np.ndarray | None = None) -> Recommendation:
    """Rank categories for the user, keep the top-K, retrieve up to M items."""
    from .evaluate import rank_categories

    ranked = rank_categories(context, params, tower=tower)
    return retrieve_items(ranked.category_ids, k, index, m, user_id=context.user_id)


def write_recommendations(recs: Sequence[Recommendation], path) -> None:
    """Tab-separated: user_id, rank, item_id, category_id, score."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user_id\trank\titem_id\tcategory_id\tscore\n")
        for rec in recs:
            for r, it in enumerate(rec.items, start=1):
                fh.write(f"{rec.user_id}\t{r}\t{it.item_id}\t{it.category_id}\t{it.score:.9g}\n")


def read_recommendations(path) -> dict[int, list[tuple[int, int, float]]]:
    """user -> [(item_id, category_id, score)] in rank order."""
    out: dict[int, list] = {}
    with open(path, encoding="utf-8") as fh:
        next(fh, None)
        for line in fh:
            u, _, i, c, s = line.rstrip("\n").split("\t")
            out.setdefault(int(u), []).append((int(i), int(c), float(s)))
    return out
