"""Interaction log parsing, per-user histories and day-based splits.

The input is the 5-column UserBehavior CSV::

    user_id,item_id,category_id,behavior,timestamp

with ``behavior`` one of ``pv``, ``cart``, ``fav``, ``buy``. A header line is
tolerated. Interactions are held column-wise in numpy arrays; the
:class:`Interaction` record is only materialized when iterating.
"""

from __future__ import annotations

import csv
import logging
import sys
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

BEHAVIORS = ("view", "cart", "favorite", "purchase")
VIEW, CART, FAVORITE, PURCHASE = range(4)
_BEHAVIOR_CODES = {"pv": VIEW, "cart": CART, "fav": FAVORITE, "buy": PURCHASE}
_HEADER_FIRST = {"user_id", "userid", "user"}

# more malformed rows than this fraction means we were handed the wrong file
MAX_MALFORMED_FRACTION = 0.5


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    category_id: int
    behavior: str
    timestamp: int


@dataclass
class InteractionLog:
    """Column-oriented interaction table, rows in input order."""

    user: np.ndarray
    item: np.ndarray
    category: np.ndarray
    behavior: np.ndarray  # int8 codes into BEHAVIORS
    timestamp: np.ndarray

    def __len__(self) -> int:
        return len(self.user)

    def __getitem__(self, i: int) -> Interaction:
        return Interaction(
            int(self.user[i]),
            int(self.item[i]),
            int(self.category[i]),
            BEHAVIORS[self.behavior[i]],
            int(self.timestamp[i]),
        )

    def __iter__(self) -> Iterator[Interaction]:
        for i in range(len(self)):
            yield self[i]

    def take(self, index) -> "InteractionLog":
        return InteractionLog(
            self.user[index],
            self.item[index],
            self.category[index],
            self.behavior[index],
            self.timestamp[index],
        )

    @classmethod
    def from_records(cls, records) -> "InteractionLog":
        """Build from ``Interaction`` objects or 5-tuples (behavior as name or code)."""
        rows = list(records)
        cols = [[], [], [], [], []]
        for r in rows:
            if isinstance(r, Interaction):
                r = (r.user_id, r.item_id, r.category_id, r.behavior, r.timestamp)
            u, i, c, b, t = r
            if isinstance(b, str):
                b = BEHAVIORS.index(b) if b in BEHAVIORS else _BEHAVIOR_CODES[b]
            for col, v in zip(cols, (u, i, c, b, t)):
                col.append(v)
        return cls(
            np.asarray(cols[0], dtype=np.int64),
            np.asarray(cols[1], dtype=np.int64),
            np.asarray(cols[2], dtype=np.int64),
            np.asarray(cols[3], dtype=np.int8),
            np.asarray(cols[4], dtype=np.int64),
        )


class Catalog:
    """The item -> category function plus its inverse image."""

    def __init__(self, items: np.ndarray, item_categories: np.ndarray):
        order = np.argsort(items, kind="stable")
        self.items = np.asarray(items, dtype=np.int64)[order]
        self._item_cat = np.asarray(item_categories, dtype=np.int64)[order]
        if len(self.items) > 1 and np.any(self.items[1:] == self.items[:-1]):
            raise ValueError("duplicate item ids in catalog")
        self.categories = np.unique(self._item_cat)
        self._items_by_category: dict[int, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.items)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def item_to_category(self) -> dict[int, int]:
        return dict(zip(self.items.tolist(), self._item_cat.tolist()))

    @property
    def items_by_category(self) -> dict[int, np.ndarray]:
        if self._items_by_category is None:
            order = np.lexsort((self.items, self._item_cat))
            cats = self._item_cat[order]
            bounds = np.flatnonzero(np.diff(cats)) + 1
            groups = np.split(self.items[order], bounds)
            self._items_by_category = {
                int(c): g for c, g in zip(self.categories, groups)
            }
        return self._items_by_category

    def category_of(self, item_ids):
        """Vectorized C(item). Unknown items raise ``KeyError``."""
        ids = np.asarray(item_ids, dtype=np.int64)
        pos = np.searchsorted(self.items, ids)
        pos_c = np.minimum(pos, len(self.items) - 1)
        if len(self.items) == 0 or np.any(self.items[pos_c] != ids):
            raise KeyError("item id not in catalog")
        out = self._item_cat[pos_c]
        return int(out) if out.ndim == 0 else out

    def category_rows(self, category_ids) -> np.ndarray:
        ids = np.asarray(category_ids, dtype=np.int64)
        pos = np.searchsorted(self.categories, ids)
        pos_c = np.minimum(pos, len(self.categories) - 1)
        if np.any(self.categories[pos_c] != ids):
            raise KeyError("category id not in catalog")
        return pos_c

    @classmethod
    def from_observations(cls, items, categories) -> tuple["Catalog", int]:
        """Majority-vote catalog from observed (item, category) rows.

        Returns the catalog and the number of items that were seen with more
        than one category. Ties go to the smallest category id.
        """
        items = np.asarray(items, dtype=np.int64)
        categories = np.asarray(categories, dtype=np.int64)
        if len(items) == 0:
            return cls(items, categories), 0
        pairs, counts = np.unique(
            np.stack([items, categories], axis=1), axis=0, return_counts=True
        )
        # per item: highest count first, then smallest category
        order = np.lexsort((pairs[:, 1], -counts, pairs[:, 0]))
        pairs = pairs[order]
        first = np.ones(len(pairs), dtype=bool)
        first[1:] = pairs[1:, 0] != pairs[:-1, 0]
        conflicts = int(np.count_nonzero(np.bincount(np.cumsum(first) - 1) > 1))
        return cls(pairs[first, 0], pairs[first, 1]), conflicts


@dataclass
class ParseReport:
    rows: int = 0
    kept: int = 0
    malformed: int = 0
    category_conflicts: int = 0
    users_dropped: int = 0

    def write(self, stream=None) -> None:
        stream = stream or sys.stderr
        print(
            f"rows={self.rows} kept={self.kept} malformed={self.malformed} "
            f"category_conflicts={self.category_conflicts} "
            f"users_dropped={self.users_dropped}",
            file=stream,
        )


def _parse_row(row: list[str]):
    if len(row) != 5:
        return None
    try:
        u, i, c, t = int(row[0]), int(row[1]), int(row[2]), int(row[4])
    except ValueError:
        return None
    b = _BEHAVIOR_CODES.get(row[3].strip())
    if b is None or t <= 0 or u < 0 or i < 0 or c < 0:
        return None
    return u, i, c, b, t


def _scan(path: Path, max_rows: int | None, keep_users=None):
    """One pass over the CSV; yields parsed rows and returns counters."""
    cols = [[], [], [], [], []]
    rows = malformed = 0
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for n, row in enumerate(csv.reader(fh)):
                if n == 0 and row and row[0].strip().lower() in _HEADER_FIRST:
                    continue
                if max_rows is not None and rows >= max_rows:
                    break
                rows += 1
                rec = _parse_row(row)
                if rec is None:
                    malformed += 1
                    continue
                if keep_users is not None and rec[0] not in keep_users:
                    continue
                for col, v in zip(cols, rec):
                    col.append(v)
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}", code="unreadable-log") from exc
    return cols, rows, malformed


def _to_log(cols) -> InteractionLog:
    return InteractionLog(
        np.asarray(cols[0], dtype=np.int64),
        np.asarray(cols[1], dtype=np.int64),
        np.asarray(cols[2], dtype=np.int64),
        np.asarray(cols[3], dtype=np.int8),
        np.asarray(cols[4], dtype=np.int64),
    )


def top_active_users(users: np.ndarray, max_users: int) -> np.ndarray:
    """The ``max_users`` ids with most rows; ties prefer the smaller id."""
    ids, counts = np.unique(users, return_counts=True)
    order = np.lexsort((ids, -counts))
    return np.sort(ids[order[:max_users]])


def parse_log(
    path,
    max_users: int | None = None,
    max_rows: int | None = None,
    report: ParseReport | None = None,
) -> tuple[InteractionLog, Catalog]:
    """Parse a behavior log into an :class:`InteractionLog` and its catalog.

    ``max_rows`` caps how many data rows are read. ``max_users`` keeps the
    most active users (a second pass over the file). Categories in the
    returned log are rewritten through the majority-vote catalog so every
    downstream count agrees with ``Catalog.category_of``.
    """
    path = Path(path)
    report = report if report is not None else ParseReport()
    cols, rows, malformed = _scan(path, max_rows)
    report.rows, report.malformed = rows, malformed
    if rows == 0:
        raise DataError(f"{path}: no data rows", code="empty-log")
    if malformed > MAX_MALFORMED_FRACTION * rows:
        raise DataError(
            f"{path}: {malformed}/{rows} malformed rows; wrong file?",
            code="malformed-log",
        )
    log = _to_log(cols)
    if max_users is not None:
        keep = top_active_users(log.user, max_users)
        report.users_dropped = len(np.unique(log.user)) - len(keep)
        del log
        cols, _, _ = _scan(path, max_rows, keep_users=set(keep.tolist()))
        log = _to_log(cols)
    catalog, conflicts = Catalog.from_observations(log.item, log.category)
    report.category_conflicts = conflicts
    if conflicts:
        logger.warning("%d items observed with conflicting categories", conflicts)
    log.category = catalog.category_of(log.item) if len(log) else log.category
    report.kept = len(log)
    return log, catalog


@dataclass
class UserHistory:
    """One user's events in chronological order (ties keep input order)."""

    user_id: int
    items: np.ndarray
    categories: np.ndarray
    behaviors: np.ndarray
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.items)

    @property
    def events(self) -> list[Interaction]:
        return [
            Interaction(self.user_id, int(i), int(c), BEHAVIORS[b], int(t))
            for i, c, b, t in zip(self.items, self.categories, self.behaviors, self.timestamps)
        ]

    def select(self, mask) -> "UserHistory":
        return UserHistory(
            self.user_id,
            self.items[mask],
            self.categories[mask],
            self.behaviors[mask],
            self.timestamps[mask],
        )


def build_histories(log: InteractionLog) -> dict[int, UserHistory]:
    order = np.lexsort((log.timestamp, log.user))  # lexsort is stable
    s = log.take(order)
    if len(s) == 0:
        return {}
    bounds = np.flatnonzero(np.diff(s.user)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(s)]])
    return {
        int(s.user[a]): UserHistory(
            int(s.user[a]), s.item[a:b], s.category[a:b], s.behavior[a:b], s.timestamp[a:b]
        )
        for a, b in zip(starts, ends)
    }


@dataclass(frozen=True)
class SplitSpec:
    train_end: int
    valid_end: int
    test_end: int

    def __post_init__(self):
        if not self.train_end < self.valid_end < self.test_end:
            raise ValueError("split boundaries must satisfy train_end < valid_end < test_end")


SPLITS = ("train", "valid", "test")


@dataclass
class Splits:
    train: dict[int, UserHistory] = field(default_factory=dict)
    valid: dict[int, UserHistory] = field(default_factory=dict)
    test: dict[int, UserHistory] = field(default_factory=dict)
    dropped: dict[int, int] = field(default_factory=dict)

    def __getitem__(self, name: str) -> dict[int, UserHistory]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)


def assign_split(timestamps: np.ndarray, spec: SplitSpec) -> np.ndarray:
    """Split code per event: 0 train, 1 valid, 2 test, -1 dropped."""
    t = np.asarray(timestamps)
    code = np.full(t.shape, -1, dtype=np.int8)
    code[t < spec.train_end] = 0
    code[(t >= spec.train_end) & (t < spec.valid_end)] = 1
    code[(t >= spec.valid_end) & (t < spec.test_end)] = 2
    return code


def split_by_day(histories: Mapping[int, UserHistory], spec: SplitSpec) -> Splits:
    """Partition every user's events by half-open timestamp ranges.

    Users only appear in a split where they have at least one event.
    """
    out = Splits()
    for user, h in histories.items():
        code = assign_split(h.timestamps, spec)
        for k, name in enumerate(SPLITS):
            mask = code == k
            if mask.any():
                out[name][user] = h.select(mask)
        out.dropped[user] = int(np.count_nonzero(code < 0))
    if not out.train:
        raise DataError("train split is empty; check the split boundaries", code="empty-train")
    return out
