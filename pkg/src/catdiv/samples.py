"""User-category graph and next-category samples.

A training sample is drawn at a random position of a user's chronological
train sequence: the category of the item at that position is the target and
the (truncated) items before it are the history. Negatives come from the
categories the user never touched in the train window, neighbors from the
ones they did.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .ingest import Catalog, SplitSpec, UserHistory, assign_split

PROFILE_UNKNOWN = 0
N_PROFILE_TOKENS = 1

COUNT_BUCKETS = ("0", "1", "2", "3-5", "6-10", ">10")
RECENCY_BUCKETS = ("absent", "last-1", "last-2..3", "last-4..7", "older")
# crossing token rows: count buckets first, recency buckets after them
RECENCY_OFFSET = len(COUNT_BUCKETS)
N_CROSS_TOKENS = len(COUNT_BUCKETS) + len(RECENCY_BUCKETS)

NEGATIVE_POOLS = ("non-interacted", "all-but-target")


class UserCategoryGraph:
    """Bipartite user/category graph weighted by interaction counts."""

    def __init__(self, counts: Mapping[int, Mapping[int, int]] | None = None):
        self._counts: dict[int, dict[int, int]] = {
            u: dict(cs) for u, cs in (counts or {}).items()
        }

    @property
    def edges(self) -> dict[tuple[int, int], int]:
        return {(u, c): s for u, cs in self._counts.items() for c, s in cs.items()}

    @property
    def per_user(self) -> dict[int, set[int]]:
        return {u: set(cs) for u, cs in self._counts.items()}

    def categories_of(self, user: int) -> set[int]:
        return set(self._counts.get(user, ()))

    def count(self, user: int, category: int) -> int:
        return self._counts.get(user, {}).get(category, 0)

    def user_counts(self, user: int) -> dict[int, int]:
        return dict(self._counts.get(user, {}))


def build_graph(train: Mapping[int, UserHistory], catalog: Catalog | None = None) -> UserCategoryGraph:
    """Count train events per (user, C(item))."""
    counts = {}
    for user, h in train.items():
        cats = catalog.category_of(h.items) if catalog is not None else h.categories
        if len(cats):
            counts[user] = dict(Counter(np.atleast_1d(cats).tolist()))
    return UserCategoryGraph(counts)


def count_bucket(s: int) -> int:
    if s <= 2:
        return max(s, 0)
    if s <= 5:
        return 3
    if s <= 10:
        return 4
    return 5


def recency_bucket(offset: int | None) -> int:
    """``offset`` is 1 for the most recent history item, None if absent."""
    if offset is None:
        return 0
    if offset == 1:
        return 1
    if offset <= 3:
        return 2
    if offset <= 7:
        return 3
    return 4


@dataclass
class UserContext:
    """What the scorer knows about a user at prediction time.

    ``prior_counts`` counts every earlier event per category (not truncated);
    ``history`` is the last ``T`` item ids before the prediction point.
    """

    user_id: int
    history: np.ndarray
    history_categories: np.ndarray
    prior_counts: dict[int, int] = field(default_factory=dict)
    profile: int = PROFILE_UNKNOWN

    def last_offsets(self) -> dict[int, int]:
        n = len(self.history_categories)
        return {int(c): n - k for k, c in enumerate(self.history_categories)}


def crossing_features(category: int, counts: Mapping[int, int], history_categories) -> tuple[int, int]:
    """(count bucket, recency bucket) for a user-category pair."""
    n = len(history_categories)
    offset = None
    for k in range(n - 1, -1, -1):
        if history_categories[k] == category:
            offset = n - k
            break
    return count_bucket(counts.get(category, 0)), recency_bucket(offset)


def crossing_tokens(context: UserContext, categories) -> np.ndarray:
    """Embedding-row tokens, shape (n, 2), for many categories at once."""
    cats = np.asarray(categories, dtype=np.int64)
    out = np.zeros((len(cats), 2), dtype=np.int64)
    out[:, 1] = RECENCY_OFFSET
    offsets = context.last_offsets()
    touched = set(offsets) | set(context.prior_counts)
    if not touched:
        return out
    hit = np.flatnonzero(np.isin(cats, np.fromiter(touched, dtype=np.int64)))
    for j in hit:
        c = int(cats[j])
        out[j, 0] = count_bucket(context.prior_counts.get(c, 0))
        out[j, 1] = RECENCY_OFFSET + recency_bucket(offsets.get(c))
    return out


@dataclass
class TrainingSample:
    context: UserContext
    target_category: int
    target_count: int
    negatives: np.ndarray
    neighbors: list[tuple[int, int]]
    label: int = 1

    @property
    def user_id(self) -> int:
        return self.context.user_id

    @property
    def history(self) -> np.ndarray:
        return self.context.history

    @property
    def profile(self) -> int:
        return self.context.profile

    @property
    def crossing(self) -> tuple[int, int]:
        return crossing_features(
            self.target_category, self.context.prior_counts, self.context.history_categories
        )


@dataclass
class EvalSample:
    context: UserContext
    target_category: int
    task: str  # "U" or "N"

    @property
    def user_id(self) -> int:
        return self.context.user_id

    @property
    def history(self) -> np.ndarray:
        return self.context.history


def sample_negatives(
    user: int,
    catalog: Catalog,
    graph: UserCategoryGraph,
    n_neg: int,
    rng: np.random.Generator,
    target: int | None = None,
    pool: str = "non-interacted",
) -> np.ndarray:
    """Uniform draw without replacement from the user's negative pool.

    An empty result means the pool was empty and the sample must be dropped.
    """
    if pool == "non-interacted":
        seen = graph.categories_of(user)
    elif pool == "all-but-target":
        seen = set() if target is None else {target}
    else:
        raise ValueError(f"unknown negative pool {pool!r}")
    if seen:
        candidates = np.setdiff1d(catalog.categories, np.fromiter(seen, dtype=np.int64))
    else:
        candidates = catalog.categories
    if len(candidates) == 0:
        return np.empty(0, dtype=np.int64)
    k = min(n_neg, len(candidates))
    return rng.choice(candidates, size=k, replace=False)


def sample_neighbors(
    user: int, target: int, graph: UserCategoryGraph, n_nei: int, rng: np.random.Generator
) -> list[tuple[int, int]]:
    counts = graph.user_counts(user)
    candidates = np.array(sorted(c for c in counts if c != target), dtype=np.int64)
    if len(candidates) == 0 or n_nei <= 0:
        return []
    picked = rng.choice(candidates, size=min(n_nei, len(candidates)), replace=False)
    return [(int(c), counts[int(c)]) for c in picked]


def user_rng(seed: int, user: int) -> np.random.Generator:
    return np.random.default_rng([seed, user])


def make_training_samples(
    train: Mapping[int, UserHistory],
    catalog: Catalog,
    graph: UserCategoryGraph,
    max_history: int = 20,
    per_user_samples: int = 5,
    min_history: int = 3,
    n_neg: int = 500,
    n_nei: int = 5,
    seed: int = 0,
    negative_pool: str = "non-interacted",
) -> list[TrainingSample]:
    """Draw up to ``per_user_samples`` positions per user.

    Per user, a generator seeded with ``(seed, user_id)`` draws the positions
    (uniform without replacement among those with at least ``min_history``
    earlier events, then sorted), and for each position, in order, the
    negatives and then the neighbors. Samples whose negative pool is empty
    are dropped.
    """
    if max_history < 1 or min_history < 1:
        raise ValueError("max_history and min_history must be >= 1")
    out = []
    for user in sorted(train):
        h = train[user]
        n_eligible = len(h) - min_history
        if n_eligible <= 0:
            continue
        rng = user_rng(seed, user)
        k = min(per_user_samples, n_eligible)
        positions = np.sort(rng.choice(n_eligible, size=k, replace=False)) + min_history
        for p in positions.tolist():
            target = int(h.categories[p])
            lo = max(0, p - max_history)
            ctx = UserContext(
                user,
                h.items[lo:p],
                h.categories[lo:p],
                dict(Counter(h.categories[:p].tolist())),
            )
            negatives = sample_negatives(
                user, catalog, graph, n_neg, rng, target=target, pool=negative_pool
            )
            neighbors = sample_neighbors(user, target, graph, n_nei, rng)
            if len(negatives) == 0:
                continue
            out.append(
                TrainingSample(ctx, target, graph.count(user, target), negatives, neighbors)
            )
    return out


def make_eval_samples(
    histories: Mapping[int, UserHistory],
    spec: SplitSpec,
    split: str,
    max_history: int = 20,
) -> list[EvalSample]:
    """One sample per (user, target category) of ``split``, earliest event kept.

    ``histories`` are the full per-user sequences; the history of a sample is
    the last ``max_history`` events before the target, whatever split they
    belong to. Targets with no earlier event are skipped.
    """
    code = {"valid": 1, "test": 2}.get(split)
    if code is None:
        raise ValueError("split must be 'valid' or 'test'")
    out = []
    for user in sorted(histories):
        h = histories[user]
        in_split = np.flatnonzero(assign_split(h.timestamps, spec) == code)
        seen_targets = set()
        for p in in_split.tolist():
            target = int(h.categories[p])
            if target in seen_targets or p == 0:
                continue
            seen_targets.add(target)
            lo = max(0, p - max_history)
            ctx = UserContext(
                user,
                h.items[lo:p],
                h.categories[lo:p],
                dict(Counter(h.categories[:p].tolist())),
            )
            task = "U" if target in set(ctx.history_categories.tolist()) else "N"
            out.append(EvalSample(ctx, target, task))
    return out


def dump_samples(samples: Iterable[TrainingSample], path) -> None:
    """Tab-separated dump, one training sample per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(
            "user_id\thistory\tprofile\tcrossing\ttarget_category\t"
            "target_count\tlabel\tnegatives\tneighbors\n"
        )
        for s in samples:
            cross = s.crossing
            fh.write(
                "\t".join(
                    [
                        str(s.user_id),
                        ",".join(map(str, s.history.tolist())),
                        str(s.profile),
                        f"{cross[0]},{cross[1]}",
                        str(s.target_category),
                        str(s.target_count),
                        str(s.label),
                        ",".join(map(str, s.negatives.tolist())),
                        ",".join(f"{c}:{n}" for c, n in s.neighbors),
                    ]
                )
                + "\n"
            )
