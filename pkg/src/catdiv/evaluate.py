"""Category ranking, hit ratio on the U/N tasks, and diversity reporting."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ingest import Catalog
from .model import ModelParams, category_tower, score_categories
from .samples import EvalSample, UserContext

TASKS = ("U", "N")
DEFAULT_KS = (5, 15, 30)


@dataclass
class RankedCategories:
    """Categories by descending score, ties by ascending id.

    ``n_historical`` is set by the Statistics baseline: only that prefix is
    a real prediction, the rest is filler in id order.
    """

    category_ids: np.ndarray
    scores: np.ndarray
    n_historical: int | None = None

    def __len__(self) -> int:
        return len(self.category_ids)

    def top(self, k: int) -> np.ndarray:
        return self.category_ids[:k]


def order_by_score(category_ids, scores) -> RankedCategories:
    ids = np.asarray(category_ids, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((ids, -s))
    return RankedCategories(ids[order], s[order])


def rank_categories(context: UserContext, params: ModelParams,
                    tower: np.ndarray | None = None) -> RankedCategories:
    cats = params.category_vocab
    return order_by_score(cats, score_categories(context, cats, params, tower=tower))


def rank_of(category_ids: np.ndarray, scores: np.ndarray, target: int) -> int:
    """0-based position of ``target`` under the (score desc, id asc) order."""
    idx = np.flatnonzero(category_ids == target)
    if len(idx) == 0:
        raise KeyError(f"category {target} not ranked")
    s_t = scores[idx[0]]
    return int(np.count_nonzero(scores > s_t) + np.count_nonzero((scores == s_t) & (category_ids < target)))


def target_ranks(samples: Sequence[EvalSample], params: ModelParams) -> np.ndarray:
    """Rank of each sample's target under the model (no full sort needed)."""
    tower = category_tower(params)
    cats = params.category_vocab
    ranks = np.empty(len(samples), dtype=np.int64)
    for i, s in enumerate(samples):
        ranks[i] = rank_of(cats, score_categories(s.context, cats, params, tower=tower), s.target_category)
    return ranks


def hr_from_ranks(ranks: np.ndarray, k: int) -> float | None:
    """Hit ratio from 0-based target ranks; ``None`` when there are no samples."""
    if k < 1:
        raise ValueError("K must be >= 1")
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        return None
    return float(np.count_nonzero(ranks < k) / ranks.size)


def hr_at_k(rankings: Sequence[RankedCategories], samples: Sequence[EvalSample], k: int,
            task: str | None = None) -> float | None:
    """Fraction of samples (optionally of one task) whose target is in the top-K.

    A ranking with ``n_historical`` set only counts hits inside that prefix.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    hits = total = 0
    for ranked, s in zip(rankings, samples, strict=True):
        if task is not None and s.task != task:
            continue
        total += 1
        limit = k if ranked.n_historical is None else min(k, ranked.n_historical)
        hits += int(s.target_category in set(ranked.top(limit).tolist()))
    return None if total == 0 else hits / total


def statistics_baseline(history_categories, catalog: Catalog) -> RankedCategories:
    """Rank by count in the history, then recency, then id.

    Categories never seen in the history follow in ascending id order and are
    excluded from hit counting through ``n_historical``.
    """
    hist = [int(c) for c in history_categories]
    counts = Counter(hist)
    last = {c: k for k, c in enumerate(hist)}
    historical = sorted(counts, key=lambda c: (-counts[c], -last[c], c))
    seen = set(historical)
    rest = [int(c) for c in catalog.categories if int(c) not in seen]
    ids = np.array(historical + rest, dtype=np.int64)
    n = len(ids)
    return RankedCategories(ids, np.arange(n, 0, -1, dtype=np.float64), n_historical=len(historical))


def statistics_ranks(samples: Sequence[EvalSample], catalog: Catalog) -> np.ndarray:
    """Target ranks inside the historical prefix; a large sentinel outside it."""
    out = np.empty(len(samples), dtype=np.int64)
    miss = np.iinfo(np.int64).max
    for i, s in enumerate(samples):
        ranked = statistics_baseline(s.context.history_categories, catalog)
        prefix = ranked.category_ids[:ranked.n_historical]
        pos = np.flatnonzero(prefix == s.target_category)
        out[i] = pos[0] if len(pos) else miss
    return out


@dataclass
class EvalReport:
    method: str
    ks: tuple[int, ...]
    counts: dict[str, int]
    hr: dict[str, dict[int, float | None]]

    @classmethod
    def from_ranks(cls, method: str, ranks: np.ndarray, tasks: Sequence[str],
                   ks: Iterable[int] = DEFAULT_KS) -> "EvalReport":
        ks = tuple(ks)
        tasks = np.asarray(tasks)
        counts, hr = {}, {}
        for t in TASKS + ("all",):
            sel = ranks if t == "all" else ranks[tasks == t]
            counts[t] = int(sel.size)
            hr[t] = {k: hr_from_ranks(sel, k) for k in ks}
        return cls(method, ks, counts, hr)

    def to_records(self) -> list[dict]:
        recs = []
        for t in TASKS + ("all",):
            rec = {"method": self.method, "task": t, "n": self.counts[t]}
            for k in self.ks:
                rec[f"hr@{k}"] = self.hr[t][k]
            recs.append(rec)
        return recs

    def to_table(self) -> str:
        head = f"{'method':<12}{'task':<6}{'n':>8}" + "".join(f"{'HR@' + str(k):>9}" for k in self.ks)
        lines = [head]
        for rec in self.to_records():
            cells = "".join(
                f"{'N/A':>9}" if rec[f'hr@{k}'] is None else f"{rec[f'hr@{k}']:>9.3f}"
                for k in self.ks
            )
            lines.append(f"{rec['method']:<12}{rec['task']:<6}{rec['n']:>8}{cells}")
        return "\n".join(lines)


def evaluate_model(samples: Sequence[EvalSample], params: ModelParams,
                   ks: Iterable[int] = DEFAULT_KS, method: str = "model") -> EvalReport:
    return EvalReport.from_ranks(method, target_ranks(samples, params), [s.task for s in samples], ks)


def evaluate_statistics(samples: Sequence[EvalSample], catalog: Catalog,
                        ks: Iterable[int] = DEFAULT_KS) -> EvalReport:
    return EvalReport.from_ranks("statistics", statistics_ranks(samples, catalog),
                                 [s.task for s in samples], ks)


def write_eval_records(reports: Iterable[EvalReport], path) -> None:
    """Line-delimited JSON; keys ``method, task, n, hr@K...`` (null = N/A)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for report in reports:
            for rec in report.to_records():
                fh.write(json.dumps(rec) + "\n")


@dataclass
class DiversityReport:
    n_users: int
    mean_exposed: float
    mean_exposed_new: float
    per_user: dict[int, tuple[int, int]] = field(default_factory=dict)

    def to_record(self, **extra) -> dict:
        rec = dict(extra)
        rec.update(n_users=self.n_users, mean_exposed=self.mean_exposed,
                   mean_exposed_new=self.mean_exposed_new)
        return rec


def diversity_report(recommended_categories: Mapping[int, Iterable[int]],
                     history_categories: Mapping[int, Iterable[int]]) -> DiversityReport:
    """Per user: distinct categories exposed and how many are new to the user.

    "New" means absent from the user's history categories.
    """
    per_user = {}
    for user, cats in recommended_categories.items():
        exposed = {int(c) for c in cats}
        known = {int(c) for c in history_categories.get(user, ())}
        per_user[user] = (len(exposed), len(exposed - known))
    n = len(per_user)
    if n == 0:
        return DiversityReport(0, 0.0, 0.0, {})
    return DiversityReport(
        n,
        sum(e for e, _ in per_user.values()) / n,
        sum(x for _, x in per_user.values()) / n,
        per_user,
    )
