"""Brute-force cosine ranking and the revisited Oxford/Paris style metrics.

Protocols (per query, from its easy / hard / junk id lists):

========  ===============  ==================
split     positives        ignored (junk)
========  ===============  ==================
easy      easy             hard + junk
medium    easy + hard      junk
hard      hard             easy + junk
========  ===============  ==================

Queries with no positives under a split are left out of that split's mean
and listed in ``excluded``.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InvalidInputError, ShapeError

SPLITS = ("easy", "medium", "hard")


@dataclass
class QueryTruth:
    query: str
    easy: list = field(default_factory=list)
    hard: list = field(default_factory=list)
    junk: list = field(default_factory=list)
    bbx: list | None = None

    def protocol(self, split):
        easy, hard, junk = set(self.easy), set(self.hard), set(self.junk)
        if split == "easy":
            return easy, hard | junk
        if split == "medium":
            return easy | hard, junk
        if split == "hard":
            return hard, easy | junk
        raise ValueError(f"unknown split {split!r}")


@dataclass
class RetrievalGroundTruth:
    queries: list
    database: list

    def __post_init__(self):
        db = set(self.database)
        for q in self.queries:
            sets = [set(q.easy), set(q.hard), set(q.junk)]
            if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
                raise DataError(f"query {q.query!r}: easy/hard/junk lists overlap")
            for image_id in q.easy + q.hard + q.junk:
                if image_id not in db:
                    raise DataError(f"query {q.query!r} references id {image_id!r} missing from the database")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        try:
            queries = [QueryTruth(q["query"], list(q.get("easy", [])), list(q.get("hard", [])),
                                  list(q.get("junk", [])), q.get("bbx")) for q in raw["queries"]]
            return cls(queries, list(raw["database"]))
        except (KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed ground truth ({exc})") from None

    def crops(self):
        return {q.query: q.bbx for q in self.queries if q.bbx is not None}


def rank(query, store):
    """Database ids by descending dot product; ties broken by ascending id."""
    query = np.asarray(query, dtype=np.float64)
    if len(store) == 0:
        raise InvalidInputError("cannot rank against an empty store")
    if query.shape != (store.dim,):
        raise ShapeError(f"query descriptor has dim {query.shape[-1]}, store has dim {store.dim}")
    sims = store.vectors.astype(np.float64) @ query
    order = np.lexsort((np.asarray(store.ids), -sims))
    return [store.ids[i] for i in order]


def average_precision(ranked, positives, junk=()):
    """Mean, over positives, of precision at each positive's junk-filtered rank.

    Positives missing from the ranking contribute 0.
    """
    positives, junk = set(positives), set(junk)
    if not positives:
        raise ValueError("average precision is undefined without positives")
    hits, total = 0, 0.0
    rank_pos = 0
    for image_id in ranked:
        if image_id in junk:
            continue
        rank_pos += 1
        if image_id in positives:
            hits += 1
            total += hits / rank_pos
    return total / len(positives)


def precision_at(ranked, positives, junk=(), k=10):
    """Hits among the top-k junk-filtered results, divided by min(k, filtered length)."""
    positives, junk = set(positives), set(junk)
    filtered = [i for i in ranked if i not in junk]
    top = filtered[:k]
    if not top:
        return 0.0
    return sum(i in positives for i in top) / min(k, len(filtered))


@dataclass
class EvalReport:
    map_easy: float
    map_medium: float
    map_hard: float
    mp10_easy: float
    mp10_medium: float
    mp10_hard: float
    per_query: list
    excluded: dict

    def to_dict(self):
        return {
            "map_medium": self.map_medium,
            "map_hard": self.map_hard,
            "mp10_medium": self.mp10_medium,
            "mp10_hard": self.mp10_hard,
            "map_easy": self.map_easy,
            "mp10_easy": self.mp10_easy,
            "per_query": self.per_query,
            "excluded": self.excluded,
        }


def _mean(values):
    return float(np.mean(values)) if values else float("nan")


def evaluate(gt: RetrievalGroundTruth, store, query_store, k=10):
    if store.dim != query_store.dim:
        raise ShapeError(f"query descriptors have dim {query_store.dim}, database descriptors have dim {store.dim}")
    known = set(store.ids)
    for image_id in gt.database:
        if image_id not in known:
            raise DataError(f"database id {image_id!r} has no descriptor")
    per_query = []
    aps = {s: [] for s in SPLITS}
    mps = {s: [] for s in SPLITS}
    excluded = {s: [] for s in SPLITS}
    for q in gt.queries:
        ranked = rank(query_store.vector(q.query), store)
        row = {"query": q.query}
        for split in SPLITS:
            pos, junk = q.protocol(split)
            if not pos:
                excluded[split].append(q.query)
                row[f"ap_{split}"] = None
                row[f"p10_{split}"] = None
                continue
            ap = average_precision(ranked, pos, junk)
            p10 = precision_at(ranked, pos, junk, k)
            aps[split].append(ap)
            mps[split].append(p10)
            row[f"ap_{split}"] = ap
            row[f"p10_{split}"] = p10
        per_query.append(row)
    return EvalReport(
        map_easy=_mean(aps["easy"]), map_medium=_mean(aps["medium"]), map_hard=_mean(aps["hard"]),
        mp10_easy=_mean(mps["easy"]), mp10_medium=_mean(mps["medium"]), mp10_hard=_mean(mps["hard"]),
        per_query=per_query, excluded=excluded,
    )
