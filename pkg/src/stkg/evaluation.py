"""Full-catalog ranking, top-k prediction and MRR / Acc@k evaluation."""

from __future__ import annotations

import bisect
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import embedding as emb
from .core import EntityId, EntityKind, EntityVocab, TimeBin, Variant, flatten_timebin
from .errors import DataError
from .ingest import CategoryIndex, aux_for, predecessor_before

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)


class Query(NamedTuple):
    user: EntityId
    bin: TimeBin
    aux: tuple
    truth: EntityId | None = None
    timestamp: int | None = None


class RankedPrediction(NamedTuple):
    candidates: list  # [(EntityId, score)], best first
    truth_rank: int | None


def build_queries(split, vocab: EntityVocab, variant, catalog=None, partition: str = "test") -> list:
    """One query per record of ``partition``; aux comes from the true history before it."""
    variant = Variant.parse(variant)
    categories = CategoryIndex(catalog, vocab) if variant.category_level else None
    queries = []
    for user in sorted(getattr(split, partition)):
        history = split.history(user, upto=partition)
        keys = [r.timestamp for r in history]
        for rec in getattr(split, partition)[user]:
            prev = predecessor_before(history, rec.timestamp, keys)
            queries.append(Query(rec.user, rec.bin, aux_for(variant, prev, categories), rec.poi, rec.timestamp))
    return queries


def _query_arrays(queries: Sequence[Query], vocab: EntityVocab):
    users = np.array([vocab.row(q.user) for q in queries], dtype=np.int64)
    bins = np.array([flatten_timebin(q.bin, vocab.bins_per_day) for q in queries], dtype=np.int64)
    aux = np.array([vocab.row(q.aux[0]) if q.aux else -1 for q in queries], dtype=np.int64)
    return users, bins, aux


class TableScorer:
    """Scores every PoI for batches of queries with a trained table."""

    def __init__(self, table: emb.ComplexEmbeddingTable, strict: bool = False):
        self.table = table
        self.strict = strict
        self.vocab = table.vocab
        self._cand = table.entity[table.poi_rows()].astype(np.complex128)

    def scores(self, queries: Sequence[Query]) -> np.ndarray:
        if len(queries) > 1 and len({len(q.aux) for q in queries}) > 1:
            raise ValueError("queries in one batch must share an aux arity")
        if queries and len(queries[0].aux) > 1:
            return np.stack([self._single(q) for q in queries])
        users, bins, aux = _query_arrays(queries, self.vocab)
        x = emb.query_vectors(self.table, users, bins, aux)
        return emb.score_rows(x, self._cand, strict=self.strict)

    def _single(self, q: Query) -> np.ndarray:
        pois = [EntityId(EntityKind.POI, i) for i in range(self.vocab.size(EntityKind.POI))]
        return emb.score_stmpr_batch(q.user, q.bin, q.aux, pois, self.table, strict=True)


def _as_scorer(model):
    if isinstance(model, emb.ComplexEmbeddingTable):
        return TableScorer(model)
    return model


def truth_ranks(scores: np.ndarray, truth_idx: np.ndarray) -> np.ndarray:
    """Optimistic rank: 1 + number of candidates scoring strictly higher than the truth."""
    truth_scores = scores[np.arange(len(scores)), truth_idx]
    return 1 + (scores > truth_scores[:, None]).sum(axis=1)


def ordering(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best candidates, descending score, ties by ascending index."""
    order = np.argsort(-scores, kind="stable")
    return order[:k]


def predict_topk(query: Query, k: int, model, strict: bool = True) -> RankedPrediction:
    scorer = _as_scorer(model)
    if isinstance(scorer, TableScorer) and strict != scorer.strict:
        scorer = TableScorer(scorer.table, strict=strict)
    scores = scorer.scores([query])[0]
    n = len(scores)
    if k > n:
        logger.warning("k=%d exceeds the %d candidate PoIs; clamped", k, n)
        k = n
    top = ordering(scores, k)
    rank = None
    if query.truth is not None:
        rank = int(truth_ranks(scores[None, :], np.array([query.truth.index]))[0])
    return RankedPrediction([(EntityId(EntityKind.POI, int(i)), float(scores[i])) for i in top], rank)


def predict_many(queries: Sequence[Query], k: int, model, chunk: int = 2048):
    """Yield (query, RankedPrediction) for many queries, scoring in chunks."""
    scorer = _as_scorer(model)
    for start in range(0, len(queries), chunk):
        part = queries[start : start + chunk]
        scores = scorer.scores(part)
        k_eff = min(k, scores.shape[1])
        for q, row in zip(part, scores):
            top = ordering(row, k_eff)
            rank = None
            if q.truth is not None:
                rank = int(1 + (row > row[q.truth.index]).sum())
            yield q, RankedPrediction([(EntityId(EntityKind.POI, int(i)), float(row[i])) for i in top], rank)


@dataclass
class MetricsReport:
    mrr: float
    acc: dict  # k -> value
    per_user: dict = field(default_factory=dict)  # user index -> {"mrr":..., "acc@k":..., "n":...}
    n_queries: int = 0
    n_users: int = 0
    n_users_without_queries: int = 0
    averaging: str = "macro"

    def acc_at(self, k: int) -> float:
        return self.acc[k]

    def check(self) -> None:
        """Metric-range and ordering invariants; raises AssertionError on violation."""
        ks = sorted(self.acc)
        values = [self.mrr] + [self.acc[k] for k in ks]
        assert all(0.0 <= v <= 1.0 for v in values), values
        assert all(self.acc[a] <= self.acc[b] for a, b in zip(ks, ks[1:])), self.acc
        if 1 in self.acc:
            assert self.mrr >= self.acc[1] - 1e-12, (self.mrr, self.acc[1])
        for stats in self.per_user.values():
            if 1 in self.acc:
                assert stats["mrr"] >= stats["acc@1"] - 1e-12

    def summary(self) -> dict:
        out = {"mrr": self.mrr, "n_queries": self.n_queries, "n_users": self.n_users}
        out.update({f"acc@{k}": v for k, v in sorted(self.acc.items())})
        out["n_users_without_queries"] = self.n_users_without_queries
        out["averaging"] = self.averaging
        return out

    def to_dict(self, vocab: EntityVocab | None = None) -> dict:
        out = self.summary()
        per_user = {}
        for u, stats in sorted(self.per_user.items()):
            name = vocab.users[u] if vocab is not None else str(u)
            per_user[name] = stats
        out["per_user"] = per_user
        return out

    def table(self) -> str:
        ks = sorted(self.acc)
        head = ["MRR"] + [f"Acc@{k}" for k in ks] + ["users", "queries"]
        vals = [f"{self.mrr:.4f}"] + [f"{self.acc[k]:.4f}" for k in ks] + [str(self.n_users), str(self.n_queries)]
        widths = [max(len(h), len(v)) for h, v in zip(head, vals)]
        line = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))  # noqa: E731
        return line(head) + "\n" + line(vals) + "\n"


def metrics_from_ranks(ranks_by_user: dict, ks=DEFAULT_KS, averaging: str = "macro", n_empty: int = 0):
    """MRR and Acc@k per user, then averaged across users (macro) or over all queries (micro)."""
    per_user, all_ranks = {}, []
    for user, ranks in sorted(ranks_by_user.items()):
        ranks = np.asarray(ranks, dtype=np.float64)
        if not len(ranks):
            n_empty += 1
            continue
        stats = {"n": int(len(ranks)), "mrr": float(np.mean(1.0 / ranks))}
        stats.update({f"acc@{k}": float(np.mean(ranks <= k)) for k in ks})
        per_user[user] = stats
        all_ranks.append(ranks)
    if not per_user:
        raise DataError("no queries to evaluate")
    if averaging == "micro":
        flat = np.concatenate(all_ranks)
        mrr = float(np.mean(1.0 / flat))
        acc = {k: float(np.mean(flat <= k)) for k in ks}
    elif averaging == "macro":
        mrr = float(np.mean([s["mrr"] for s in per_user.values()]))
        acc = {k: float(np.mean([s[f"acc@{k}"] for s in per_user.values()])) for k in ks}
    else:
        raise ValueError(f"averaging must be 'macro' or 'micro', got {averaging!r}")
    n_queries = sum(s["n"] for s in per_user.values())
    report = MetricsReport(mrr, acc, per_user, n_queries, len(per_user), n_empty, averaging)
    report.check()
    return report


def query_ranks(queries: Sequence[Query], model, chunk: int = 2048) -> np.ndarray:
    scorer = _as_scorer(model)
    out = np.empty(len(queries), dtype=np.int64)
    for start in range(0, len(queries), chunk):
        part = queries[start : start + chunk]
        if any(q.truth is None for q in part):
            raise DataError("evaluation queries need a ground-truth PoI")
        scores = scorer.scores(part)
        out[start : start + len(part)] = truth_ranks(scores, np.array([q.truth.index for q in part]))
    return out


def evaluate(queries: Sequence[Query], model, ks=DEFAULT_KS, averaging: str = "macro", users=None) -> MetricsReport:
    """Macro-averaged MRR and Acc@k. ``users`` lists users expected to have queries."""
    if not queries:
        raise DataError("empty test set")
    ranks = query_ranks(queries, model)
    by_user = defaultdict(list)
    for q, r in zip(queries, ranks):
        by_user[q.user.index].append(int(r))
    n_empty = 0
    if users is not None:
        n_empty = len(set(users) - set(by_user))
    return metrics_from_ranks(by_user, ks, averaging, n_empty)


class FrequencyBaseline:
    """Ranks PoIs by the user's visit counts in the bin, then the user's totals, then global popularity."""

    def __init__(self, records, vocab: EntityVocab):
        self.vocab = vocab
        n_pois = vocab.size(EntityKind.POI)
        self.by_user_bin = defaultdict(Counter)
        self.by_user = defaultdict(Counter)
        self.global_counts = np.zeros(n_pois, dtype=np.float64)
        for rec in records:
            b = flatten_timebin(rec.bin, vocab.bins_per_day)
            self.by_user_bin[(rec.user.index, b)][rec.poi.index] += 1
            self.by_user[rec.user.index][rec.poi.index] += 1
            self.global_counts[rec.poi.index] += 1
        self._base = float(len(records) + 1)

    def _vector(self, counter: Counter) -> np.ndarray:
        out = np.zeros(len(self.global_counts))
        if counter:
            idx = np.fromiter(counter.keys(), dtype=np.int64)
            out[idx] = np.fromiter(counter.values(), dtype=np.float64)
        return out

    def scores(self, queries: Sequence[Query]) -> np.ndarray:
        base = self._base
        out = np.empty((len(queries), len(self.global_counts)))
        for i, q in enumerate(queries):
            b = flatten_timebin(q.bin, self.vocab.bins_per_day)
            ub = self._vector(self.by_user_bin.get((q.user.index, b), Counter()))
            uu = self._vector(self.by_user.get(q.user.index, Counter()))
            out[i] = ub * base * base + uu * base + self.global_counts
        return out


def frequency_baseline(train_records, vocab: EntityVocab) -> FrequencyBaseline:
    if not train_records:
        raise DataError("frequency baseline needs training records")
    return FrequencyBaseline(train_records, vocab)


def group_by_frequency(queries: Sequence[Query], train_records, edges: Sequence[int], model, ks=DEFAULT_KS) -> dict:
    """Metrics per bucket of how often the user visited the true PoI in training.

    ``edges`` are ascending bucket lower bounds starting at 0; a count c falls in
    bucket ``bisect_right(edges, c) - 1``. Returns {bucket index: MetricsReport}.
    """
    edges = list(edges)
    if not edges or edges[0] != 0 or edges != sorted(edges):
        raise ValueError("bucket edges must be ascending and start at 0")
    visits = Counter((rec.user.index, rec.poi.index) for rec in train_records)
    ranks = query_ranks(queries, model)
    buckets = defaultdict(lambda: defaultdict(list))
    for q, r in zip(queries, ranks):
        count = visits.get((q.user.index, q.truth.index), 0)
        buckets[bisect.bisect_right(edges, count) - 1][q.user.index].append(int(r))
    return {b: metrics_from_ranks(by_user, ks) for b, by_user in sorted(buckets.items())}


def write_predictions(path, results, vocab: EntityVocab) -> int:
    """CSV (``user_id,target_bin,truth,truth_rank,predictions``) or JSON lines by extension."""
    n = 0
    as_json = str(path).endswith((".jsonl", ".json"))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if not as_json:
            fh.write("user_id,target_bin,truth,truth_rank,predictions\n")
        for q, pred in results:
            truth = vocab.external_of(q.truth) if q.truth is not None else ""
            rank = "" if pred.truth_rank is None else pred.truth_rank
            cands = [(vocab.external_of(p), s) for p, s in pred.candidates]
            if as_json:
                rec = {
                    "user_id": vocab.external_of(q.user),
                    "target_bin": q.bin.external(),
                    "truth": truth or None,
                    "truth_rank": pred.truth_rank,
                    "predictions": [{"poi_id": p, "score": s} for p, s in cands],
                }
                fh.write(json.dumps(rec) + "\n")
            else:
                preds = " ".join(f"{p}:{s:.17g}" for p, s in cands)
                fh.write(f"{vocab.external_of(q.user)},{q.bin.external()},{truth},{rank},{preds}\n")
            n += 1
    return n


def read_prediction_ranks(path, vocab: EntityVocab) -> dict:
    """User index -> truth ranks from a predictions file written by :func:`write_predictions`."""
    by_user = defaultdict(list)
    as_json = str(path).endswith((".jsonl", ".json"))
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or (line_no == 1 and line.startswith("user_id,")):
                continue
            if as_json:
                rec = json.loads(line)
                user, rank = rec["user_id"], rec["truth_rank"]
            else:
                fields = line.split(",", 4)
                user, rank = fields[0], fields[3] or None
            if rank is None:
                continue
            u = vocab.get(EntityKind.USER, user)
            if u is None:
                raise DataError(f"{path}:{line_no}: unknown user {user!r}")
            by_user[u.index].append(int(rank))
    return dict(by_user)

