"""Average precision, mAP, and per-object-size precision breakdowns."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import FormatError, InputError


@dataclass(frozen=True)
class QueryTruth:
    id: object
    positives: frozenset
    ignored: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "positives", frozenset(self.positives))
        object.__setattr__(self, "ignored", frozenset(self.ignored))
        if self.positives & self.ignored:
            raise InputError(f"query {self.id}: positives and ignored items overlap")


@dataclass
class GroundTruth:
    queries: dict = field(default_factory=dict)  # id -> QueryTruth

    def __getitem__(self, qid) -> QueryTruth:
        return self.queries[qid]

    def __contains__(self, qid) -> bool:
        return qid in self.queries

    def __len__(self) -> int:
        return len(self.queries)

    def ids(self) -> list:
        return list(self.queries)

    def add(self, qid, positives, ignored=()) -> None:
        self.queries[qid] = QueryTruth(qid, positives, ignored)

    def to_json(self) -> dict:
        return {
            "queries": [
                {"id": t.id, "positives": sorted(t.positives), "ignored": sorted(t.ignored)}
                for t in self.queries.values()
            ]
        }

    @classmethod
    def from_json(cls, obj) -> "GroundTruth":
        if not isinstance(obj, dict) or not isinstance(obj.get("queries"), list):
            raise FormatError("ground truth must be an object with a 'queries' list")
        gt = cls()
        for entry in obj["queries"]:
            try:
                gt.add(entry["id"], entry["positives"], entry.get("ignored", []))
            except (KeyError, TypeError) as exc:
                raise FormatError(f"malformed ground-truth entry {entry!r}") from exc
        return gt

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "GroundTruth":
        with open(path) as fh:
            try:
                return cls.from_json(json.load(fh))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: {exc}") from exc


def _positions(ranked: Sequence, truth: QueryTruth) -> tuple[list, int]:
    """1-based positions of retrieved positives in the ranking with ignored items removed."""
    seen = set()
    hits = []
    pos = 0
    for item in ranked:
        if item in seen:
            raise InputError(f"item {item!r} appears twice in the ranking")
        seen.add(item)
        if item in truth.ignored:
            continue
        pos += 1
        if item in truth.positives:
            hits.append(pos)
    return hits, pos


def average_precision(ranked: Sequence, truth: QueryTruth) -> float:
    """Mean over positives of the precision at each positive's rank; missing positives count 0."""
    if not truth.positives:
        raise InputError(f"query {truth.id}: AP is undefined without positives")
    hits, _ = _positions(ranked, truth)
    return sum((j + 1) / p for j, p in enumerate(hits)) / len(truth.positives)


def mean_average_precision(per_query_ap: Iterable[float]) -> float:
    aps = list(per_query_ap)
    if not aps:
        raise InputError("mAP of an empty list is undefined")
    return float(sum(aps) / len(aps))


def precision_at_positives(ranked: Sequence, truth: QueryTruth) -> dict:
    """Positive item -> precision at the position where it was retrieved (0 if absent)."""
    out = {p: 0.0 for p in truth.positives}
    count = 0
    pos = 0
    for item in ranked:
        if item in truth.ignored:
            continue
        pos += 1
        if item in truth.positives:
            count += 1
            out[item] = count / pos
    return out


DEFAULT_SIZE_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class GainReport:
    rows: list  # (bucket label, baseline precision, improved precision, count)
    skipped: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket", "baseline_precision", "improved_precision", "count"])
        for label, base, imp, count in self.rows:
            w.writerow([label, f"{base:.6f}", f"{imp:.6f}", count])
        return buf.getvalue()


def _order_of(ranking):
    return ranking.order if hasattr(ranking, "order") else list(ranking)


def rank_gain_report(
    baseline,
    improved,
    gt,
    size_of: Mapping,
    edges: Sequence[float] = DEFAULT_SIZE_EDGES,
) -> GainReport:
    """Precision of each positive at its retrieved position, averaged per relative-size bucket.

    `baseline`/`improved` are a ranking (or list of rankings, one per query in `gt`);
    `gt` is a QueryTruth or a list of them.
    """
    if isinstance(gt, QueryTruth):
        baseline, improved, gt = [baseline], [improved], [gt]
    elif isinstance(gt, GroundTruth):
        gt = list(gt.queries.values())
    if not (len(baseline) == len(improved) == len(gt)):
        raise InputError("need one baseline and one improved ranking per query")
    edges = np.asarray(edges, dtype=np.float64)
    nb = len(edges) - 1
    sums = np.zeros((nb, 2))
    counts = np.zeros(nb, dtype=np.int64)
    skipped = 0
    for base, imp, truth in zip(baseline, improved, gt):
        pb = precision_at_positives(_order_of(base), truth)
        pi = precision_at_positives(_order_of(imp), truth)
        for item in truth.positives:
            size = size_of.get(item)
            if size is None:
                skipped += 1
                continue
            b = int(np.clip(np.searchsorted(edges, size, side="left") - 1, 0, nb - 1))
            sums[b] += (pb[item], pi[item])
            counts[b] += 1
    rows = []
    for b in range(nb):
        if counts[b]:
            label = f"({edges[b]:.2f},{edges[b + 1]:.2f}]"
            rows.append((label, sums[b, 0] / counts[b], sums[b, 1] / counts[b], int(counts[b])))
    return GainReport(rows, skipped)
