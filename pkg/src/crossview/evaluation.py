"""Retrieval metrics: Recall@k, Recall@1%, semi-positive-masked hit rate, AP.

All metrics are rank-based (invariant under any strictly increasing
transform of the similarity scores) and break ranking ties toward the
lower reference index so results reproduce across implementations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .datasets import EmbeddingTable, SampleRecord
from .errors import ValidationError
from .simsearch import cosine_matrix, l2_normalize

RECALL_KS = (1, 5, 10)


@dataclass(frozen=True)
class RetrievalReport:
    recall_at: dict[int, float]
    recall_at_1pct: float
    hit_rate: float | None
    mean_ap: float | None
    n_queries: int
    n_references: int

    def to_json(self) -> str:
        obj = {
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "recall_at_1pct": self.recall_at_1pct,
            "hit_rate": self.hit_rate,
            "mean_ap": self.mean_ap,
            "n_queries": self.n_queries,
            "n_references": self.n_references,
        }
        return json.dumps(obj, sort_keys=True)


def _check_positives(positives: list[set[int]], n_q: int, n_r: int) -> None:
    if len(positives) != n_q:
        raise ValidationError(f"{len(positives)} positive sets for {n_q} queries")
    for i, pos in enumerate(positives):
        if not pos:
            raise ValidationError(f"query {i} has an empty positive set")
        if any(j < 0 or j >= n_r for j in pos):
            raise ValidationError(f"query {i} has a positive index outside the gallery")


def _rankings(sim: np.ndarray) -> np.ndarray:
    # descending similarity, ties toward the lower reference index
    return np.argsort(-np.asarray(sim, dtype=np.float64), axis=1, kind="stable")


def recall_at_k(sim: np.ndarray, positives: list[set[int]], k: int) -> float:
    """Fraction of queries whose top-k ranked references contain a positive."""
    sim = np.asarray(sim, dtype=np.float64)
    n_q, n_r = sim.shape
    if not 1 <= k <= n_r:
        raise ValidationError(f"k={k} outside [1, {n_r}]")
    _check_positives(positives, n_q, n_r)
    order = _rankings(sim)
    hits = sum(
        1 for i in range(n_q) if any(int(j) in positives[i] for j in order[i, :k])
    )
    return hits / n_q


def recall_at_percent(sim: np.ndarray, positives: list[set[int]], pct: float = 1.0) -> float:
    """recall_at_k with k = ceil(pct/100 * gallery size)."""
    if not 0.0 < pct <= 100.0:
        raise ValidationError(f"pct={pct} outside (0, 100]")
    n_r = np.asarray(sim).shape[1]
    k = math.ceil(pct / 100.0 * n_r)
    return recall_at_k(sim, positives, k)


def hit_rate(
    sim: np.ndarray, positives: list[set[int]], semi_positives: list[set[int]]
) -> float:
    """R@1 after removing each query's semi-positives from its gallery."""
    sim = np.asarray(sim, dtype=np.float64)
    n_q, n_r = sim.shape
    _check_positives(positives, n_q, n_r)
    if len(semi_positives) != n_q:
        raise ValidationError(f"{len(semi_positives)} semi-positive sets for {n_q} queries")
    hits = 0
    for i in range(n_q):
        clash = positives[i] & semi_positives[i]
        if clash:
            raise ValidationError(
                f"query {i}: positives {sorted(clash)} also listed as semi-positives"
            )
        row = sim[i].copy()
        for j in semi_positives[i]:
            row[j] = -np.inf
        top = int(np.argmax(row))  # argmax returns the lowest tied index
        hits += top in positives[i]
    return hits / n_q


def average_precision(ranking: list[int], positives: set[int]) -> float:
    """Un-interpolated AP of one ranked reference list.

    Mean over positives of precision at each positive's rank; positives
    missing from the ranking contribute zero.
    """
    if not positives:
        raise ValidationError("positives must be non-empty")
    found = 0
    total = 0.0
    for rank, ref in enumerate(ranking, start=1):
        if ref in positives:
            found += 1
            total += found / rank
    return total / len(positives)


def evaluate(
    queries: EmbeddingTable, references: EmbeddingTable, manifest: list[SampleRecord]
) -> RetrievalReport:
    """Full metric suite for a query table against a reference gallery.

    Query rows align with manifest records; positives/semi-positives are
    resolved through the reference table's row ids. hit_rate appears only
    when any record lists semi-positives, mean AP only when some query
    has multiple positives or the gallery holds distractor references.
    """
    if queries.count != len(manifest):
        raise ValidationError(
            f"{queries.count} query rows for {len(manifest)} manifest records"
        )
    for row_id, record in zip(queries.row_ids, manifest):
        if row_id != record.id:
            raise ValidationError(
                f"query row {row_id!r} does not align with record {record.id!r}"
            )
    ref_row = {rid: j for j, rid in enumerate(references.row_ids)}

    def resolve(ids: tuple[str, ...], record_id: str) -> set[int]:
        out = set()
        for rid in ids:
            if rid not in ref_row:
                raise ValidationError(
                    f"record {record_id!r} references {rid!r}, absent from the gallery"
                )
            out.add(ref_row[rid])
        return out

    positives = [resolve(r.positives, r.id) for r in manifest]
    semis = [resolve(r.semi_positives, r.id) for r in manifest]

    sim = cosine_matrix(l2_normalize(queries), l2_normalize(references))
    n_r = references.count

    recall = {k: recall_at_k(sim, positives, min(k, n_r)) for k in RECALL_KS}
    r1pct = recall_at_percent(sim, positives, 1.0)

    hit = hit_rate(sim, positives, semis) if any(s for s in semis) else None

    referenced = set().union(*positives)
    has_distractors = len(referenced) < n_r
    multi_positive = any(len(p) > 1 for p in positives)
    mean_ap = None
    if multi_positive or has_distractors:
        order = _rankings(sim)
        aps = [
            average_precision([int(j) for j in order[i]], positives[i])
            for i in range(queries.count)
        ]
        mean_ap = float(np.mean(aps))

    return RetrievalReport(
        recall_at=recall,
        recall_at_1pct=r1pct,
        hit_rate=hit,
        mean_ap=mean_ap,
        n_queries=queries.count,
        n_references=n_r,
    )
