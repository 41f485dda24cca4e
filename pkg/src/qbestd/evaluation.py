"""Ranking metrics, score fusion and attention-localization analysis."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)


@dataclass
class RankedItem:
    segment_id: str
    score: float
    relevant: bool | None = None


@dataclass
class ScoredRanking:
    """Per-query ranking, scores non-increasing, ties broken by segment id."""

    query_id: str
    items: list[RankedItem] = field(default_factory=list)


def make_ranking(query_id: str, scored) -> ScoredRanking:
    """Build a ranking from (segment_id, score[, relevant]) tuples."""
    items = [RankedItem(*entry) for entry in scored]
    seen = set()
    for it in items:
        if it.segment_id in seen:
            raise ValidationError(f"duplicate segment {it.segment_id!r} in ranking")
        seen.add(it.segment_id)
    items.sort(key=lambda it: (-it.score, it.segment_id))
    return ScoredRanking(query_id=query_id, items=items)


def average_precision(ranking: ScoredRanking) -> float:
    """Mean of precision-at-rank over the relevant items."""
    hits = 0
    total = 0.0
    n_relevant = 0
    for rank, item in enumerate(ranking.items, start=1):
        if item.relevant is None:
            raise ValidationError(
                f"ranking {ranking.query_id!r} has unlabeled segment {item.segment_id!r}"
            )
        if item.relevant:
            n_relevant += 1
            hits += 1
            total += hits / rank
    if n_relevant == 0:
        raise ValidationError(f"ranking {ranking.query_id!r} has no relevant segment")
    return total / n_relevant


def mean_average_precision(rankings) -> float:
    """Unweighted mean AP; queries without relevant segments are skipped."""
    scores = []
    for ranking in rankings:
        try:
            scores.append(average_precision(ranking))
        except ValidationError:
            log.warning("query %s has no relevant segment; excluded from MAP",
                        ranking.query_id)
    if not scores:
        raise ValidationError("no query with relevant segments; MAP undefined")
    return float(np.mean(scores))


def _minmax(values: list[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.5] * len(values)
    return [(v - lo) / (hi - lo) for v in values]


def fuse_scores(dtw_ranking: ScoredRanking, model_ranking: ScoredRanking,
                w_dtw: float, w_model: float) -> ScoredRanking:
    """Per-query min-max normalize both score lists, then weight and re-rank."""
    if w_dtw < 0 or w_model < 0 or abs(w_dtw + w_model - 1.0) > 1e-9:
        raise ValidationError("fusion weights must be nonnegative and sum to 1")
    a = {it.segment_id: it for it in dtw_ranking.items}
    b = {it.segment_id: it for it in model_ranking.items}
    if set(a) != set(b):
        raise ValidationError(
            f"rankings for {dtw_ranking.query_id!r} cover different segment sets"
        )
    ids = sorted(a)
    da = dict(zip(ids, _minmax([a[i].score for i in ids])))
    db = dict(zip(ids, _minmax([b[i].score for i in ids])))
    fused = [(i, w_dtw * da[i] + w_model * db[i], a[i].relevant) for i in ids]
    return make_ranking(dtw_ranking.query_id, fused)


@dataclass
class LocalizationRecord:
    pair_id: str
    argmax_frame: int
    span: tuple[int, int]
    offset_seconds: float


@dataclass
class LocalizationReport:
    records: list[LocalizationRecord]
    bin_edges: np.ndarray
    bin_counts: np.ndarray
    fraction_under_1s: float


def localize_attention(entries, frame_period: float, bin_width: float = 0.1
                       ) -> LocalizationReport:
    """Offsets between the attention argmax and the end of each true span.

    ``entries`` are (pair_id, final_hop_weights, (span_start, span_end)).
    Offsets are binned with the given width; also reports the fraction of
    pairs whose |offset| is under one second.
    """
    records = []
    for pair_id, weights, span in entries:
        weights = np.asarray(weights)
        argmax = int(np.argmax(weights))
        offset = (argmax - span[1]) * frame_period
        records.append(LocalizationRecord(pair_id=pair_id, argmax_frame=argmax,
                                          span=tuple(span), offset_seconds=offset))
    if not records:
        log.warning("no positive pairs with spans; localization report is empty")
        return LocalizationReport(records=[], bin_edges=np.zeros(1),
                                  bin_counts=np.zeros(0, dtype=int),
                                  fraction_under_1s=float("nan"))
    offsets = np.array([r.offset_seconds for r in records])
    lo = np.floor(offsets.min() / bin_width) * bin_width
    hi = np.ceil(offsets.max() / bin_width) * bin_width
    n_bins = max(1, int(round((hi - lo) / bin_width)))
    edges = lo + bin_width * np.arange(n_bins + 1)
    counts, _ = np.histogram(offsets, bins=edges)
    return LocalizationReport(
        records=records,
        bin_edges=edges,
        bin_counts=counts,
        fraction_under_1s=float(np.mean(np.abs(offsets) < 1.0)),
    )


def rankings_from_pairs(scored_pairs) -> list[ScoredRanking]:
    """Group (query_id, segment_id, score, relevant) rows into per-query rankings."""
    by_query: dict[str, list] = {}
    for query_id, segment_id, score, relevant in scored_pairs:
        by_query.setdefault(query_id, []).append((segment_id, score, relevant))
    return [make_ranking(qid, rows) for qid, rows in sorted(by_query.items())]
