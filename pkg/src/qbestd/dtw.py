"""Subsequence and global DTW between a query and a longer segment.

Reference dynamic-programming implementation: the accumulated-cost table is
filled cell by cell with steps {(1,0), (0,1), (1,1)} over (query, segment)
coordinates, evaluating the frame distance on the fly, so measured runtime is
genuinely proportional to M*N. In subsequence mode the alignment may start
and end anywhere in the segment (first query row carries no entry cost and
the best exit is taken over the whole last row).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .features import FeatureSequence

_STEP_NONE = 0   # path start
_STEP_DIAG = 1   # from (i-1, j-1)
_STEP_UP = 2     # from (i-1, j)
_STEP_LEFT = 3   # from (i, j-1)


@dataclass
class DtwConfig:
    frame_distance: str = "one_minus_cosine"   # or "euclidean"
    mode: str = "subsequence"                  # or "global"
    normalization: str = "path_length"         # or "query_length"

    def validate(self) -> "DtwConfig":
        if self.frame_distance not in ("euclidean", "one_minus_cosine"):
            raise ValidationError(f"unknown frame_distance {self.frame_distance!r}")
        if self.mode not in ("subsequence", "global"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.normalization not in ("path_length", "query_length"):
            raise ValidationError(f"unknown normalization {self.normalization!r}")
        return self


@dataclass
class DtwResult:
    similarity: float
    raw_cost: float
    normalized_cost: float
    best_span: tuple[int, int]
    path: list[tuple[int, int]]


def _as_frames(x) -> np.ndarray:
    frames = x.frames if isinstance(x, FeatureSequence) else x
    return np.ascontiguousarray(frames, dtype=np.float64)


def dtw_score(query, segment, cfg: DtwConfig | None = None) -> DtwResult:
    """Align ``query`` against ``segment`` and return cost, span and path."""
    cfg = (cfg or DtwConfig()).validate()
    q = _as_frames(query)
    s = _as_frames(segment)
    if q.ndim != 2 or s.ndim != 2 or q.shape[1] != s.shape[1]:
        raise ValidationError(
            f"query/segment feature dims differ: {q.shape} vs {s.shape}"
        )
    n, m = len(q), len(s)
    if n < 1 or m < 1:
        raise ValidationError("query and segment must contain at least one frame")

    cosine = cfg.frame_distance == "one_minus_cosine"
    if cosine:
        qn = np.sqrt((q * q).sum(axis=1))
        sn = np.sqrt((s * s).sum(axis=1))
        # zero-norm frames fall back to distance 1 (cosine guard)
        qn = np.where(qn < 1e-12, np.inf, qn)
        sn = np.where(sn < 1e-12, np.inf, sn)

    subseq = cfg.mode == "subsequence"
    steps = np.empty((n, m), dtype=np.uint8)
    inf = float("inf")
    prev: list[float] = []
    cur = [0.0] * m
    for i in range(n):
        qi = q[i]
        if cosine:
            qni = qn[i]
        for j in range(m):
            if cosine:
                d = 1.0 - float(qi @ s[j]) / (qni * sn[j]) if qni * sn[j] != inf else 1.0
            else:
                diff = qi - s[j]
                d = float(np.sqrt(diff @ diff))
            if i == 0:
                if subseq or j == 0:
                    cur[j] = d
                    steps[0, j] = _STEP_NONE
                else:
                    cur[j] = cur[j - 1] + d
                    steps[0, j] = _STEP_LEFT
            else:
                best = prev[j]
                step = _STEP_UP
                if j > 0:
                    if prev[j - 1] <= best:
                        best = prev[j - 1]
                        step = _STEP_DIAG
                    if cur[j - 1] < best:
                        best = cur[j - 1]
                        step = _STEP_LEFT
                cur[j] = best + d
                steps[i, j] = step
        prev, cur = cur, prev if prev else [0.0] * m

    last = prev  # after the swap, ``prev`` holds row n-1
    if subseq:
        end = min(range(m), key=lambda j: last[j])
    else:
        end = m - 1
    raw_cost = float(last[end])

    path = []
    i, j = n - 1, end
    while True:
        path.append((i, j))
        step = steps[i, j]
        if step == _STEP_NONE:
            break
        if step == _STEP_DIAG:
            i, j = i - 1, j - 1
        elif step == _STEP_UP:
            i -= 1
        else:
            j -= 1
    path.reverse()

    denom = len(path) if cfg.normalization == "path_length" else n
    normalized = raw_cost / denom
    similarity = 1.0 / (1.0 + normalized)
    return DtwResult(
        similarity=similarity,
        raw_cost=raw_cost,
        normalized_cost=normalized,
        best_span=(path[0][1], path[-1][1]),
        path=path,
    )


def dtw_score_batch(query, segments, cfg: DtwConfig | None = None) -> list[DtwResult]:
    """dtw_score over a list of segments, preserving order."""
    results = []
    for idx, segment in enumerate(segments):
        try:
            results.append(dtw_score(query, segment, cfg))
        except Exception as exc:
            raise type(exc)(f"segment index {idx}: {exc}") from exc
    return results


def normalize_teacher_scores(scores) -> list[float]:
    """Min-max map onto [0,1]; a constant list maps to all 0.5."""
    scores = [float(x) for x in scores]
    if not scores:
        raise ValidationError("cannot normalize an empty score list")
    lo, hi = min(scores), max(scores)
    if hi == lo:
        return [0.5] * len(scores)
    return [(x - lo) / (hi - lo) for x in scores]
