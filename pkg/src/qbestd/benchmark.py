"""Wall-clock comparison of DTW search against the attention scorer.

For each (M, N) size the harness times three things on one thread:

  dtw             subsequence DTW of an N-frame query against an M-frame segment
  network         end-to-end pair scoring from raw features (both encodes included)
  network_cached  scoring with segment encodings precomputed offline; one query
                  is scored against a batch of cached segments and the per-pair
                  cost reported, which is how a retrieval pass actually amortizes
                  the query encode

Medians over repetitions after a warm-up, plus log-log least-squares exponent
fits of time against M (at the most common N) and against N (at the most
common M).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dtw import DtwConfig, dtw_score
from .errors import ValidationError
from .inference import Scorer
from .model import ModelParams

CACHED_BATCH = 64   # segments per query in the amortized cached-mode timing


@dataclass
class BenchRow:
    method: str
    m: int
    n: int
    hops: int
    median_seconds: float


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    exponents: dict = field(default_factory=dict)   # (method, "M"|"N") -> float

    def csv_rows(self):
        out = []
        for r in self.rows:
            em = self.exponents.get((r.method, "M"), float("nan"))
            en = self.exponents.get((r.method, "N"), float("nan"))
            out.append((r.method, r.m, r.n, r.hops, r.median_seconds, em, en))
        return out


def _median_time(fn, repetitions: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _fit_exponent(points) -> float:
    """Least-squares slope of log(time) against log(size)."""
    sizes = np.log([p[0] for p in points])
    times = np.log([p[1] for p in points])
    if len(points) < 2:
        return float("nan")
    slope, _ = np.polyfit(sizes, times, 1)
    return float(slope)


def benchmark_runtime(params: ModelParams, dtw_cfg: DtwConfig, sizes,
                      repetitions: int = 5, seed: int = 0) -> BenchReport:
    """Time DTW and the network over a list of (M, N) sizes."""
    if repetitions < 3:
        raise ValidationError("need at least 3 repetitions")
    sizes = [(int(m), int(n)) for m, n in sizes]
    if not sizes or any(m < 1 or n < 1 for m, n in sizes):
        raise ValidationError("sizes must be positive (M, N) pairs")
    rng = np.random.default_rng(seed)
    d = params.config.feature_dim
    hops = params.config.hops
    scorer = Scorer(params, cache=False)

    report = BenchReport()
    for m, n in sizes:
        segment = rng.normal(size=(m, d)).astype(np.float32)
        query = rng.normal(size=(n, d)).astype(np.float32)

        report.rows.append(BenchRow(
            "dtw", m, n, 0,
            _median_time(lambda: dtw_score(query, segment, dtw_cfg), repetitions)))

        report.rows.append(BenchRow(
            "network", m, n, hops,
            _median_time(lambda: scorer.score(query, segment), repetitions)))

        cached = [scorer.encode_segment(segment) for _ in range(CACHED_BATCH)]
        report.rows.append(BenchRow(
            "network_cached", m, n, hops,
            _median_time(lambda: scorer.score_against(query, cached), repetitions)
            / CACHED_BATCH))

    by_method: dict[str, list[BenchRow]] = {}
    for row in report.rows:
        by_method.setdefault(row.method, []).append(row)
    for method, rows in by_method.items():
        ns = [r.n for r in rows]
        ms = [r.m for r in rows]
        ref_n = max(set(ns), key=ns.count)
        ref_m = max(set(ms), key=ms.count)
        m_points = [(r.m, r.median_seconds) for r in rows if r.n == ref_n]
        n_points = [(r.n, r.median_seconds) for r in rows if r.m == ref_m]
        if len({p[0] for p in m_points}) >= 2:
            report.exponents[(method, "M")] = _fit_exponent(m_points)
        if len({p[0] for p in n_points}) >= 2:
            report.exponents[(method, "N")] = _fit_exponent(n_points)
    return report
