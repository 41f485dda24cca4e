import numpy as np
import pytest

from qbestd import evaluation as ev
from qbestd.errors import ValidationError


def ranking_from_relevance(pattern, query_id="q"):
    # scores decreasing so the given relevance order is the rank order
    scored = [(f"s{k}", 1.0 - 0.1 * k, bool(r)) for k, r in enumerate(pattern)]
    return ev.make_ranking(query_id, scored)


def test_average_precision_hand_case():
    # relevance by rank [1, 0, 1] -> (1/1 + 2/3) / 2
    r = ranking_from_relevance([1, 0, 1])
    assert ev.average_precision(r) == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)


def test_average_precision_edge_cases():
    assert ev.average_precision(ranking_from_relevance([1, 1, 1, 1])) == 1.0
    for n in (3, 6):
        for k in range(1, n + 1):
            pattern = [0] * n
            pattern[k - 1] = 1
            assert ev.average_precision(ranking_from_relevance(pattern)) == pytest.approx(1.0 / k)
    with pytest.raises(ValidationError):
        ev.average_precision(ranking_from_relevance([0, 0, 0]))


def test_ap_invariant_under_monotone_transform(rng):
    for _ in range(20):
        n = int(rng.integers(3, 30))
        scores = rng.normal(size=n)
        relevant = rng.uniform(size=n) < 0.4
        if not relevant.any():
            relevant[0] = True
        base = ev.make_ranking("q", [(f"s{k}", scores[k], bool(relevant[k]))
                                     for k in range(n)])
        transformed = ev.make_ranking("q", [(f"s{k}", float(np.exp(3 * scores[k])),
                                             bool(relevant[k])) for k in range(n)])
        assert ev.average_precision(base) == pytest.approx(
            ev.average_precision(transformed))


def test_tie_break_by_segment_id():
    r = ev.make_ranking("q", [("b", 0.5, True), ("a", 0.5, False), ("c", 0.9, False)])
    assert [it.segment_id for it in r.items] == ["c", "a", "b"]


def test_map_mean_and_exclusions():
    rankings = [ranking_from_relevance([1, 1], "q1"),        # AP 1.0
                ranking_from_relevance([0, 1], "q2"),        # AP 0.5
                ranking_from_relevance([0, 0], "q3")]        # excluded
    assert ev.mean_average_precision(rankings) == pytest.approx(0.75)
    assert ev.mean_average_precision(rankings[:1]) == 1.0
    with pytest.raises(ValidationError):
        ev.mean_average_precision([ranking_from_relevance([0, 0])])


def test_map_random_scores_monte_carlo():
    # MAP of a random scorer on balanced data approaches the positive fraction
    rng = np.random.default_rng(0)
    rankings = []
    for q in range(1000):
        scores = rng.normal(size=50)
        relevant = np.zeros(50, dtype=bool)
        relevant[:25] = True
        rng.shuffle(relevant)
        rankings.append(ev.make_ranking(
            f"q{q}", [(f"s{k}", float(scores[k]), bool(relevant[k])) for k in range(50)]))
    result = ev.mean_average_precision(rankings)
    assert result == pytest.approx(0.5, abs=0.05)


def test_map_perfect_scorer():
    rng = np.random.default_rng(1)
    rankings = []
    for q in range(50):
        relevant = rng.uniform(size=20) < 0.5
        if not relevant.any():
            relevant[0] = True
        rankings.append(ev.make_ranking(
            f"q{q}", [(f"s{k}", 1.0 if relevant[k] else 0.0, bool(relevant[k]))
                      for k in range(20)]))
    assert ev.mean_average_precision(rankings) == 1.0


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

def _pair_rankings(rng, n=6):
    ids = [f"s{k}" for k in range(n)]
    rel = [bool(rng.uniform() < 0.5) for _ in range(n)]
    a = ev.make_ranking("q", [(i, float(rng.normal()), r) for i, r in zip(ids, rel)])
    b = ev.make_ranking("q", [(i, float(rng.uniform()), r) for i, r in zip(ids, rel)])
    return a, b


def test_fusion_degenerate_weights(rng):
    a, b = _pair_rankings(rng)
    fused_a = ev.fuse_scores(a, b, w_dtw=1.0, w_model=0.0)
    assert [it.segment_id for it in fused_a.items] == [it.segment_id for it in a.items]
    fused_b = ev.fuse_scores(a, b, w_dtw=0.0, w_model=1.0)
    assert [it.segment_id for it in fused_b.items] == [it.segment_id for it in b.items]


def test_fusion_hand_arithmetic():
    # 3 segments, hand-computed min-max normalization and 0.4/0.6 weighting
    dtw = ev.make_ranking("q", [("a", 0.2, True), ("b", 0.6, False), ("c", 0.4, True)])
    model = ev.make_ranking("q", [("a", 0.9, True), ("b", 0.1, False), ("c", 0.5, True)])
    fused = ev.fuse_scores(dtw, model, w_dtw=0.4, w_model=0.6)
    # dtw normalized: a=0, b=1, c=0.5; model normalized: a=1, b=0, c=0.5
    expected = {"a": 0.4 * 0.0 + 0.6 * 1.0, "b": 0.4 * 1.0, "c": 0.4 * 0.5 + 0.6 * 0.5}
    for item in fused.items:
        assert item.score == pytest.approx(expected[item.segment_id])
    assert [it.segment_id for it in fused.items] == ["a", "c", "b"]


def test_fusion_identical_rankings_identity(rng):
    a, _ = _pair_rankings(rng)
    for w in (0.0, 0.3, 1.0):
        fused = ev.fuse_scores(a, a, w_dtw=w, w_model=1.0 - w)
        assert [it.segment_id for it in fused.items] == [it.segment_id for it in a.items]


def test_fusion_validation(rng):
    a, b = _pair_rankings(rng)
    with pytest.raises(ValidationError):
        ev.fuse_scores(a, b, w_dtw=0.7, w_model=0.7)
    short = ev.make_ranking("q", [("s0", 1.0, True)])
    with pytest.raises(ValidationError):
        ev.fuse_scores(a, short, w_dtw=0.5, w_model=0.5)


# ---------------------------------------------------------------------------
# localization
# ---------------------------------------------------------------------------

def test_localization_zero_offset():
    weights = np.zeros(30)
    weights[12] = 1.0
    report = ev.localize_attention([("p0", weights, (5, 12))], frame_period=0.1)
    rec = report.records[0]
    assert rec.argmax_frame == 12
    assert rec.offset_seconds == 0.0
    # falls in a bin adjacent to zero
    idx = np.searchsorted(report.bin_edges, 0.0, side="right") - 1
    assert report.bin_counts[idx] == 1


def test_localization_offsets_and_fraction():
    entries = []
    for k, argmax in enumerate([10, 20, 45]):
        w = np.zeros(50)
        w[argmax] = 1.0
        entries.append((f"p{k}", w, (8, 15)))
    report = ev.localize_attention(entries, frame_period=0.1)
    offsets = [r.offset_seconds for r in report.records]
    assert offsets == pytest.approx([-0.5, 0.5, 3.0])
    assert report.fraction_under_1s == pytest.approx(2 / 3)
    assert report.bin_counts.sum() == 3


def test_localization_histogram_partition(rng):
    entries = []
    for k in range(40):
        w = rng.uniform(size=60)
        entries.append((f"p{k}", w, (10, 20)))
    report = ev.localize_attention(entries, frame_period=0.05)
    assert report.bin_counts.sum() == 40
    # bins are contiguous with the declared width
    widths = np.diff(report.bin_edges)
    assert np.allclose(widths, 0.1, atol=1e-9)


def test_localization_empty():
    report = ev.localize_attention([], frame_period=0.1)
    assert report.records == []
    assert np.isnan(report.fraction_under_1s)


def test_rankings_from_pairs_groups_by_query():
    rows = [("q1", "s1", 0.9, True), ("q1", "s2", 0.1, False),
            ("q2", "s1", 0.2, False), ("q2", "s3", 0.8, True)]
    rankings = ev.rankings_from_pairs(rows)
    assert [r.query_id for r in rankings] == ["q1", "q2"]
    assert ev.mean_average_precision(rankings) == 1.0
