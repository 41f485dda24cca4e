import json

import numpy as np
import pytest

from qbestd import dataset as ds
from qbestd.dtw import DtwConfig, dtw_score
from qbestd.errors import ConfigError, ValidationError
from qbestd.features import FeatureSequence, write_features


def small_config(**kw):
    base = dict(keywords=4, pairs_per_keyword=12, test_pairs_per_keyword=6,
                queries_per_keyword=2, test_queries_per_keyword=1,
                feature_dim=5, keyword_frames=(6, 9), segment_frames=(30, 40),
                noise_sigma=0.3, warp=(0.9, 1.1), seed=7)
    base.update(kw)
    return ds.SynthConfig(**base)


def test_generation_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    ds.generate_synthetic_dataset(small_config(), a)
    ds.generate_synthetic_dataset(small_config(), b)
    for rel in ("train.json", "test.json"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    files_a = sorted(p.name for p in (a / "features").iterdir())
    files_b = sorted(p.name for p in (b / "features").iterdir())
    assert files_a == files_b
    for name in files_a:
        assert (a / "features" / name).read_bytes() == (b / "features" / name).read_bytes()


def test_noiseless_positive_contains_exact_copy(tmp_path):
    cfg = small_config(noise_sigma=0.0, warp=(1.0, 1.0), keywords=2,
                       pairs_per_keyword=6, queries_per_keyword=1)
    train, _ = ds.generate_synthetic_dataset(cfg, tmp_path)
    queries, segments, _ = ds.load_all_features(train, normalized=False)
    checked = 0
    for pair in train.pairs:
        if not pair.label:
            continue
        q = queries[pair.query_id]
        seg = segments[pair.segment_id]
        lo, hi = pair.span
        assert np.allclose(seg[lo : hi + 1], q, atol=1e-6)
        checked += 1
    assert checked > 0


def test_pair_counts_and_balance(tmp_path):
    cfg = small_config(keywords=5, pairs_per_keyword=10, positive_fraction=0.5)
    train, test = ds.generate_synthetic_dataset(cfg, tmp_path)
    assert len(train.pairs) == 50
    labels = [p.label for p in train.pairs]
    assert sum(labels) == 25
    assert len(test.pairs) == 5 * cfg.test_pairs_per_keyword
    # spans only on positives, and valid
    ds.validate_manifest(train)
    ds.validate_manifest(test)


def test_holdout_keywords_absent_from_training(tmp_path):
    cfg = small_config(keywords=5, holdout_keywords=2)
    train, test = ds.generate_synthetic_dataset(cfg, tmp_path)
    train_kws = {info["keyword"] for info in train.queries.values()}
    test_kws = {info["keyword"] for info in test.queries.values()}
    assert len(train_kws) == 3
    assert len(test_kws) == 2
    assert train_kws.isdisjoint(test_kws)


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        small_config(keywords=0).validate()
    with pytest.raises(ConfigError):
        # warped keyword cannot exceed the shortest segment
        small_config(keyword_frames=(30, 40), segment_frames=(30, 35)).validate()
    with pytest.raises(ConfigError):
        small_config(positive_fraction=1.5).validate()
    with pytest.raises(ConfigError):
        small_config(holdout_keywords=4).validate()


def test_manifest_roundtrip(tmp_path):
    train, _ = ds.generate_synthetic_dataset(small_config(), tmp_path)
    loaded = ds.load_manifest(tmp_path / "train.json")
    assert loaded.feature_dim == train.feature_dim
    assert set(loaded.queries) == set(train.queries)
    assert len(loaded.pairs) == len(train.pairs)
    assert loaded.feature_stats is not None
    ds.validate_manifest(loaded)


def test_manifest_rejects_dangling_and_duplicates(tmp_path):
    train, _ = ds.generate_synthetic_dataset(small_config(), tmp_path)
    broken = ds.load_manifest(tmp_path / "train.json")
    broken.pairs.append(ds.QuerySegmentPair(query_id="ghost", segment_id="seg00000",
                                            label=False))
    with pytest.raises(ValidationError, match="unknown query"):
        ds.validate_manifest(broken)

    dup = ds.load_manifest(tmp_path / "train.json")
    dup.pairs.append(dup.pairs[0])
    with pytest.raises(ValidationError, match="duplicate"):
        ds.validate_manifest(dup)


def test_manifest_rejects_dim_mismatch(tmp_path):
    train, _ = ds.generate_synthetic_dataset(small_config(), tmp_path)
    man = ds.load_manifest(tmp_path / "train.json")
    qid = next(iter(man.queries))
    write_features(FeatureSequence(frames=np.zeros((4, 3), dtype=np.float32),
                                   frame_period=0.1, id=qid),
                   man.query_path(qid))
    with pytest.raises(ValidationError, match="dim"):
        ds.validate_manifest(man)


def test_manifest_rejects_bad_span(tmp_path):
    train, _ = ds.generate_synthetic_dataset(small_config(), tmp_path)
    man = ds.load_manifest(tmp_path / "train.json")
    positive = next(p for p in man.pairs if p.span is not None)
    positive.span = (0, 10_000)
    with pytest.raises(ValidationError, match="span"):
        ds.validate_manifest(man)
    positive.span = (0, 1)
    positive.label = False
    with pytest.raises(ValidationError, match="span"):
        ds.validate_manifest(man)


def test_feature_stats_normalization(tmp_path):
    train, test = ds.generate_synthetic_dataset(small_config(), tmp_path)
    assert test.feature_stats == train.feature_stats
    queries, segments, period = ds.load_all_features(train)
    allfeat = np.vstack([*queries.values(), *segments.values()])
    assert np.abs(allfeat.mean(axis=0)).max() < 0.05
    assert np.abs(allfeat.std(axis=0) - 1.0).max() < 0.05
    assert period == pytest.approx(small_config().frame_period)


def test_dtw_separates_positives_from_negatives(tmp_path):
    # documented separation threshold: holds for noise_sigma <= 0.8
    cfg = small_config(keywords=6, pairs_per_keyword=20, noise_sigma=0.6,
                       segment_frames=(25, 35), seed=11)
    train, _ = ds.generate_synthetic_dataset(cfg, tmp_path)
    queries, segments, _ = ds.load_all_features(train)
    pos, neg = [], []
    for pair in train.pairs:
        r = dtw_score(queries[pair.query_id], segments[pair.segment_id], DtwConfig())
        (pos if pair.label else neg).append(r.normalized_cost)
    assert len(pos) >= 50 and len(neg) >= 50
    assert np.median(pos) < np.median(neg)
