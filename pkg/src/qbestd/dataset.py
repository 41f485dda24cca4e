"""Dataset manifests and the synthetic query/segment generator.

A manifest is a JSON file tying query and segment ids to QBEF feature files
and listing (query, segment) pairs with labels, teacher scores and, for
synthetic positives, the exact frame span of the embedded term:

    {
      "feature_dim": 8,
      "feature_stats": {"mean": [...], "std": [...]},   # optional, train-set stats
      "queries":  [{"id": ..., "file": ..., "keyword": ...}, ...],
      "segments": [{"id": ..., "file": ...}, ...],
      "pairs":    [{"query_id": ..., "segment_id": ..., "label": true,
                    "teacher_score": 0.7, "span": [s, e]}, ...]
    }
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConfigError, ValidationError
from .features import FeatureSequence, load_features, read_qbef_header, write_features


@dataclass
class QuerySegmentPair:
    query_id: str
    segment_id: str
    label: bool | None = None
    teacher_score: float | None = None
    span: tuple[int, int] | None = None

    def to_json(self) -> dict:
        out = {"query_id": self.query_id, "segment_id": self.segment_id}
        if self.label is not None:
            out["label"] = self.label
        if self.teacher_score is not None:
            out["teacher_score"] = self.teacher_score
        if self.span is not None:
            out["span"] = list(self.span)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "QuerySegmentPair":
        span = obj.get("span")
        return cls(
            query_id=obj["query_id"],
            segment_id=obj["segment_id"],
            label=obj.get("label"),
            teacher_score=obj.get("teacher_score"),
            span=tuple(span) if span is not None else None,
        )


@dataclass
class DatasetManifest:
    feature_dim: int
    queries: dict[str, dict] = field(default_factory=dict)   # id -> {"file": ..., ...}
    segments: dict[str, dict] = field(default_factory=dict)
    pairs: list[QuerySegmentPair] = field(default_factory=list)
    feature_stats: dict | None = None                        # {"mean": [...], "std": [...]}
    root: Path | None = None                                 # directory file paths resolve against

    def query_path(self, query_id: str) -> Path:
        return self._resolve(self.queries[query_id]["file"])

    def segment_path(self, segment_id: str) -> Path:
        return self._resolve(self.segments[segment_id]["file"])

    def _resolve(self, rel: str) -> Path:
        p = Path(rel)
        if self.root is not None and not p.is_absolute():
            p = self.root / p
        return p

    def to_json(self) -> dict:
        out = {
            "feature_dim": self.feature_dim,
            "queries": [dict(id=qid, **info) for qid, info in self.queries.items()],
            "segments": [dict(id=sid, **info) for sid, info in self.segments.items()],
            "pairs": [p.to_json() for p in self.pairs],
        }
        if self.feature_stats is not None:
            out["feature_stats"] = self.feature_stats
        return out


def rebase_manifest(manifest: DatasetManifest, new_root) -> None:
    """Rewrite feature-file paths so they resolve from ``new_root``."""
    import os

    new_root = Path(new_root)
    for table in (manifest.queries, manifest.segments):
        for info in table.values():
            resolved = manifest._resolve(info["file"])
            info["file"] = os.path.relpath(resolved, new_root)
    manifest.root = new_root


def save_manifest(manifest: DatasetManifest, path, extra: dict | None = None) -> None:
    """Write the manifest; file paths are rebased onto the manifest's directory."""
    path = Path(path)
    if manifest.root is None:
        manifest.root = path.parent
    elif manifest.root.resolve() != path.parent.resolve():
        rebase_manifest(manifest, path.parent)
    obj = manifest.to_json()
    if extra:
        obj.update(extra)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        obj = json.load(fh)
    man = DatasetManifest(feature_dim=int(obj["feature_dim"]), root=path.parent)
    for entry in obj.get("queries", []):
        entry = dict(entry)
        man.queries[entry.pop("id")] = entry
    for entry in obj.get("segments", []):
        entry = dict(entry)
        man.segments[entry.pop("id")] = entry
    man.pairs = [QuerySegmentPair.from_json(p) for p in obj.get("pairs", [])]
    man.feature_stats = obj.get("feature_stats")
    return man


def validate_manifest(manifest: DatasetManifest, check_files: bool = True) -> None:
    """Referential integrity: ids resolve, dims match, pairs unique, spans in range."""
    seen = set()
    for pair in manifest.pairs:
        key = (pair.query_id, pair.segment_id)
        if key in seen:
            raise ValidationError(f"duplicate pair {key}")
        seen.add(key)
        if pair.query_id not in manifest.queries:
            raise ValidationError(f"pair references unknown query {pair.query_id!r}")
        if pair.segment_id not in manifest.segments:
            raise ValidationError(f"pair references unknown segment {pair.segment_id!r}")
        if pair.teacher_score is not None and not (0.0 <= pair.teacher_score <= 1.0):
            raise ValidationError(f"teacher score {pair.teacher_score} outside [0,1] for {key}")
        if pair.span is not None and pair.label is not True:
            raise ValidationError(f"span present without positive label for {key}")
    if not check_files:
        return
    seg_len = {}
    for kind, table in (("query", manifest.queries), ("segment", manifest.segments)):
        for fid, info in table.items():
            path = manifest._resolve(info["file"])
            if not path.exists():
                raise ValidationError(f"{kind} {fid!r} file missing: {path}")
            t, d, _ = read_qbef_header(path)
            if d != manifest.feature_dim:
                raise ValidationError(
                    f"{kind} {fid!r} has dim {d}, manifest declares {manifest.feature_dim}"
                )
            if kind == "segment":
                seg_len[fid] = t
    for pair in manifest.pairs:
        if pair.span is not None:
            start, end = pair.span
            if not (0 <= start <= end < seg_len[pair.segment_id]):
                raise ValidationError(
                    f"span {pair.span} outside segment {pair.segment_id!r} "
                    f"of length {seg_len[pair.segment_id]}"
                )


def compute_feature_stats(manifest: DatasetManifest) -> dict:
    """Per-dimension mean/std over every feature file referenced by the manifest."""
    total = np.zeros(manifest.feature_dim)
    total_sq = np.zeros(manifest.feature_dim)
    count = 0
    for table, getter in ((manifest.queries, manifest.query_path),
                          (manifest.segments, manifest.segment_path)):
        for fid in table:
            frames = load_features(getter(fid), seq_id=fid).frames.astype(np.float64)
            total += frames.sum(axis=0)
            total_sq += (frames * frames).sum(axis=0)
            count += len(frames)
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), 1e-8)
    return {"mean": mean.tolist(), "std": std.tolist()}


def load_all_features(manifest: DatasetManifest, normalized: bool = True
                      ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], float]:
    """Load every query/segment into memory as float32 arrays.

    Normalization uses the manifest's stored train-set stats so train and test
    features go through the identical affine map.
    """
    mean = std = None
    if normalized and manifest.feature_stats is not None:
        mean = np.asarray(manifest.feature_stats["mean"], dtype=np.float32)
        std = np.asarray(manifest.feature_stats["std"], dtype=np.float32)

    def _load(path, fid):
        frames = load_features(path, seq_id=fid).frames
        if mean is not None:
            frames = (frames - mean) / std
        return frames

    queries = {qid: _load(manifest.query_path(qid), qid) for qid in manifest.queries}
    segments = {sid: _load(manifest.segment_path(sid), sid) for sid in manifest.segments}
    period = None
    for qid in manifest.queries:
        _, _, period = read_qbef_header(manifest.query_path(qid))
        break
    return queries, segments, period if period is not None else 0.0


# ---------------------------------------------------------------------------
# Synthetic data generation
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Desk-scale stand-in for a labeled spoken-term corpus.

    Each keyword is a smooth random trajectory (cubic spline through Gaussian
    control points). Query files and embedded occurrences are instances of a
    keyword: the trajectory uniformly time-stretched by a factor drawn from
    ``warp`` and perturbed with i.i.d. Gaussian noise of std ``noise_sigma``.
    Positive segments embed an instance of the query's keyword at a recorded
    span inside i.i.d. Gaussian background; negatives contain background only
    or a decoy instance of a different keyword.

    DTW separation between positives and negatives (median positive alignment
    cost below median negative cost) holds comfortably for noise_sigma <= 0.8
    at the default amplitude; beyond that the task degrades gracefully.
    """

    keywords: int = 20
    pairs_per_keyword: int = 100
    test_pairs_per_keyword: int = 25
    holdout_keywords: int = 0          # keywords excluded from training pairs entirely
    queries_per_keyword: int = 4       # distinct training query instances per keyword
    test_queries_per_keyword: int = 1  # fresh query instances for the test split
    feature_dim: int = 8
    keyword_frames: tuple[int, int] = (8, 12)
    segment_frames: tuple[int, int] = (90, 120)
    noise_sigma: float = 0.6
    warp: tuple[float, float] = (0.8, 1.25)
    positive_fraction: float = 0.5
    decoy_prob: float = 0.7
    frame_period: float = 0.1
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.keywords < 1:
            raise ConfigError("need at least one keyword")
        if not (0 <= self.holdout_keywords < self.keywords):
            raise ConfigError("holdout_keywords must leave at least one training keyword")
        if self.pairs_per_keyword < 1 or self.queries_per_keyword < 1:
            raise ConfigError("pairs_per_keyword and queries_per_keyword must be >= 1")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if not (0.0 <= self.positive_fraction <= 1.0):
            raise ConfigError("positive_fraction must lie in [0,1]")
        if not (0.0 <= self.decoy_prob <= 1.0):
            raise ConfigError("decoy_prob must lie in [0,1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        lo, hi = self.warp
        if not (0 < lo <= hi):
            raise ConfigError("warp range must be positive and ordered")
        kmin, kmax = self.keyword_frames
        smin, smax = self.segment_frames
        if not (2 <= kmin <= kmax) or not (2 <= smin <= smax):
            raise ConfigError("frame ranges must be ordered and >= 2")
        max_occurrence = int(round(kmax * hi))
        if max_occurrence > smin:
            raise ConfigError(
                f"longest warped keyword ({max_occurrence} frames) does not fit the "
                f"shortest segment ({smin} frames)"
            )
        return self


class _Keyword:
    """A keyword prototype: spline over control points, instantiated on demand."""

    def __init__(self, length: int, dim: int, rng: np.random.Generator):
        self.length = length
        n_ctrl = max(4, length // 3 + 2)
        knots = np.linspace(0.0, length - 1.0, n_ctrl)
        self.spline = CubicSpline(knots, rng.normal(0.0, 1.0, size=(n_ctrl, dim)), axis=0)

    def instance(self, warp: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
        n = max(2, int(round(self.length * warp)))
        traj = self.spline(np.linspace(0.0, self.length - 1.0, n))
        if sigma > 0:
            traj = traj + rng.normal(0.0, sigma, size=traj.shape)
        return traj.astype(np.float32)


def generate_synthetic_dataset(config: SynthConfig, out_dir) -> tuple[DatasetManifest, DatasetManifest]:
    """Write feature files plus train.json / test.json under ``out_dir``.

    Returns (train_manifest, test_manifest). Test pairs use fresh keyword
    instances; with holdout_keywords > 0 the test split is restricted to the
    held-out keywords (queries the model never trained on).

    Generation is fully deterministic given config.seed: rerunning with the
    same config produces byte-identical feature files and manifests.
    """
    config.validate()
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)

    keywords = []
    for k in range(config.keywords):
        length = int(rng.integers(config.keyword_frames[0], config.keyword_frames[1] + 1))
        keywords.append(_Keyword(length, config.feature_dim, rng))

    train_kw = list(range(config.keywords - config.holdout_keywords))
    test_kw = (list(range(config.keywords - config.holdout_keywords, config.keywords))
               if config.holdout_keywords > 0 else list(range(config.keywords)))

    counters = {"segment": 0}

    def new_instance(kw_idx: int) -> np.ndarray:
        warp = rng.uniform(*config.warp)
        return keywords[kw_idx].instance(warp, config.noise_sigma, rng)

    def write_seq(frames: np.ndarray, fid: str) -> str:
        rel = f"features/{fid}.qbef"
        write_features(
            FeatureSequence(frames=frames, frame_period=config.frame_period, id=fid),
            out_dir / rel,
        )
        return rel

    def make_segment(kw_idx: int, positive: bool, decoy_pool: list[int]
                     ) -> tuple[str, str, tuple[int, int] | None]:
        length = int(rng.integers(config.segment_frames[0], config.segment_frames[1] + 1))
        frames = rng.normal(0.0, 1.0, size=(length, config.feature_dim)).astype(np.float32)
        span = None
        embed_idx = None
        if positive:
            embed_idx = kw_idx
        elif decoy_pool and rng.uniform() < config.decoy_prob:
            choices = [k for k in decoy_pool if k != kw_idx]
            if choices:
                embed_idx = int(choices[int(rng.integers(len(choices)))])
        if embed_idx is not None:
            inst = new_instance(embed_idx)
            start = int(rng.integers(0, length - len(inst) + 1))
            frames[start : start + len(inst)] = inst
            if positive:
                span = (start, start + len(inst) - 1)
        sid = f"seg{counters['segment']:05d}"
        counters["segment"] += 1
        rel = write_seq(frames, sid)
        return sid, rel, span

    def build_split(kw_list, pairs_per_kw, queries_per_kw, tag) -> DatasetManifest:
        man = DatasetManifest(feature_dim=config.feature_dim, root=out_dir)
        for kw_idx in kw_list:
            qids = []
            for qi in range(queries_per_kw):
                qid = f"q-{tag}-kw{kw_idx:03d}-{qi:02d}"
                rel = write_seq(new_instance(kw_idx), qid)
                man.queries[qid] = {"file": rel, "keyword": f"kw{kw_idx:03d}"}
                qids.append(qid)
            n_pos = int(round(pairs_per_kw * config.positive_fraction))
            for i in range(pairs_per_kw):
                positive = i < n_pos
                qid = qids[i % len(qids)]
                sid, rel, span = make_segment(kw_idx, positive, decoy_pool=train_kw)
                man.segments[sid] = {"file": rel}
                man.pairs.append(
                    QuerySegmentPair(query_id=qid, segment_id=sid, label=positive, span=span)
                )
        return man

    train = build_split(train_kw, config.pairs_per_keyword, config.queries_per_keyword, "tr")
    test = build_split(test_kw, config.test_pairs_per_keyword,
                       config.test_queries_per_keyword, "te")

    stats = compute_feature_stats(train)
    train.feature_stats = stats
    test.feature_stats = stats
    save_manifest(train, out_dir / "train.json")
    save_manifest(test, out_dir / "test.json")
    return train, test
