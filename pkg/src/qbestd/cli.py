"""Command-line entry point.

Subcommands: generate, featurize, teacher, train, search, eval, attention,
bench. Every output file carries the resolved run configuration (a sorted
key=value echo) so any reported number can be traced back to its flags.
Exit codes: 0 success, 1 runtime failure, 2 usage/validation error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import dtw as dtwmod
from . import evaluation as ev
from . import model as mdl
from . import training as tr
from .benchmark import benchmark_runtime
from .errors import ConfigError, DataError, FormatError, QbeError, ValidationError
from .features import extract_mfcc, read_wav, write_features
from .inference import Scorer


def _echo(args: argparse.Namespace) -> dict:
    skip = {"func"}
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        out[key] = str(value) if isinstance(value, Path) else value
    return out


def _echo_line(echo: dict) -> str:
    parts = [f"{k}={v}" for k, v in sorted(echo.items())]
    return "# qbestd " + " ".join(parts)


def _write_csv(path, echo: dict, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_echo_line(echo) + "\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _sub_seed(seed: int, name: str) -> int:
    # stable per-module sub-seed derived from the single --seed flag
    import zlib
    return (seed * 1_000_003 + zlib.crc32(name.encode())) % (2**31)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = ds.SynthConfig(
        keywords=args.keywords,
        pairs_per_keyword=args.pairs_per_keyword,
        test_pairs_per_keyword=args.test_pairs_per_keyword,
        holdout_keywords=args.holdout_keywords,
        queries_per_keyword=args.queries_per_keyword,
        test_queries_per_keyword=args.test_queries_per_keyword,
        feature_dim=args.feature_dim,
        keyword_frames=(args.keyword_frames[0], args.keyword_frames[1]),
        segment_frames=(args.segment_frames[0], args.segment_frames[1]),
        noise_sigma=args.noise,
        warp=(args.warp[0], args.warp[1]),
        positive_fraction=args.positive_fraction,
        decoy_prob=args.decoy_prob,
        frame_period=args.frame_period,
        seed=_sub_seed(args.seed, "generate"),
    )
    out = Path(args.out)
    train_man, test_man = ds.generate_synthetic_dataset(cfg, out)
    echo = _echo(args)
    ds.save_manifest(train_man, out / "train.json", extra={"run_config": echo})
    ds.save_manifest(test_man, out / "test.json", extra={"run_config": echo})
    print(f"wrote {len(train_man.pairs)} train pairs, {len(test_man.pairs)} test pairs "
          f"under {out}")
    return 0


def cmd_featurize(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wavs = sorted(Path(args.wav_dir).glob("*.wav"))
    if not wavs:
        raise ValidationError(f"no .wav files under {args.wav_dir}")
    for wav in wavs:
        samples, rate = read_wav(wav)
        seq = extract_mfcc(samples, rate, seq_id=wav.stem)
        write_features(seq, out / (wav.stem + ".qbef"))
    print(f"featurized {len(wavs)} files into {out}")
    return 0


def cmd_teacher(args) -> int:
    manifest = ds.load_manifest(args.manifest)
    ds.validate_manifest(manifest)
    queries, segments, _ = ds.load_all_features(manifest)
    cfg = dtwmod.DtwConfig(frame_distance=args.distance, mode=args.mode,
                           normalization=args.normalization)
    sims = []
    for pair in manifest.pairs:
        result = dtwmod.dtw_score(queries[pair.query_id], segments[pair.segment_id], cfg)
        sims.append(result.similarity)
    for pair, score in zip(manifest.pairs, dtwmod.normalize_teacher_scores(sims)):
        pair.teacher_score = score
    ds.save_manifest(manifest, args.out, extra={"run_config": _echo(args)})
    print(f"wrote teacher scores for {len(manifest.pairs)} pairs to {args.out}")
    return 0


def _model_config(args, feature_dim: int) -> mdl.ModelConfig:
    return mdl.ModelConfig(
        feature_dim=feature_dim,
        hidden_dim=args.hidden,
        lstm_layers=args.layers,
        hops=args.hops,
        detector=args.detector.replace("-", "_"),
        pooling=args.pooling.replace("-", "_"),
        detector_query=args.detector_query,
        init_seed=_sub_seed(args.seed, "init"),
    )


def cmd_train(args) -> int:
    manifest = ds.load_manifest(args.manifest)
    config = tr.TrainConfig(
        mode=args.mode,
        model=_model_config(args, manifest.feature_dim),
        epochs=args.epochs,
        batch_size=args.batch,
        seed=_sub_seed(args.seed, "train"),
        lr=args.lr,
        val_fraction=args.val_fraction,
        patience=args.patience,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report, _ = tr.train(manifest, config, checkpoint_path=out_dir / "checkpoint.qbem")
    payload = report.to_json()
    payload["run_config"] = _echo(args)
    with open(out_dir / "report.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"checkpoint: {report.checkpoint_path} (best epoch {report.best_epoch})")
    return 0


def _score_manifest(scorer: Scorer, manifest: ds.DatasetManifest, queries, segments):
    """Model scores for every pair, grouping by query and caching encodings."""
    by_query: dict[str, list] = {}
    for pair in manifest.pairs:
        by_query.setdefault(pair.query_id, []).append(pair)
    scored = {}
    for qid in sorted(by_query):
        pairs = by_query[qid]
        encs = [scorer.encode_segment(segments[p.segment_id], p.segment_id) for p in pairs]
        scores = scorer.score_against(queries[qid], encs)
        raw = [scorer.confidence_to_regression(mdl.Confidence(score=s)) for s in scores] \
            if scorer.config.detector == "cos" else list(scores)
        scored[qid] = [(p, float(s)) for p, s in zip(pairs, raw)]
    return scored


def cmd_search(args) -> int:
    params = mdl.load_checkpoint(args.checkpoint)
    manifest = ds.load_manifest(args.manifest)
    ds.validate_manifest(manifest)
    if params.config.feature_dim != manifest.feature_dim:
        raise ValidationError(
            f"checkpoint feature_dim {params.config.feature_dim} != manifest "
            f"feature_dim {manifest.feature_dim}"
        )
    queries, segments, _ = ds.load_all_features(manifest)
    scorer = Scorer(params, cache=not args.no_cache)
    scored = _score_manifest(scorer, manifest, queries, segments)

    dtw_results = None
    if args.fuse_dtw is not None or args.dtw_csv is not None:
        cfg = dtwmod.DtwConfig()
        dtw_results = {}
        for pair in manifest.pairs:
            dtw_results[(pair.query_id, pair.segment_id)] = dtwmod.dtw_score(
                queries[pair.query_id], segments[pair.segment_id], cfg)

    rankings = []
    for qid in sorted(scored):
        model_rank = ev.make_ranking(
            qid, [(p.segment_id, s, p.label) for p, s in scored[qid]])
        if args.fuse_dtw is not None:
            dtw_rank = ev.make_ranking(
                qid, [(p.segment_id, dtw_results[(qid, p.segment_id)].similarity, p.label)
                      for p, _ in scored[qid]])
            model_rank = ev.fuse_scores(dtw_rank, model_rank,
                                        w_dtw=args.fuse_dtw, w_model=1.0 - args.fuse_dtw)
        rankings.append(model_rank)

    echo = _echo(args)
    rows = []
    for ranking in rankings:
        for rank, item in enumerate(ranking.items, start=1):
            rows.append((ranking.query_id, rank, item.segment_id,
                         f"{item.score:.8f}",
                         "" if item.relevant is None else int(item.relevant)))
    _write_csv(args.out, echo, ["query_id", "rank", "segment_id", "score", "relevant"], rows)
    if args.dtw_csv is not None:
        dtw_rows = [(qid, sid, f"{r.similarity:.8f}", r.best_span[0], r.best_span[1])
                    for (qid, sid), r in sorted(dtw_results.items())]
        _write_csv(args.dtw_csv, echo,
                   ["query_id", "segment_id", "similarity", "span_start", "span_end"],
                   dtw_rows)
    print(f"wrote rankings for {len(rankings)} queries to {args.out}")
    return 0


def _read_rankings_csv(path) -> list[ev.ScoredRanking]:
    by_query: dict[str, list] = {}
    with open(path) as fh:
        rows = [r for r in fh if not r.startswith("#")]
    for rec in csv.DictReader(rows):
        if rec["relevant"] == "":
            raise ValidationError(f"{path}: pair without relevance label")
        by_query.setdefault(rec["query_id"], []).append(
            (rec["segment_id"], float(rec["score"]), bool(int(rec["relevant"]))))
    return [ev.make_ranking(qid, rows) for qid, rows in sorted(by_query.items())]


def cmd_eval(args) -> int:
    rankings = _read_rankings_csv(args.rankings)
    result = ev.mean_average_precision(rankings)
    payload = {"map": result, "queries": len(rankings), "run_config": _echo(args)}
    if args.out is not None:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
    print(f"MAP = {result:.6f} over {len(rankings)} queries")
    return 0


def cmd_attention(args) -> int:
    params = mdl.load_checkpoint(args.checkpoint)
    manifest = ds.load_manifest(args.manifest)
    ds.validate_manifest(manifest)
    queries, segments, period = ds.load_all_features(manifest)
    scorer = Scorer(params)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_rows = []
    entries = []
    for pair in manifest.pairs:
        if not pair.label or pair.span is None:
            continue
        pair_id = f"{pair.query_id}|{pair.segment_id}"
        _, trace = scorer.score(queries[pair.query_id], segments[pair.segment_id],
                                segment_id=pair.segment_id, want_trace=True)
        for hop_index, hop in enumerate(trace.hops, start=1):
            for frame, (raw, norm) in enumerate(zip(hop.raw_scores, hop.weights)):
                trace_rows.append((pair_id, hop_index, frame,
                                   f"{raw:.8f}", f"{norm:.8e}"))
        entries.append((pair_id, trace.final_weights, pair.span))
    report = ev.localize_attention(entries, frame_period=period)
    echo = _echo(args)
    _write_csv(out_dir / "trace.csv", echo,
               ["pair_id", "hop", "frame_index", "alpha_raw", "alpha_norm"], trace_rows)
    _write_csv(out_dir / "localization.csv", echo,
               ["pair_id", "argmax_frame", "span_start", "span_end", "offset_seconds"],
               [(r.pair_id, r.argmax_frame, r.span[0], r.span[1],
                 f"{r.offset_seconds:.6f}") for r in report.records])
    print(f"localized {len(report.records)} positive pairs; "
          f"fraction under 1 s = {report.fraction_under_1s:.4f}")
    return 0


def cmd_bench(args) -> int:
    sizes = []
    for chunk in args.sizes.split(","):
        m, n = chunk.lower().split("x")
        sizes.append((int(m), int(n)))
    config = mdl.ModelConfig(
        feature_dim=args.feature_dim, hidden_dim=args.hidden, hops=args.hops,
        detector="nn", init_seed=_sub_seed(args.seed, "bench"))
    params = mdl.init_model_params(config)
    report = benchmark_runtime(params, dtwmod.DtwConfig(), sizes,
                               repetitions=args.reps, seed=_sub_seed(args.seed, "benchdata"))
    rows = [(m, M, N, h, f"{t:.6e}",
             "" if np.isnan(em) else f"{em:.4f}", "" if np.isnan(en) else f"{en:.4f}")
            for (m, M, N, h, t, em, en) in report.csv_rows()]
    _write_csv(args.out, _echo(args),
               ["method", "M", "N", "hops", "median_seconds",
                "fitted_exponent_M", "fitted_exponent_N"], rows)
    for (method, axis), exp in sorted(report.exponents.items()):
        print(f"{method} time-vs-{axis} exponent: {exp:.3f}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _apply_config_file(parser, argv):
    """key=value file given by --config provides defaults; flags override."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv)
    if known.config is None:
        return
    def coerce(text: str):
        for cast in (int, float):
            try:
                return cast(text)
            except ValueError:
                continue
        return text

    values = {}
    with open(known.config) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line: {line!r}")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = coerce(value.strip())
    parser.set_defaults(**values)
    # subcommand parsers apply their own defaults over the shared namespace
    for sub in getattr(parser, "_qbestd_subparsers", []):
        known_dests = {a.dest for a in sub._actions}
        sub.set_defaults(**{k: v for k, v in values.items() if k in known_dests})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qbestd", description=__doc__)
    parser.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap (scoring is single-threaded; echoed for provenance)")
    parser.add_argument("--config", default=None, help="key=value defaults file")
    sub = parser.add_subparsers(dest="command", required=True)
    parser._qbestd_subparsers = []

    def add_parser(*a, **kw):
        p = sub.add_parser(*a, **kw)
        parser._qbestd_subparsers.append(p)
        return p

    p = add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--keywords", type=int, default=20)
    p.add_argument("--pairs-per-keyword", type=int, default=100)
    p.add_argument("--test-pairs-per-keyword", type=int, default=25)
    p.add_argument("--holdout-keywords", type=int, default=0)
    p.add_argument("--queries-per-keyword", type=int, default=4)
    p.add_argument("--test-queries-per-keyword", type=int, default=1)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--keyword-frames", type=int, nargs=2, default=[8, 12])
    p.add_argument("--segment-frames", type=int, nargs=2, default=[70, 100])
    p.add_argument("--noise", type=float, default=1.2)
    p.add_argument("--warp", type=float, nargs=2, default=[0.8, 1.25])
    p.add_argument("--positive-fraction", type=float, default=0.5)
    p.add_argument("--decoy-prob", type=float, default=0.7)
    p.add_argument("--frame-period", type=float, default=0.1)
    p.set_defaults(func=cmd_generate)

    p = add_parser("featurize", help="convert PCM16 mono WAV files to QBEF")
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = add_parser("teacher", help="augment a manifest with normalized DTW scores")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--distance", default="one_minus_cosine",
                   choices=["one_minus_cosine", "euclidean"])
    p.add_argument("--mode", default="subsequence", choices=["subsequence", "global"])
    p.add_argument("--normalization", default="path_length",
                   choices=["path_length", "query_length"])
    p.set_defaults(func=cmd_teacher)

    p = add_parser("train", help="train a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", default="supervised", choices=["supervised", "distill"])
    p.add_argument("--hops", type=int, default=1)
    p.add_argument("--detector", default="nn", choices=["cos", "nn", "nn-cos", "nn_cos"])
    p.add_argument("--pooling", default="attention",
                   choices=["attention", "last-frame", "last_frame"])
    p.add_argument("--detector-query", default="first", choices=["first", "last"])
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = add_parser("search", help="rank every query's segments with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fuse-dtw", type=float, default=None,
                   help="DTW weight for score fusion (model gets 1 - w)")
    p.add_argument("--dtw-csv", default=None,
                   help="also write raw DTW similarities and spans here")
    p.add_argument("--no-cache", action="store_true")
    p.set_defaults(func=cmd_search)

    p = add_parser("eval", help="MAP of a rankings CSV")
    p.add_argument("--rankings", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = add_parser("attention", help="attention traces and span localization")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_attention)

    p = add_parser("bench", help="DTW vs network runtime scaling")
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", default="500x100,1000x100,2000x100,4000x100,"
                                      "4000x50,4000x200,4000x400")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--hidden", type=int, default=48)
    p.add_argument("--hops", type=int, default=3)
    p.add_argument("--feature-dim", type=int, default=39)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except QbeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
