"""End-to-end scorer: encode query, encode segment, attend, hop, detect.

Both the query and the segment go through the same shared LSTM stack. Each
hop computes per-frame cosine scores against the current query vector,
softmax-normalizes them, pools the frame encodings, and the pooled vector is
added to the query vector to form the next hop's query. The detector turns
the original query vector plus the last hop's pooled vector into a
confidence score; three heads are supported (plain cosine, a feed-forward
network on the concatenated vectors, and the network with the cosine as an
extra input).

This module holds the float64 differentiable path used for training and
gradient checks; ``inference`` holds the float32 scoring engine.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, FormatError, ValidationError

DETECTORS = ("cos", "nn", "nn_cos")
POOLINGS = ("attention", "last_frame")
MAX_HOPS = 8

QBEM_MAGIC = b"QBEM"
QBEM_VERSION = 1


@dataclass
class ModelConfig:
    feature_dim: int
    hidden_dim: int = 128
    lstm_layers: int = 2
    hops: int = 1
    detector: str = "nn"
    detector_hidden: tuple[int, ...] = (128, 64, 32)
    pooling: str = "attention"      # "last_frame" disables attention (ablation)
    detector_query: str = "first"   # feed the detector hop-1's query vector or the last hop's
    init_seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.feature_dim < 1 or self.hidden_dim < 1 or self.lstm_layers < 1:
            raise ConfigError("feature_dim, hidden_dim and lstm_layers must be >= 1")
        if not (1 <= self.hops <= MAX_HOPS):
            raise ConfigError(f"hops must lie in [1, {MAX_HOPS}], got {self.hops}")
        if self.detector not in DETECTORS:
            raise ConfigError(f"detector must be one of {DETECTORS}, got {self.detector!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.detector_query not in ("first", "last"):
            raise ConfigError("detector_query must be 'first' or 'last'")
        return self

    def detector_input_dim(self) -> int:
        base = 2 * self.hidden_dim
        return base + 1 if self.detector == "nn_cos" else base


@dataclass
class ModelParams:
    config: ModelConfig
    lstm: list[nn.LstmLayerParams]
    detector: nn.FeedForwardParams | None
    feature_stats: dict | None = None

    def tensors(self) -> list[Tensor]:
        out = []
        for layer in self.lstm:
            out.extend(layer.tensors())
        if self.detector is not None:
            out.extend(self.detector.tensors())
        return out

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for k, layer in enumerate(self.lstm):
            out.append((f"lstm{k}.wx", layer.wx))
            out.append((f"lstm{k}.wh", layer.wh))
            out.append((f"lstm{k}.bias", layer.bias))
        if self.detector is not None:
            for k, (w, b) in enumerate(zip(self.detector.weights, self.detector.biases)):
                out.append((f"det.w{k}", w))
                out.append((f"det.b{k}", b))
        return out

    def fingerprint(self) -> str:
        digest = hashlib.sha1()
        for name, t in self.named_tensors():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return digest.hexdigest()


def init_model_params(config: ModelConfig) -> ModelParams:
    config.validate()
    rng = np.random.default_rng(config.init_seed)
    layers = []
    d_in = config.feature_dim
    for _ in range(config.lstm_layers):
        layers.append(nn.init_lstm_layer(rng, d_in, config.hidden_dim))
        d_in = config.hidden_dim
    detector = None
    if config.detector in ("nn", "nn_cos"):
        dims = [config.detector_input_dim(), *config.detector_hidden, 2]
        detector = nn.init_feed_forward(rng, dims)
    return ModelParams(config=config, lstm=layers, detector=detector)


# ---------------------------------------------------------------------------
# attention and hops (differentiable, batched)
# ---------------------------------------------------------------------------

def attend_batch(vq: Tensor, frames: Tensor, frame_norms: Tensor,
                 mask: np.ndarray | None) -> tuple[Tensor, Tensor, Tensor]:
    """One attention pass: cosine scores -> softmax weights -> pooled vector.

    vq (B, h), frames (B, T, h); ``frame_norms`` are the precomputed per-frame
    L2 norms (B, T) so multi-hop passes don't recompute them.
    Returns (raw cosine scores, normalized weights, pooled vector).
    """
    num = ad.frames_dot(frames, vq)
    nq = ad.tsqrt(ad.clip_min(ad.tsum(ad.mul(vq, vq), axis=1, keepdims=True), 1e-24))
    scores = ad.div(num, ad.mul(frame_norms, nq))
    masked = scores
    if mask is not None and not mask.all():
        masked = ad.mask_fill(scores, mask, -1e9)
    weights = ad.softmax(masked, axis=1)
    pooled = ad.frames_pool(frames, weights)
    return scores, weights, pooled


def run_hops_batch(vq1: Tensor, frames: Tensor, mask: np.ndarray | None, hops: int
                   ) -> tuple[list[dict], Tensor, Tensor]:
    """Run ``hops`` attention rounds; the pooled vector updates the query additively.

    Returns (per-hop records, last pooled vector, last query vector).
    """
    if hops < 1 or hops > MAX_HOPS:
        raise ConfigError(f"hops must lie in [1, {MAX_HOPS}], got {hops}")
    frame_norms = ad.tsqrt(ad.clip_min(ad.tsum(ad.mul(frames, frames), axis=2), 1e-24))
    trace = []
    vq = vq1
    pooled = None
    for _ in range(hops):
        scores, weights, pooled = attend_batch(vq, frames, frame_norms, mask)
        trace.append({"query_vec": vq, "scores": scores, "weights": weights,
                      "pooled": pooled})
        vq = ad.add(vq, pooled)
    return trace, pooled, vq


# ---------------------------------------------------------------------------
# batched forward pass and losses
# ---------------------------------------------------------------------------

@dataclass
class PaddedBatch:
    """Zero-padded query/segment feature arrays with validity masks."""

    queries: np.ndarray          # (B, Tq, d)
    query_mask: np.ndarray       # (B, Tq) bool
    segments: np.ndarray         # (B, Ts, d)
    segment_mask: np.ndarray     # (B, Ts) bool
    labels: np.ndarray | None = None    # (B,) bool
    targets: np.ndarray | None = None   # (B,) float in [0, 1]

    @property
    def size(self) -> int:
        return self.queries.shape[0]


def make_batch(query_feats: list[np.ndarray], segment_feats: list[np.ndarray],
               labels=None, targets=None) -> PaddedBatch:
    def pad(seqs):
        b = len(seqs)
        t_max = max(len(s) for s in seqs)
        d = seqs[0].shape[1]
        out = np.zeros((b, t_max, d))
        mask = np.zeros((b, t_max), dtype=bool)
        for i, s in enumerate(seqs):
            out[i, : len(s)] = s
            mask[i, : len(s)] = True
        return out, mask

    q, qm = pad(query_feats)
    s, sm = pad(segment_feats)
    return PaddedBatch(
        queries=q, query_mask=qm, segments=s, segment_mask=sm,
        labels=None if labels is None else np.asarray(labels, dtype=bool),
        targets=None if targets is None else np.asarray(targets, dtype=np.float64),
    )


def forward_batch(params: ModelParams, batch: PaddedBatch) -> dict:
    """Differentiable scoring of a padded batch.

    Returns {"prob": (B,) scalar confidence in [0,1], "logits": (B,2) or None,
    "cos": (B,) or None, "hops": per-hop trace records}.
    """
    cfg = params.config
    B = batch.size
    vq1, _ = nn.lstm_encode_batch(params.lstm, batch.queries, batch.query_mask)
    s_last, frames = nn.lstm_encode_batch(params.lstm, batch.segments, batch.segment_mask)

    if cfg.pooling == "attention":
        hops, pooled, vq_last = run_hops_batch(vq1, frames, batch.segment_mask, cfg.hops)
    else:
        hops, pooled, vq_last = [], s_last, vq1

    vq_det = vq1 if cfg.detector_query == "first" else vq_last
    cos = logits = None
    if cfg.detector == "cos":
        cos = nn.cosine_rows(vq_det, pooled)
        prob = ad.mul(ad.add(cos, 1.0), 0.5)
    else:
        pieces = [vq_det, pooled]
        if cfg.detector == "nn_cos":
            cos = nn.cosine_rows(vq_det, pooled)
            pieces.append(ad.reshape(cos, (B, 1)))
        logits = nn.feed_forward(params.detector, ad.concat(pieces, axis=1))
        prob = ad.index(ad.softmax(logits, axis=1), (slice(None), 1))
    return {"prob": prob, "logits": logits, "cos": cos, "hops": hops}


def supervised_loss(params: ModelParams, batch: PaddedBatch) -> Tensor:
    """Mean cross-entropy of the detector against boolean labels."""
    if batch.labels is None:
        raise ValidationError("supervised loss requires boolean labels")
    out = forward_batch(params, batch)
    if out["logits"] is not None:
        return nn.cross_entropy_batch(out["logits"], batch.labels)
    # cosine detector: binary cross-entropy on the [0,1]-mapped score
    p = out["prob"]
    p_true = ad.where_mask(batch.labels, p, ad.sub(1.0, p))
    return ad.neg(ad.tmean(ad.tlog(ad.clip_min(p_true, 1e-12))))


def distill_loss(params: ModelParams, batch: PaddedBatch) -> Tensor:
    """Mean squared error of the scalar confidence against teacher scores."""
    if batch.targets is None:
        raise ValidationError("distillation loss requires teacher scores")
    out = forward_batch(params, batch)
    return nn.mse_batch(out["prob"], batch.targets)


# ---------------------------------------------------------------------------
# single-pair scoring with a full attention trace (float64 reference path)
# ---------------------------------------------------------------------------

@dataclass
class HopTrace:
    raw_scores: np.ndarray    # cosine scores per frame, in [-1, 1]
    weights: np.ndarray       # softmax-normalized, sums to 1
    pooled: np.ndarray        # (h,)
    query_vec: np.ndarray     # the query vector this hop attended with


@dataclass
class AttentionTrace:
    hops: list[HopTrace] = field(default_factory=list)

    @property
    def final_weights(self) -> np.ndarray:
        return self.hops[-1].weights


@dataclass
class Confidence:
    score: float
    logits: np.ndarray | None = None


def score_pair_reference(params: ModelParams, query: np.ndarray, segment: np.ndarray
                         ) -> tuple[Confidence, AttentionTrace]:
    """Score one (query, segment) pair on the float64 path, keeping the trace."""
    query = np.asarray(query, dtype=np.float64)
    segment = np.asarray(segment, dtype=np.float64)
    if query.ndim != 2 or query.shape[0] < 1:
        raise ValidationError("query must be a nonempty (T, d) array")
    if segment.ndim != 2 or segment.shape[0] < 1:
        raise ValidationError("segment must be a nonempty (T, d) array")
    batch = make_batch([query], [segment])
    out = forward_batch(params, batch)
    trace = AttentionTrace()
    for hop in out["hops"]:
        trace.hops.append(HopTrace(
            raw_scores=hop["scores"].data[0].copy(),
            weights=hop["weights"].data[0].copy(),
            pooled=hop["pooled"].data[0].copy(),
            query_vec=hop["query_vec"].data[0].copy(),
        ))
    score = float(out["prob"].data[0]) if params.config.detector != "cos" \
        else float(out["cos"].data[0])
    logits = None if out["logits"] is None else out["logits"].data[0].copy()
    return Confidence(score=score, logits=logits), trace


# ---------------------------------------------------------------------------
# QBEM checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    """Write magic, version, JSON hyperparameter header, then named f32 sections."""
    names = [name for name, _ in params.named_tensors()]
    header = {
        "config": asdict(params.config),
        "feature_stats": params.feature_stats,
        "params": names,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(QBEM_MAGIC)
        fh.write(struct.pack("<I", QBEM_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, tensor in params.named_tensors():
            encoded = name.encode()
            data = np.ascontiguousarray(tensor.data, dtype="<f4")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != QBEM_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != QBEM_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<I", raw, 8)
    offset = 12
    header = json.loads(raw[offset : offset + header_len].decode())
    offset += header_len

    cfg_dict = dict(header["config"])
    cfg_dict["detector_hidden"] = tuple(cfg_dict["detector_hidden"])
    config = ModelConfig(**cfg_dict).validate()
    sections = {}
    for _ in header["params"]:
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode()
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims)
        offset += 4 * count
        sections[name] = np.asarray(data, dtype=np.float64)
    if offset != len(raw):
        raise FormatError(f"{path}: trailing bytes after last section")

    params = init_model_params(config)
    params.feature_stats = header.get("feature_stats")
    for name, tensor in params.named_tensors():
        if name not in sections:
            raise FormatError(f"{path}: missing parameter section {name!r}")
        if sections[name].shape != tensor.data.shape:
            raise FormatError(
                f"{path}: section {name!r} has shape {sections[name].shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data = sections[name]
    return params
