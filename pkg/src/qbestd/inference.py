"""Frozen-parameter scoring engine with segment-encoding caching.

Snapshots the trainable tensors (float32 by default), runs the LSTM with
batched input projections plus a per-frame recurrence loop, and keeps encoded
segments in a cache keyed by segment id. The cache belongs to one Scorer
instance, which binds one parameter snapshot; training code builds a fresh
Scorer per evaluation pass, so a parameter update can never be paired with a
stale encoding.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ValidationError
from .model import AttentionTrace, Confidence, HopTrace, ModelParams


class Scorer:
    def __init__(self, params: ModelParams, dtype=np.float32, cache: bool = True):
        self.config = params.config.validate()
        self.dtype = dtype
        self.caching = cache
        self.params_fingerprint = params.fingerprint()
        self.lstm = [(np.ascontiguousarray(l.wx.data, dtype=dtype),
                      np.ascontiguousarray(l.wh.data, dtype=dtype),
                      np.ascontiguousarray(l.bias.data, dtype=dtype))
                     for l in params.lstm]
        self.detector = None
        if params.detector is not None:
            self.detector = [(np.ascontiguousarray(w.data, dtype=dtype),
                              np.ascontiguousarray(b.data, dtype=dtype),
                              act)
                             for w, b, act in zip(params.detector.weights,
                                                  params.detector.biases,
                                                  params.detector.activations)]
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    # -- encoding -----------------------------------------------------------

    def _run_lstm(self, x: np.ndarray) -> np.ndarray:
        """Top-layer hidden states (T, h) for one (T, d) sequence."""
        seq = np.ascontiguousarray(x, dtype=self.dtype)
        if seq.ndim != 2 or seq.shape[0] < 1:
            raise ValidationError(f"expected a nonempty (T, d) sequence, got {seq.shape}")
        if seq.shape[1] != self.lstm[0][0].shape[0]:
            raise ValidationError(
                f"feature dim {seq.shape[1]} != model input dim {self.lstm[0][0].shape[0]}"
            )
        T = seq.shape[0]
        out = seq
        for wx, wh, bias in self.lstm:
            h = wh.shape[0]
            proj = out @ wx + bias          # all input projections in one matmul
            states = np.empty((T, h), dtype=self.dtype)
            h_t = np.zeros(h, dtype=self.dtype)
            c_t = np.zeros(h, dtype=self.dtype)
            for t in range(T):
                g = proj[t] + h_t @ wh
                act = expit(g[: 3 * h])
                cand = np.tanh(g[3 * h :])
                c_t = act[h : 2 * h] * c_t + act[:h] * cand
                h_t = act[2 * h : 3 * h] * np.tanh(c_t)
                states[t] = h_t
            out = states
        return out

    def encode_query(self, frames: np.ndarray) -> np.ndarray:
        """Query vector: the top layer's state at the last frame."""
        return self._run_lstm(frames)[-1]

    def encode_segment(self, frames: np.ndarray, segment_id: str | None = None
                       ) -> tuple[np.ndarray, np.ndarray]:
        """Per-frame encodings plus their L2 norms; cached by segment id."""
        if segment_id is not None and segment_id in self._cache:
            return self._cache[segment_id]
        states = self._run_lstm(frames)
        norms = np.maximum(np.sqrt((states * states).sum(axis=1)), 1e-12)
        enc = (states, norms)
        if self.caching and segment_id is not None:
            self._cache[segment_id] = enc
        return enc

    def clear_cache(self):
        self._cache.clear()

    # -- attention, hops, detection ------------------------------------------

    def _attend(self, vq, states, norms):
        raw = states @ vq / (norms * max(float(np.sqrt(vq @ vq)), 1e-12))
        shifted = raw - raw.max()
        w = np.exp(shifted)
        w /= w.sum()
        return raw, w, w @ states

    def _hops(self, vq1, states, norms, want_trace: bool):
        trace = AttentionTrace() if want_trace else None
        vq = vq1
        pooled = None
        for _ in range(self.config.hops):
            raw, w, pooled = self._attend(vq, states, norms)
            if want_trace:
                trace.hops.append(HopTrace(raw_scores=raw, weights=w,
                                           pooled=pooled, query_vec=vq))
            vq = vq + pooled
        return trace, pooled, vq

    def _detect(self, vq_det, pooled) -> Confidence:
        def cos(a, b):
            na = float(np.sqrt(a @ a))
            nb = float(np.sqrt(b @ b))
            if na < 1e-12 or nb < 1e-12:
                return 0.0
            return float(a @ b) / (na * nb)

        if self.config.detector == "cos":
            return Confidence(score=cos(vq_det, pooled))
        x = np.concatenate([vq_det, pooled])
        if self.config.detector == "nn_cos":
            x = np.concatenate([x, np.asarray([cos(vq_det, pooled)], dtype=self.dtype)])
        for w, b, act in self.detector:
            x = x @ w + b
            if act == "relu":
                np.maximum(x, 0, out=x)
        e = np.exp(x - x.max())
        probs = e / e.sum()
        return Confidence(score=float(probs[1]), logits=x.astype(np.float64))

    # -- public scoring -------------------------------------------------------

    def score(self, query_frames: np.ndarray, segment_frames: np.ndarray | None = None,
              segment_id: str | None = None, encoding=None, want_trace: bool = False
              ) -> tuple[Confidence, AttentionTrace | None]:
        """Score one pair, from raw segment frames or a precomputed encoding."""
        vq1 = self.encode_query(query_frames)
        if encoding is None:
            if segment_frames is None:
                raise ValidationError("need segment frames or a precomputed encoding")
            encoding = self.encode_segment(segment_frames, segment_id)
        states, norms = encoding
        if self.config.pooling == "attention":
            trace, pooled, vq_last = self._hops(vq1, states, norms, want_trace)
        else:
            trace, pooled, vq_last = (AttentionTrace() if want_trace else None,
                                      states[-1], vq1)
        vq_det = vq1 if self.config.detector_query == "first" else vq_last
        return self._detect(vq_det, pooled), trace

    def score_against(self, query_frames: np.ndarray, encodings: list) -> np.ndarray:
        """Scores of one query against many cached encodings (query encoded once)."""
        vq1 = self.encode_query(query_frames)
        out = np.empty(len(encodings))
        for k, (states, norms) in enumerate(encodings):
            if self.config.pooling == "attention":
                _, pooled, vq_last = self._hops(vq1, states, norms, want_trace=False)
            else:
                pooled, vq_last = states[-1], vq1
            vq_det = vq1 if self.config.detector_query == "first" else vq_last
            out[k] = self._detect(vq_det, pooled).score
        return out

    def confidence_to_regression(self, conf: Confidence) -> float:
        """Scalar prediction in [0,1] used as the distillation output."""
        if self.config.detector == "cos":
            return 0.5 * (1.0 + conf.score)
        return conf.score
