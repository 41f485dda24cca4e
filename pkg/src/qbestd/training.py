"""Training loops for both scenarios: supervised labels or DTW-teacher regression.

Batches are shuffled with a seeded generator, gradients are clipped at a
global norm, validation runs each epoch on the float32 scorer (the same code
path the eval CLI uses), and the best-validation-loss parameters are written
as the checkpoint. Everything downstream of the seed is deterministic.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as mdl
from . import nn
from .dataset import DatasetManifest, compute_feature_stats, load_all_features
from .errors import DataError, ValidationError
from .evaluation import mean_average_precision, rankings_from_pairs
from .inference import Scorer

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    mode: str                      # "supervised" | "distill"
    model: mdl.ModelConfig
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    val_fraction: float = 0.1
    patience: int | None = None

    def validate(self) -> "TrainConfig":
        if self.mode not in ("supervised", "distill"):
            raise ValidationError(f"mode must be supervised or distill, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValidationError("val_fraction must lie in [0, 1)")
        self.model.validate()
        return self


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float | None
    val_map: float | None


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    wall_time_seconds: float = 0.0
    checkpoint_path: str | None = None

    def to_json(self) -> dict:
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "wall_time_seconds": self.wall_time_seconds,
            "checkpoint_path": self.checkpoint_path,
        }


def split_validation(pairs, val_fraction: float, rng: np.random.Generator):
    """Stratified split: take ~val_fraction of each query's pairs for validation."""
    by_query: dict[str, list[int]] = {}
    for k, p in enumerate(pairs):
        by_query.setdefault(p.query_id, []).append(k)
    val_idx = []
    for qid in sorted(by_query):
        idx = by_query[qid]
        n_val = int(round(len(idx) * val_fraction))
        if n_val > 0:
            chosen = rng.choice(len(idx), size=n_val, replace=False)
            val_idx.extend(idx[c] for c in chosen)
    val_set = set(val_idx)
    train = [p for k, p in enumerate(pairs) if k not in val_set]
    val = [p for k, p in enumerate(pairs) if k in val_set]
    return train, val


def evaluate_pairs(params: mdl.ModelParams, pairs, queries, segments, mode: str
                   ) -> tuple[float, float | None]:
    """Frozen-parameter loss and (when labels exist) MAP over a pair list.

    Runs on the float32 scorer so the result is identical to the standalone
    eval CLI on a saved checkpoint.
    """
    if not pairs:
        log.warning("empty validation set; skipping evaluation")
        return float("nan"), None
    scorer = Scorer(params)
    losses = []
    rows = []
    any_labels = all(p.label is not None for p in pairs)
    for p in pairs:
        conf, _ = scorer.score(queries[p.query_id], segments[p.segment_id],
                               segment_id=p.segment_id)
        pred = scorer.confidence_to_regression(conf)
        if mode == "supervised":
            target_p = pred if p.label else 1.0 - pred
            losses.append(-np.log(max(target_p, 1e-12)))
        else:
            losses.append((pred - p.teacher_score) ** 2)
        if any_labels:
            rows.append((p.query_id, p.segment_id, pred, bool(p.label)))
    val_map = None
    if any_labels:
        try:
            val_map = mean_average_precision(rankings_from_pairs(rows))
        except ValidationError:
            val_map = None
    return float(np.mean(losses)), val_map


def _check_pairs(pairs, mode: str):
    if not pairs:
        raise ValidationError("manifest contains no pairs")
    if mode == "supervised":
        labels = [p.label for p in pairs]
        if any(l is None for l in labels):
            raise ValidationError("supervised training requires a label on every pair")
        if all(labels) or not any(labels):
            raise ValidationError("supervised training needs both classes present")
    else:
        for p in pairs:
            if p.teacher_score is None:
                raise ValidationError(
                    "distillation requires teacher_score on every pair "
                    "(run the teacher command first)"
                )
            if not (0.0 <= p.teacher_score <= 1.0):
                raise ValidationError(f"teacher score {p.teacher_score} outside [0,1]")


def train(manifest: DatasetManifest, config: TrainConfig, checkpoint_path=None
          ) -> tuple[TrainReport, mdl.ModelParams]:
    """Shared loop behind both training scenarios."""
    config.validate()
    _check_pairs(manifest.pairs, config.mode)
    if manifest.feature_stats is None:
        log.warning("manifest has no feature stats; computing from this manifest")
        manifest.feature_stats = compute_feature_stats(manifest)
    queries, segments, _ = load_all_features(manifest)
    if config.model.feature_dim != manifest.feature_dim:
        raise ValidationError(
            f"model feature_dim {config.model.feature_dim} != manifest "
            f"feature_dim {manifest.feature_dim}"
        )

    rng = np.random.default_rng(config.seed)
    train_pairs, val_pairs = split_validation(manifest.pairs, config.val_fraction, rng)
    params = mdl.init_model_params(config.model)
    params.feature_stats = manifest.feature_stats
    opt = nn.Adam(params.tensors(), lr=config.lr, beta1=config.beta1,
                  beta2=config.beta2, eps=config.eps)
    loss_fn = mdl.supervised_loss if config.mode == "supervised" else mdl.distill_loss

    report = TrainReport()
    best_state = None
    epochs_since_best = 0
    started = time.time()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_pairs))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            chunk = [train_pairs[k] for k in order[start : start + config.batch_size]]
            batch = mdl.make_batch(
                [queries[p.query_id] for p in chunk],
                [segments[p.segment_id] for p in chunk],
                labels=[p.label for p in chunk] if config.mode == "supervised" else None,
                targets=[p.teacher_score for p in chunk] if config.mode == "distill" else None,
            )
            opt.zero_grad()
            loss = loss_fn(params, batch)
            if not np.isfinite(loss.data):
                raise DataError(f"non-finite loss at epoch {epoch}")
            ad.backward(loss)
            nn.clip_gradients(params.tensors(), config.clip_norm)
            opt.step()
            epoch_loss += float(loss.data) * len(chunk)
        epoch_loss /= len(train_pairs)

        val_loss, val_map = evaluate_pairs(params, val_pairs, queries, segments, config.mode)
        report.epochs.append(EpochStats(epoch=epoch, train_loss=epoch_loss,
                                        val_loss=None if np.isnan(val_loss) else val_loss,
                                        val_map=val_map))
        print(f"epoch={epoch} train_loss={epoch_loss:.6f} "
              f"val_loss={val_loss:.6f} val_map={'nan' if val_map is None else f'{val_map:.4f}'}")

        track = val_loss if not np.isnan(val_loss) else epoch_loss
        if track < report.best_val_loss:
            report.best_val_loss = track
            report.best_epoch = epoch
            best_state = [t.data.copy() for t in params.tensors()]
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if config.patience is not None and epochs_since_best >= config.patience:
                log.info("early stop at epoch %d", epoch)
                break

    if best_state is not None:
        for t, data in zip(params.tensors(), best_state):
            t.data = data
    report.wall_time_seconds = time.time() - started
    if checkpoint_path is not None:
        checkpoint_path = Path(checkpoint_path)
        checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
        mdl.save_checkpoint(params, checkpoint_path)
        report.checkpoint_path = str(checkpoint_path)
    return report, params


def train_supervised(manifest: DatasetManifest, config: TrainConfig, checkpoint_path=None):
    """Binary-classification scenario on labeled query/segment pairs."""
    if config.mode != "supervised":
        raise ValidationError("config.mode must be 'supervised'")
    return train(manifest, config, checkpoint_path)


def train_distill(manifest: DatasetManifest, config: TrainConfig, checkpoint_path=None):
    """Regression scenario against teacher scores; never reads boolean labels."""
    if config.mode != "distill":
        raise ValidationError("config.mode must be 'distill'")
    return train(manifest, config, checkpoint_path)
