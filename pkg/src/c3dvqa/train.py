"""Training loop, repeat-split evaluation protocol and segment-length sweep."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics
from .data import (
    DatasetManifest,
    DistortedEntry,
    RawVideo,
    SplitPlan,
    label_normalizer,
    make_split,
    sample_training_clips,
    stack_clips,
    video_rng,
)
from .layers import LossHyperParams, eq1_loss
from .model import C3DVQA, ModelConfig, build_model, predict_video
from .optim import Adam, PlateauScheduler
from .tensor import Tape

log = logging.getLogger(__name__)

PRESETS = {
    "live": {"lr": 1e-4},
    "csiq": {"lr": 3e-4},
}


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class RunConfig:
    manifest: str = ""
    frames: int = 60
    patch: int = 112
    fc_hidden: int = 64
    variant: str = "c3d"
    lr: float = 1e-4
    epochs: int = 250
    batch_size: int = 4
    lambda1: float = 1.0
    lambda2: float = 1e-4
    seed: int = 0
    repeats: int = 10
    train_fraction: float = 0.8
    output_dir: str = "runs"
    threads: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        obj = dict(obj)
        preset = obj.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            obj = {**PRESETS[preset], **obj}
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_config(self) -> ModelConfig:
        return ModelConfig(frames=self.frames, patch=self.patch, fc_hidden=self.fc_hidden, variant=self.variant)

    def loss_params(self) -> LossHyperParams:
        return LossHyperParams(self.lambda1, self.lambda2)


@dataclass
class EpochRow:
    epoch: int
    loss: float
    mse: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "mse", "lr", "seconds", "best"])
        for r in self.rows:
            w.writerow([r.epoch, repr(r.loss), repr(r.mse), repr(r.lr), f"{r.seconds:.4f}",
                        int(r.epoch == self.best_epoch)])
        return buf.getvalue()

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.rows]


def train_step(model: C3DVQA, opt: Adam, dist: np.ndarray, res: np.ndarray, labels: np.ndarray,
               hp: LossHyperParams) -> tuple[float, float]:
    """One forward/backward/Adam update; returns (objective, batch MSE)."""
    with Tape() as tape:
        out = model(dist, res)
        loss = eq1_loss(out.score, labels, model.weights(), hp)
    tape.backward(loss)
    opt.step()
    mse = float(np.mean((out.score.data.astype(np.float64) - labels) ** 2))
    return loss.item(), mse


def fit_clips(model: C3DVQA, dist: np.ndarray, res: np.ndarray, labels: np.ndarray, steps: int,
              lr: float = 1e-3, batch_size: Optional[int] = None,
              hp: LossHyperParams = LossHyperParams(), seed: int = 0) -> list[float]:
    """Run ``steps`` Adam updates over a fixed clip set; returns per-step objective."""
    n = len(labels)
    batch_size = batch_size or n
    opt = Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    order = np.arange(n)
    pos = n
    for _ in range(steps):
        if pos >= n:
            order = rng.permutation(n) if batch_size < n else np.arange(n)
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        loss, _ = train_step(model, opt, dist[idx], res[idx], labels[idx], hp)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss after {len(losses)} steps")
        losses.append(loss)
    return losses


def training_mse(model: C3DVQA, dist: np.ndarray, res: np.ndarray, labels: np.ndarray) -> float:
    pred = np.asarray(model(dist, res).score.data, dtype=np.float64)
    return float(np.mean((pred - labels) ** 2))


def train_model(
    manifest: DatasetManifest,
    entries: Sequence[DistortedEntry],
    cfg: RunConfig,
    on_epoch: Optional[Callable[[int, C3DVQA], None]] = None,
) -> tuple[C3DVQA, TrainLog]:
    """Train on ``entries``; returns the smallest-training-loss model and its log."""
    if not entries:
        raise ValueError("no training videos")
    model = build_model(cfg.model_config(), seed=cfg.seed)
    hp = cfg.loss_params()
    norm = label_normalizer(manifest, entries)
    opt = Adam(model.parameters(), lr=cfg.lr)
    sched = PlateauScheduler(opt)
    shuffle = np.random.default_rng([cfg.seed, 0x5EED])
    tlog = TrainLog()
    best_loss, best_state = math.inf, model.state_dict()

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        clips = []
        for e in entries:
            ref, dist = manifest.video_pair(e)
            clips += sample_training_clips(ref, dist, cfg.frames, cfg.patch, video_rng(cfg.seed, e.id, epoch),
                                           label=norm(e.score), video_id=e.id)
        order = shuffle.permutation(len(clips))
        total = sq = 0.0
        lr_used = opt.lr
        for lo in range(0, len(order), cfg.batch_size):
            d, r, y = stack_clips([clips[i] for i in order[lo:lo + cfg.batch_size]])
            loss, mse = train_step(model, opt, d, r, y, hp)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
            total += loss * len(y)
            sq += mse * len(y)
        epoch_loss = total / len(clips)
        if epoch_loss < best_loss:
            best_loss, best_state = epoch_loss, model.state_dict()
            tlog.best_epoch = epoch
        sched.step(epoch_loss)
        tlog.rows.append(EpochRow(epoch, epoch_loss, sq / len(clips), lr_used, time.perf_counter() - t0))
        log.info("epoch %d loss %.6g lr %.3g", epoch, epoch_loss, lr_used)
        if on_epoch is not None:
            on_epoch(epoch, model)

    model.load_state_dict(best_state)
    return model, tlog


# ---------------------------------------------------------------------------
# evaluation protocol

Scorer = Callable[[RawVideo, RawVideo], float]


def model_scorer(model: C3DVQA, window: Optional[int] = None) -> Scorer:
    def score(ref: RawVideo, dist: RawVideo) -> float:
        return predict_video(model, ref, dist, window)[0]
    return score


PSNR_CAP = 100.0


def psnr_scorer(ref: RawVideo, dist: RawVideo) -> float:
    """PSNR as a quality score; identical videos are capped at 100 dB."""
    return min(metrics.psnr_video(ref, dist), PSNR_CAP)


def score_entries(manifest: DatasetManifest, entries: Sequence[DistortedEntry], scorer: Scorer) -> tuple[list, list]:
    """Predicted scores and polarity-aligned subjective scores (larger = better)."""
    pred, subj = [], []
    for e in entries:
        ref, dist = manifest.video_pair(e)
        pred.append(float(scorer(ref, dist)))
        subj.append(manifest.aligned_score(e.score))
    return pred, subj


def evaluate_protocol(
    manifest: DatasetManifest,
    cfg: RunConfig,
    scorer_for_split: Callable[[SplitPlan, int], Scorer],
) -> metrics.EvalReport:
    """Repeat: random content split, score the test side, SROCC + logistic PLCC."""
    runs = []
    for r in range(cfg.repeats):
        plan = make_split(manifest, cfg.train_fraction, seed=cfg.seed + r)
        test = manifest.distorted_of(plan.test)
        if len(test) < 3:
            raise ValueError(f"split {r} has only {len(test)} test videos; need at least 3")
        scorer = scorer_for_split(plan, r)
        pred, subj = score_entries(manifest, test, scorer)
        runs.append(metrics.score_run(plan.seed, pred, subj))
    return metrics.aggregate_runs(runs)


def training_scorer_factory(manifest: DatasetManifest, cfg: RunConfig,
                            logs: Optional[list] = None,
                            curves: Optional[list] = None) -> Callable[[SplitPlan, int], Scorer]:
    """Train a fresh model on each split's training references.

    ``curves`` (if given) collects per-epoch test SROCC for every repeat.
    """
    def factory(plan: SplitPlan, repeat: int) -> Scorer:
        run_cfg = dataclasses.replace(cfg, seed=cfg.seed + repeat)
        train = manifest.distorted_of(plan.train)
        test = manifest.distorted_of(plan.test)
        curve: list[float] = []
        hook = None
        if curves is not None:
            def hook(epoch, model):
                pred, subj = score_entries(manifest, test, model_scorer(model))
                try:
                    curve.append(metrics.srocc(pred, subj))
                except ValueError:
                    curve.append(math.nan)
        model, tlog = train_model(manifest, train, run_cfg, on_epoch=hook)
        if logs is not None:
            logs.append(tlog)
        if curves is not None:
            curves.append(curve)
        return model_scorer(model)
    return factory


@dataclass
class SweepRow:
    frames: int
    plcc: float
    srocc: float
    epoch_seconds: float
    error: str = ""


SWEEP_HEADER = ("D", "PLCC", "SROCC", "epoch_seconds")


def sweep_frames(manifest: DatasetManifest, cfg: RunConfig, frame_list: Sequence[int] = (15, 30, 60, 120),
                 curves: Optional[dict] = None) -> list[SweepRow]:
    """Train and evaluate one model per segment length; failures are recorded, not raised."""
    rows = []
    for D in frame_list:
        run_cfg = dataclasses.replace(cfg, frames=int(D))
        logs: list = []
        d_curves: list = []
        try:
            report = evaluate_protocol(manifest, run_cfg,
                                       training_scorer_factory(manifest, run_cfg, logs, d_curves))
            secs = float(np.mean([r.seconds for tl in logs for r in tl.rows]))
            rows.append(SweepRow(int(D), report.median_plcc, report.median_srocc, secs))
        except Exception as exc:  # noqa: BLE001 - one failed length must not stop the sweep
            log.warning("sweep D=%s failed: %s", D, exc)
            rows.append(SweepRow(int(D), math.nan, math.nan, math.nan, str(exc)))
        if curves is not None:
            curves[int(D)] = d_curves
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([r.frames, repr(r.plcc), repr(r.srocc), repr(r.epoch_seconds)])
    return buf.getvalue()
