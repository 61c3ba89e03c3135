"""Fine-tuning harness for single-source and multi-source plans.

AdamW (decoupled weight decay) over every parameter, MSE against the ICDR
grade, learning rate cut by ``lr_decay_factor`` after ``lr_patience_epochs``
epochs without validation improvement, early stopping, and the
lowest-validation-loss weights kept as the result.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import yaml

from . import ingest
from .errors import DivergenceError, EmptyInputError, PlanError
from .ingest import DatasetManifest, Mode, SampleRecord, TrainingPlan
from .metrics import EvaluationReport, PredictionSet, evaluate, write_report
from .model import BackboneConfig, DRStageNet, HeadConfig, build_model, save_checkpoint
from .preprocess import AugmentConfig, ImageTensor, PreprocessCache, augment, to_model_input
from .seeding import derive, substream_seed

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "lr")

ImageLoader = Callable[[SampleRecord], ImageTensor]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    initial_lr: float = 1e-6
    weight_decay: float = 0.04
    lr_decay_factor: float = 0.1
    lr_patience_epochs: int = 4
    early_stop_patience_epochs: int = 10
    max_epochs: int = 50
    improvement_threshold: float = 1e-4
    seed: int = 0
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.lr_patience_epochs < 1 or self.early_stop_patience_epochs < 1:
            raise ValueError("patience values must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = asdict(self.augment) if self.augment is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        aug = d.pop("augment", "default")
        if aug == "default":
            return cls(**d)
        return cls(augment=AugmentConfig(**aug) if aug else None, **d)


class PlateauTracker:
    """Counts consecutive epochs without a relative improvement greater
    than ``threshold`` over the best value seen so far."""

    def __init__(self, patience: int, threshold: float = 1e-4):
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, value: float) -> bool:
        """Record one epoch; return True once ``patience`` bad epochs
        have accumulated."""
        if value < self.best - self.threshold * abs(self.best) or self.best == math.inf:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    def reset(self):
        self.bad_epochs = 0


@dataclass
class LRSchedule:
    """Plateau learning-rate decay driven by validation loss."""

    lr: float
    factor: float
    tracker: PlateauTracker
    decay_epochs: list = field(default_factory=list)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "LRSchedule":
        return cls(cfg.initial_lr, cfg.lr_decay_factor, PlateauTracker(cfg.lr_patience_epochs, cfg.improvement_threshold))

    def step(self, epoch: int, val_loss: float) -> float:
        if self.tracker.step(val_loss):
            self.lr *= self.factor
            self.decay_epochs.append(epoch)
            self.tracker.reset()
        return self.lr


def simulate_schedule(val_losses: Sequence[float], cfg: TrainConfig) -> tuple[list[float], list[int]]:
    """Learning rate used in each epoch and the epochs after which it decayed."""
    sched = LRSchedule.from_config(cfg)
    lrs = []
    for epoch, v in enumerate(val_losses, start=1):
        lrs.append(sched.lr)
        sched.step(epoch, v)
    return lrs, sched.decay_epochs


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    improved: bool = False


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    lr_decay_epochs: list = field(default_factory=list)
    stopped_early: bool = False
    checkpoint_path: Optional[str] = None

    @property
    def best_val_loss(self) -> float:
        return self.epochs[self.best_epoch - 1].val_loss

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.lr)])
        return path


@dataclass
class Checkpoint:
    state_dict: dict
    epoch: int
    val_loss: float
    path: Optional[Path] = None


def default_loader(image_side: int, cache_root=None) -> ImageLoader:
    cache = PreprocessCache(cache_root, side=image_side)

    def load(record: SampleRecord) -> ImageTensor:
        return cache.get(record.sample_id, record.image_path)

    return load


def _batch_tensor(model, records, loader, aug_cfg=None, epoch=0) -> torch.Tensor:
    mean, std = model.config.mean, model.config.std
    arrays = []
    for r in records:
        img = loader(r)
        if aug_cfg is not None:
            img = augment(img, aug_cfg, derive(epoch, r.sample_id))
        arrays.append(to_model_input(img, mean, std))
    dtype = next(model.parameters()).dtype
    return torch.from_numpy(np.stack(arrays)).to(dtype)


def _targets(records, dtype) -> torch.Tensor:
    if any(r.icdr is None for r in records):
        raise PlanError("unlabelled sample in training or evaluation set")
    return torch.tensor([float(r.icdr) for r in records], dtype=dtype)


@torch.no_grad()
def predict_scores(model: DRStageNet, records: Sequence[SampleRecord], loader: ImageLoader, batch_size: int = 64) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    try:
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            out.append(model(_batch_tensor(model, chunk, loader)).double().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def evaluate_loss(model: DRStageNet, samples: Sequence[SampleRecord], loader: Optional[ImageLoader] = None, batch_size: int = 64) -> float:
    """Mean squared error between scores and ICDR grades."""
    if not samples:
        raise EmptyInputError("no samples to evaluate")
    loader = loader or default_loader(model.config.image_side)
    scores = predict_scores(model, samples, loader, batch_size)
    labels = np.array([float(r.icdr) for r in samples])
    return mse_loss(scores, labels)


def mse_loss(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.size == 0:
        raise EmptyInputError("no samples to evaluate")
    return float(np.mean((scores - labels) ** 2))


def fine_tune(
    model: DRStageNet,
    plan: TrainingPlan,
    cfg: TrainConfig,
    loader: Optional[ImageLoader] = None,
    run_dir=None,
) -> tuple[Checkpoint, TrainHistory]:
    """Train every parameter of ``model`` on ``plan.source_train``.

    Validation loss on ``plan.joint_val`` drives the learning-rate plateau
    schedule, early stopping and best-checkpoint selection. On return the
    model holds the best weights.
    """
    if not plan.source_train:
        raise PlanError("training set is empty")
    if not plan.joint_val:
        raise PlanError("validation set is empty")
    loader = loader or default_loader(model.config.image_side)
    dtype = next(model.parameters()).dtype

    shuffle_seed = substream_seed(cfg.seed, "shuffle")
    aug_cfg = None
    if cfg.augment is not None:
        aug_cfg = AugmentConfig(**{**asdict(cfg.augment), "seed": substream_seed(cfg.seed, "augment")})

    for p in model.parameters():
        p.requires_grad_(True)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.initial_lr, weight_decay=cfg.weight_decay)
    schedule = LRSchedule.from_config(cfg)
    stopper = PlateauTracker(cfg.early_stop_patience_epochs, cfg.improvement_threshold)
    history = TrainHistory()
    best: Optional[Checkpoint] = None
    ckpt_path = Path(run_dir) / "best.ckpt" if run_dir is not None else None

    train = list(plan.source_train)
    val = list(plan.joint_val)
    for epoch in range(1, cfg.max_epochs + 1):
        lr = schedule.lr
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        order = np.random.default_rng(derive(shuffle_seed, epoch)).permutation(len(train))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[start : start + cfg.batch_size]]
            x = _batch_tensor(model, batch, loader, aug_cfg, epoch)
            y = _targets(batch, dtype)
            optimizer.zero_grad(set_to_none=True)
            loss = torch.mean((model(x) - y) ** 2)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite training loss in epoch {epoch}", epoch)
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(batch)
            count += len(batch)
        train_loss = total / count
        val_loss = evaluate_loss(model, val, loader, cfg.eval_batch_size)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss in epoch {epoch}", epoch)

        improved = best is None or val_loss < best.val_loss
        history.epochs.append(EpochRecord(epoch, train_loss, val_loss, lr, improved))
        if improved:
            best = Checkpoint(copy.deepcopy(model.state_dict()), epoch, val_loss, ckpt_path)
            history.best_epoch = epoch
            if ckpt_path is not None:
                save_checkpoint(model, ckpt_path, epoch=epoch, val_loss=val_loss)
                history.checkpoint_path = str(ckpt_path)
        log.info("epoch %d train %.5f val %.5f lr %.3g", epoch, train_loss, val_loss, lr)

        schedule.step(epoch, val_loss)
        if stopper.step(val_loss):
            history.stopped_early = True
            break

    history.lr_decay_epochs = list(schedule.decay_epochs)
    model.load_state_dict(best.state_dict)
    return best, history


# -- experiments ----------------------------------------------------------------


@dataclass
class EvalOptions:
    n_bootstrap: int = 1000
    frac: float = 0.6
    quantiles: tuple = (0.25, 0.75)
    replace: bool = False
    discrete_errors: bool = False
    flag_threshold: int = 3


@dataclass
class ExperimentRecord:
    run_dir: Path
    plan: TrainingPlan
    checkpoint: Checkpoint
    history: TrainHistory
    report: EvaluationReport
    predictions: PredictionSet


def predictions_for(model: DRStageNet, records: Sequence[SampleRecord], loader: ImageLoader, batch_size: int = 64) -> PredictionSet:
    records = [r for r in records if r.icdr is not None]
    if not records:
        raise EmptyInputError("no labelled samples to evaluate")
    scores = predict_scores(model, records, loader, batch_size)
    return PredictionSet.build(
        [r.sample_id for r in records],
        scores,
        [r.icdr for r in records],
        [ingest.derive_rdr(r) for r in records],
        [r.dataset_id for r in records],
        [r.image_path for r in records],
    )


def write_predictions(preds: PredictionSet, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "dataset_id", "score", "grade_pred", "icdr_ref", "rdr_ref"])
        for i in range(len(preds)):
            w.writerow(
                [
                    preds.sample_ids[i],
                    preds.dataset_ids[i],
                    repr(float(preds.scores[i])),
                    int(preds.grade_pred[i]),
                    int(preds.icdr_ref[i]),
                    int(preds.rdr_ref[i]),
                ]
            )
    return path


def run_experiment(
    mode,
    manifests: Sequence[DatasetManifest],
    target_domain: Optional[str],
    model_cfg: BackboneConfig,
    train_cfg: TrainConfig,
    run_dir,
    test_manifest: Optional[DatasetManifest] = None,
    eval_options: Optional[EvalOptions] = None,
    loader: Optional[ImageLoader] = None,
    head_cfg: Optional[HeadConfig] = None,
    val_fraction: float = 0.1,
) -> ExperimentRecord:
    """Assemble the plan, fine-tune, evaluate on the held-out or target
    set and persist everything under ``run_dir``.

    Exclusion rules are applied to every manifest first. All randomness
    derives from ``train_cfg.seed``; timestamps go to ``meta.json`` only.
    """
    mode = Mode.parse(mode)
    eval_options = eval_options or EvalOptions()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()

    manifests = [ingest.apply_exclusions(m) for m in manifests]
    if test_manifest is not None:
        test_manifest = ingest.apply_exclusions(test_manifest)
    plan = ingest.assemble_plan(
        mode,
        manifests,
        target_domain,
        seed=substream_seed(train_cfg.seed, "split"),
        val_fraction=val_fraction,
        test_manifest=test_manifest,
    )
    if not plan.target_eval:
        raise PlanError("evaluation set is empty")

    config_doc = {
        "mode": mode.value,
        "target_domain": target_domain,
        "manifests": [m.source_meta.get("path", m.dataset_id) for m in manifests],
        "test_manifest": test_manifest.source_meta.get("path") if test_manifest is not None else None,
        "backbone": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "evaluation": {**asdict(eval_options), "quantiles": list(eval_options.quantiles)},
        "val_fraction": val_fraction,
    }
    (run_dir / "config.yaml").write_text(yaml.safe_dump(config_doc, sort_keys=False))
    (run_dir / "plan.yaml").write_text(yaml.safe_dump(plan.to_dict(), sort_keys=False))

    model = build_model(model_cfg, head_cfg, seed=substream_seed(train_cfg.seed, "init"))
    loader = loader or default_loader(model_cfg.image_side)
    checkpoint, history = fine_tune(model, plan, train_cfg, loader, run_dir)
    history.write_csv(run_dir / "history.csv")

    preds = predictions_for(model, plan.target_eval, loader, train_cfg.eval_batch_size)
    report = evaluate(
        preds,
        n_bootstrap=eval_options.n_bootstrap,
        frac=eval_options.frac,
        quantiles=eval_options.quantiles,
        seed=substream_seed(train_cfg.seed, "bootstrap"),
        replace=eval_options.replace,
        discrete_errors=eval_options.discrete_errors,
        flag_threshold=eval_options.flag_threshold,
    )
    report.options["evaluated_on"] = "target" if mode is Mode.MULTI_SOURCE else "held-out test"
    write_report(report, run_dir)
    write_predictions(preds, run_dir / "predictions.csv")
    (run_dir / "meta.json").write_text(
        json.dumps(
            {
                "started": started,
                "finished": time.time(),
                "best_epoch": history.best_epoch,
                "lr_decay_epochs": history.lr_decay_epochs,
                "stopped_early": history.stopped_early,
            },
            indent=2,
        )
        + "\n"
    )
    return ExperimentRecord(run_dir, plan, checkpoint, history, report, preds)
