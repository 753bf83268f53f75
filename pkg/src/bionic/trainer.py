"""Training protocol: Adam, weighted smoothed cross-entropy, plateau LR, early stopping, seeds."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import __version__
from .connectome import ConnectivityMasks
from .core import Adam, RngStream, cross_entropy, no_grad, softmax
from .data import CLASS_NAMES, AugmentationConfig, FerDataset, Split, augment_batch, batch_iter, class_weights
from .metrics import aggregate, classification_report, roc_auc_ovr, write_evaluation, write_json
from .model import BioNicConfig, BioNicModel, parameter_count, save_checkpoint

EPOCH_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "test_loss", "test_acc")


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class SchedulerConfig:
    enabled: bool = True
    factor: float = 0.5
    patience: int = 10
    min_lr: float = 1e-6
    threshold: float = 1e-4


@dataclass
class TrainConfig:
    lr: float = 6e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 400
    early_stop_patience: int = 40
    smoothing: float = 0.1
    class_weighting: bool = True
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    seeds: tuple = (0, 1, 2)
    threads: int = 1
    eval_batch_size: int = 256
    mask_check_every: int = 10

    def __post_init__(self):
        if isinstance(self.scheduler, dict):
            self.scheduler = SchedulerConfig(**self.scheduler)
        if isinstance(self.augmentation, dict):
            aug = dict(self.augmentation)
            for k in ("crop_scale",):
                if k in aug:
                    aug[k] = tuple(aug[k])
            self.augmentation = AugmentationConfig(**aug)
        self.seeds = tuple(int(s) for s in self.seeds)
        # patience above max_epochs is allowed: the run then never stops early
        if self.early_stop_patience < 1 or self.max_epochs < 1:
            raise ValueError(f"early_stop_patience ({self.early_stop_patience}) and max_epochs ({self.max_epochs}) "
                             "must be positive")
        if not 0 < self.scheduler.factor < 1:
            raise ValueError(f"scheduler factor must lie in (0, 1), got {self.scheduler.factor}")
        if self.batch_size < 1 or self.threads < 1:
            raise ValueError("batch_size and threads must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["augmentation"]["crop_scale"] = list(self.augmentation.crop_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def protocol_digest(model_cfg: BioNicConfig, train_cfg: TrainConfig) -> str:
    """Digest of everything that defines a variant; seeds and thread count excluded."""
    t = train_cfg.to_dict()
    t.pop("seeds")
    t.pop("threads")
    blob = json.dumps({"model": model_cfg.to_dict(), "train": t}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- schedule / stopping ------------------------------------------------------

class PlateauScheduler:
    """Halve the LR after ``patience`` epochs without an improvement larger than ``threshold``."""

    def __init__(self, lr: float, cfg: SchedulerConfig):
        self.lr, self.cfg = lr, cfg
        self.best = math.inf
        self.counter = 0

    def step(self, loss: float) -> float:
        if not self.cfg.enabled:
            return self.lr
        if loss < self.best - self.cfg.threshold:
            self.best, self.counter = loss, 0
            return self.lr
        self.counter += 1
        if self.counter >= self.cfg.patience:
            self.lr = max(self.lr * self.cfg.factor, self.cfg.min_lr)
            self.counter = 0
        return self.lr


class EarlyStopper:
    def __init__(self, patience: int, threshold: float = 1e-4):
        self.patience, self.threshold = patience, threshold
        self.best = math.inf
        self.best_epoch = 0
        self.counter = 0

    def step(self, loss: float, epoch: int) -> bool:
        """Record ``loss`` for ``epoch``; True means stop now."""
        if loss < self.best - self.threshold:
            self.best, self.best_epoch, self.counter = loss, epoch, 0
            return False
        self.counter += 1
        return self.counter >= self.patience

    @property
    def improved(self) -> bool:
        return self.counter == 0


# -- one epoch ----------------------------------------------------------------

def train_epoch(model: BioNicModel, split: Split, optimizer: Adam, cfg: TrainConfig, seed: int, epoch: int,
                weights: Optional[np.ndarray] = None) -> dict:
    """One pass over ``split``; returns the epoch loss (same weighting as ``evaluate``) and running accuracy."""
    shuffle = RngStream(seed, "shuffle").substream(epoch)
    noise = RngStream(seed, "noise").substream(epoch)
    aug_rng = RngStream(seed, "augment")

    def transform(images, idx):
        return augment_batch(images, idx, cfg.augmentation, aug_rng, epoch)

    total_loss, total_w, correct, seen = 0.0, 0.0, 0, 0
    for step, (x, y) in enumerate(batch_iter(split, cfg.batch_size, shuffle, transform=transform)):
        logits = model.forward(x, "train", noise)
        loss = cross_entropy(logits, y, weights, cfg.smoothing)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss {value} at epoch {epoch}, batch {step}", {
                "epoch": epoch, "batch": step, "loss": value, "lr": optimizer.lr,
                "logits_finite": bool(np.all(np.isfinite(logits.data))),
                "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in model.params.items()}})
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if model.config.use_hebbian:
            model.apply_hebbian()
        norm = len(y) if weights is None else float(np.sum(weights[y]))
        total_loss += value * norm
        total_w += norm
        correct += int(np.sum(logits.data.argmax(axis=1) == y))
        seen += len(y)
    return {"loss": total_loss / total_w, "acc": correct / seen}


def evaluate(model: BioNicModel, split: Split, batch_size: int = 256, weights: Optional[np.ndarray] = None,
             smoothing: float = 0.0) -> dict:
    """Eval-mode pass; loss uses the same criterion as training."""
    probs, losses = [], []
    with no_grad():
        for x, y in batch_iter(split, batch_size, shuffle=False):
            logits = model.forward(x, "eval")
            losses.append(_batch_total(logits, y, weights, smoothing))
            probs.append(softmax(logits).data)
    probs = np.concatenate(probs).astype(np.float64)
    preds = probs.argmax(axis=1)
    denom = len(split) if weights is None else float(np.sum(weights[split.labels]))
    return {"loss": float(sum(losses) / denom), "acc": float(np.mean(preds == split.labels)),
            "predictions": preds, "probabilities": probs}


def _batch_total(logits, y, weights, smoothing) -> float:
    # cross_entropy returns sum(w l) / sum(w); undo the per-batch normalization so batches combine exactly
    norm = len(y) if weights is None else float(np.sum(weights[y]))
    return float(cross_entropy(logits, y, weights, smoothing).data) * norm


def assert_masks_hold(model: BioNicModel) -> None:
    for name, p in model.params.items():
        if p.mask is not None and np.any(p.data[~p.mask] != 0):
            raise AssertionError(f"masked entries of {name} drifted from zero")


# -- records ----------------------------------------------------------------------

@dataclass
class RunRecord:
    variant: str
    seed: int
    config_digest: str
    mask_digest: str
    epochs: List[dict]
    stop_epoch: int
    best_epoch: int
    wall_time: float
    threads: int
    final: dict
    best: dict
    parameters: Dict[str, int]
    version: str = __version__

    @property
    def lr_trajectory(self) -> List[float]:
        return [e["lr"] for e in self.epochs]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def summary(self, which: str = "best") -> dict:
        m = self.best if which == "best" else self.final
        return {"test_acc": m["accuracy"], "test_loss": m["loss"], "f1_macro": m["macro"]["f1"],
                "train_acc": m["train_acc"], "train_loss": m["train_loss"]}


def write_epochs_csv(epochs: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPOCH_FIELDS)
        for e in epochs:
            w.writerow([e["epoch"]] + [repr(float(e[k])) for k in EPOCH_FIELDS[1:]])


def _metrics_bundle(ev: dict, split: Split, class_names, train_stats: dict) -> tuple:
    report = classification_report(split.labels, ev["predictions"], class_names)
    report["loss"] = ev["loss"]
    report["train_loss"], report["train_acc"] = train_stats["loss"], train_stats["acc"]
    rocs = roc_auc_ovr(split.labels, ev["probabilities"], class_names)
    report["auc"] = {k: c.auc for k, c in rocs.items()}
    return report, rocs


def run_seed(variant: str, model_cfg: BioNicConfig, train_cfg: TrainConfig, masks: ConnectivityMasks,
             data: FerDataset, seed: int, run_dir=None, log: Optional[Callable[[str], None]] = None) -> RunRecord:
    """Train one seed end to end; restores the best-test-loss weights for the reported metrics."""
    names = CLASS_NAMES[:model_cfg.n_classes]
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    with threadpool_limits(limits=train_cfg.threads):
        threads = max((lib.get("num_threads", 1) for lib in threadpool_info()), default=1)
        model = BioNicModel(model_cfg, masks, RngStream(seed, "init"))
        opt = Adam(model.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
        weights = class_weights(data.train.labels, model_cfg.n_classes) if train_cfg.class_weighting else None
        sched = PlateauScheduler(train_cfg.lr, train_cfg.scheduler)
        stopper = EarlyStopper(train_cfg.early_stop_patience, train_cfg.scheduler.threshold)
        epochs, best_state, best_train, ev = [], model.state_dict(), None, None
        for epoch in range(1, train_cfg.max_epochs + 1):
            lr = opt.lr
            try:
                tr = train_epoch(model, data.train, opt, train_cfg, seed, epoch, weights)
            except NonFiniteLossError as exc:
                if run_dir is not None:
                    write_json(exc.diagnostics, run_dir / "diagnostics.json")
                raise
            ev = evaluate(model, data.test, train_cfg.eval_batch_size, weights, train_cfg.smoothing)
            epochs.append({"epoch": epoch, "lr": lr, "train_loss": tr["loss"], "train_acc": tr["acc"],
                           "test_loss": ev["loss"], "test_acc": ev["acc"]})
            if log:
                log(f"[{variant} seed {seed}] epoch {epoch:3d} lr {lr:.2e} train {tr['loss']:.4f}/{tr['acc']:.4f} "
                    f"test {ev['loss']:.4f}/{ev['acc']:.4f}")
            if epoch % train_cfg.mask_check_every == 0:
                assert_masks_hold(model)
            stop = stopper.step(ev["loss"], epoch)
            if stopper.improved:
                best_state, best_train = model.state_dict(), tr
            opt.lr = sched.step(ev["loss"])
            if stop:
                break
        assert_masks_hold(model)
        final, final_rocs = _metrics_bundle(ev, data.test, names, tr)
        final_state = model.state_dict()
        model.load_state_dict(best_state)
        best_ev = evaluate(model, data.test, train_cfg.eval_batch_size, weights, train_cfg.smoothing)
        best, best_rocs = _metrics_bundle(best_ev, data.test, names, best_train)
        best["epoch"] = stopper.best_epoch
    record = RunRecord(variant=variant, seed=seed, config_digest=protocol_digest(model_cfg, train_cfg),
                       mask_digest=masks.digest(), epochs=epochs, stop_epoch=epochs[-1]["epoch"],
                       best_epoch=stopper.best_epoch, wall_time=time.perf_counter() - started, threads=threads,
                       final=final, best=best, parameters=parameter_count(model, include_masked=False))
    if run_dir is not None:
        write_epochs_csv(epochs, run_dir / "epochs.csv")
        meta = {"variant": variant, "seed": seed, "config_digest": record.config_digest,
                "mask_digest": record.mask_digest, "version": __version__}
        write_evaluation(run_dir, best, best_rocs, {**meta, "which": "best_checkpoint", "threads": threads,
                                                    "wall_time": record.wall_time, "stop_epoch": record.stop_epoch})
        write_evaluation(run_dir / "final_epoch", final, final_rocs, {**meta, "which": "final_epoch"})
        save_checkpoint(model, run_dir / "checkpoint.bnck",
                        meta={**meta, "which": "best_checkpoint", "train": train_cfg.to_dict()})
        write_json(record.to_dict(), run_dir / "record.json")
        model.load_state_dict(final_state)
    return record


@dataclass
class ExperimentResult:
    variant: str
    records: List[RunRecord]
    summary: Dict[str, tuple]
    parameters: int


def summarize(records: Sequence[RunRecord], which: str = "best") -> Dict[str, tuple]:
    rows = [r.summary(which) for r in records]
    return {k: aggregate(row[k] for row in rows) for k in rows[0]}


def run_experiment(variant: str, model_cfg: BioNicConfig, train_cfg: TrainConfig, masks: ConnectivityMasks,
                   data: FerDataset, out_dir=None, seeds: Optional[Sequence[int]] = None,
                   log: Optional[Callable[[str], None]] = None) -> ExperimentResult:
    """All seeds of one variant, aggregated as mean and sample std."""
    seeds = train_cfg.seeds if seeds is None else tuple(seeds)
    records = [run_seed(variant, model_cfg, train_cfg, masks, data, s,
                        None if out_dir is None else Path(out_dir) / str(s), log) for s in seeds]
    return ExperimentResult(variant, records, summarize(records), records[0].parameters["total"])
