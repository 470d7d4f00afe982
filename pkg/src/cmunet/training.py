"""Training loop, evaluation, inference and the three-variant ablation."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from cmunet.checkpoint import save_checkpoint
from cmunet.config import RunConfig, save_config
from cmunet.data import Sample, SplitPlan, batches, read_image, split
from cmunet.engine import ops
from cmunet.engine.tensor import Tensor, no_grad
from cmunet.errors import NumericError
from cmunet.losses import combined_loss
from cmunet.metrics import DatasetMetrics, RunSummary, SegMetrics, aggregate, aggregate_runs, binarize, compute_metrics
from cmunet.model import Model, build_model, forward, parameter_count
from cmunet.optim import AdamState, adam_step

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "train_loss", "val_iou", "val_f1", "wall_time")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_iou: float
    val_f1: float
    wall_time: float

    def row(self) -> list[str]:
        return [str(self.epoch), repr(self.train_loss), repr(self.val_iou), repr(self.val_f1), f"{self.wall_time:.3f}"]


@dataclass
class TrainResult:
    model: Model
    adam: AdamState
    plan: SplitPlan
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_iou: float = -1.0
    best_metrics: DatasetMetrics | None = None


def predict_probs(model: Model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Eval-mode sigmoid probabilities, N x 1 x S x S."""
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunk = Tensor(images[start:start + batch_size].astype(model.dtype, copy=False))
            out.append(ops.sigmoid(forward(model, chunk, training=False)).data)
    return np.concatenate(out, axis=0)


def evaluate(model: Model, samples: Sequence[Sample], threshold: float = 0.5,
             batch_size: int = 8) -> tuple[list[SegMetrics], DatasetMetrics]:
    images = np.stack([s.image for s in samples])
    preds = binarize(predict_probs(model, images, batch_size), threshold)
    per_image = [compute_metrics(p, s.mask) for p, s in zip(preds, samples)]
    return per_image, aggregate(per_image)


def train(config: RunConfig, samples: Sequence[Sample], out_dir: str | Path | None = None,
          with_optimizer: bool = False, progress: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Run the full protocol: seeded split, augment -> forward -> loss ->
    Adam, per-epoch validation, best-IoU and last checkpoints."""
    plan = split(samples, config.seed, config.train_fraction)
    by_id = {s.id: s for s in samples}
    train_set = [by_id[i] for i in plan.train]
    val_set = [by_id[i] for i in plan.val]

    model = build_model(config.model_config(), seed=config.seed, dtype=np.dtype(config.dtype))
    adam = AdamState.for_params(model.params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    result = TrainResult(model=model, adam=adam, plan=plan)

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(config, out / "config.txt")
        (out / "split.json").write_text(json.dumps(plan.to_dict(), indent=1) + "\n")
        save_checkpoint(out / "last.ckpt", model, config, 0, adam if with_optimizer else None)
        save_checkpoint(out / "best.ckpt", model, config, 0, adam if with_optimizer else None)
        log_file = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(LOG_FIELDS)

    try:
        start = time.perf_counter()
        for epoch in range(1, config.epochs + 1):
            aug_rng = np.random.default_rng([config.seed, epoch, 1]) if config.augment else None
            loss_sum = 0.0
            for batch in batches(train_set, config.batch_size, config.seed, epoch, rng=aug_rng):
                loss_sum += train_step(model, adam, batch.images, batch.masks, config, batch.ids, epoch) * len(batch.ids)
            _, val = evaluate(model, val_set, config.threshold, config.batch_size)
            rec = EpochRecord(epoch, loss_sum / len(train_set), val.iou, val.f1, time.perf_counter() - start)
            result.history.append(rec)
            improved = val.iou > result.best_iou
            if improved:
                result.best_iou, result.best_epoch, result.best_metrics = val.iou, epoch, val
            if out is not None:
                writer.writerow(rec.row())
                log_file.flush()
                opt = adam if with_optimizer else None
                if improved:
                    save_checkpoint(out / "best.ckpt", model, config, epoch, opt)
                save_checkpoint(out / "last.ckpt", model, config, epoch, opt)
            if progress is not None:
                progress(rec)
            log.info("epoch %d loss %.5f val_iou %.4f", epoch, rec.train_loss, rec.val_iou)
    finally:
        if log_file is not None:
            log_file.close()
    return result


def train_step(model: Model, adam: AdamState, images: np.ndarray, masks: np.ndarray, config: RunConfig,
               ids: Sequence[str] = (), epoch: int = 0) -> float:
    model.zero_grad()
    try:
        logits = forward(model, Tensor(images.astype(model.dtype, copy=False)), training=True)
        loss = combined_loss(logits, Tensor(masks.astype(model.dtype, copy=False)), config.bce_weight, config.dice_smooth)
    except NumericError as exc:
        raise NumericError(f"epoch {epoch}, batch {list(ids)}: {exc}") from exc
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss at epoch {epoch}, batch {list(ids)}")
    loss.backward()
    try:
        adam_step(model.params, {n: p.grad for n, p in model.params.items()}, adam)
    except NumericError as exc:
        raise NumericError(f"epoch {epoch}, batch {list(ids)}: {exc}") from exc
    return value


def infer_mask(model: Model, image_path: str | Path, threshold: float = 0.5) -> np.ndarray:
    """Binary uint8 mask (0/255) at the source image's resolution."""
    cfg = model.config
    with Image.open(image_path) as img:
        width, height = img.size
    arr = read_image(image_path, cfg.input_size, cfg.in_channels)
    mask = binarize(predict_probs(model, arr[None]), threshold)[0, 0] * np.uint8(255)
    out = Image.fromarray(mask)
    if out.size != (width, height):
        out = out.resize((width, height), Image.NEAREST)
    return np.asarray(out)


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8)).save(path)


# --------------------------------------------------------------------------
# ablation

VARIANTS = (
    ("baseline", False, False),
    ("+convmixer", True, False),
    ("+convmixer+msag", True, True),
)


@dataclass
class AblationRow:
    name: str
    use_convmixer: bool
    use_msag: bool
    parameters: int
    seeds: tuple[int, ...]
    runs: list[DatasetMetrics]
    summary: RunSummary


def ablate(config: RunConfig, samples: Sequence[Sample], seeds: Sequence[int] = (0, 1, 2),
           out_dir: str | Path | None = None) -> list[AblationRow]:
    """Train the three variants under identical seeds; metrics are from each
    run's best-validation-IoU epoch."""
    rows = []
    for name, use_cm, use_msag in VARIANTS:
        cfg = config.replace(use_convmixer=use_cm, use_msag=use_msag)
        runs = []
        for seed in seeds:
            run_dir = None if out_dir is None else Path(out_dir) / name / f"seed{seed}"
            res = train(cfg.replace(seed=seed), samples, run_dir)
            if res.best_metrics is None:
                _, res.best_metrics = evaluate(res.model, [s for s in samples if s.id in set(res.plan.val)],
                                               cfg.threshold, cfg.batch_size)
            runs.append(res.best_metrics)
        rows.append(AblationRow(name, use_cm, use_msag, parameter_count(cfg.model_config()), tuple(seeds),
                                runs, aggregate_runs(runs)))
    return rows
