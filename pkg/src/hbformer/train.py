"""Training loop, evaluation and multi-seed aggregation."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .config import RunConfig
from .data import SegmentationSample, augment, stack
from .losses import bce_dice_loss
from .metrics import ConfusionCounts, MetricsReport, aggregate
from .model import HBFormer
from .optim import LrSchedule, OptimizerState, cosine_lr, sgd_step
from .tensor import Tensor, no_grad

DEFAULT_SEEDS = (3407, 8261, 10993)


class NumericalError(RuntimeError):
    """A non-finite loss or gradient; ``model`` still holds the last finite weights."""

    def __init__(self, message: str, step: int, seed: int, model: HBFormer):
        super().__init__(message)
        self.step = step
        self.seed = seed
        self.model = model


@dataclass
class TrainResult:
    seed: int
    model: HBFormer
    report: MetricsReport
    losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def eval_threads() -> int:
    """Worker count for evaluation, capped by ``HBFORMER_THREADS`` (default 1)."""
    raw = os.environ.get("HBFORMER_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def predict(model: HBFormer, images: np.ndarray) -> np.ndarray:
    """Hard label maps ``[B, H, W]`` (argmax over class logits)."""
    with no_grad():
        logits = model(Tensor(images)).data
    return logits.argmax(axis=1).astype(np.uint8)


def evaluate(model: HBFormer, dataset: list[SegmentationSample], batch_size: int = 4,
             seed: int | None = None, threads: int | None = None,
             ) -> tuple[MetricsReport, list[np.ndarray]]:
    """Pooled pixel counts over the whole dataset, in eval mode.

    Returns the report and one predicted mask per sample. Batches may run on
    several threads; weights are only read.
    """
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    num_classes = model.cfg.num_classes
    was_training = model.training
    model.eval()
    batches = [dataset[i:i + batch_size] for i in range(0, len(dataset), batch_size)]

    def run(batch):
        images, _ = stack(batch)
        return predict(model, images)

    workers = min(threads or eval_threads(), len(batches))
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                preds = list(pool.map(run, batches))
        else:
            preds = [run(b) for b in batches]
    finally:
        model.train(was_training)
    masks = [m for p in preds for m in p]
    counts = ConfusionCounts(num_classes)
    for pred, sample in zip(masks, dataset):
        counts = counts + ConfusionCounts.from_masks(pred, sample.mask, num_classes)
    return MetricsReport.from_counts(counts, len(dataset), seed), masks


def _clip(grads, max_norm: float):
    total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads if g is not None))
    if total > max_norm:
        s = max_norm / total
        grads = [None if g is None else g * g.dtype.type(s) for g in grads]
    return grads


def train_seed(cfg: RunConfig, dataset: list[SegmentationSample], seed: int,
               eval_dataset: list[SegmentationSample] | None = None,
               on_eval: Callable[[int, HBFormer], None] | None = None,
               log: Callable[[str], None] | None = None) -> TrainResult:
    """Train one model from ``seed`` for ``cfg.total_steps`` optimizer steps.

    Epoch ``e`` shuffles and augments with a generator seeded ``(seed, e)``,
    so runs are reproducible and independent of how many steps came before.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    model = HBFormer(cfg.model_config(), np.random.default_rng(seed))
    params = model.parameters()
    buffers = model.buffers()
    state = OptimizerState.create(params, cfg.momentum, cfg.weight_decay, cfg.lr)
    sched = LrSchedule(cfg.lr, cfg.lr_min, cfg.total_steps)
    losses: list[float] = []
    step = epoch = 0
    while step < cfg.total_steps:
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            if cfg.augment:
                batch = [augment(s, rng) for s in batch]
            images, masks = stack(batch)
            state.current_lr = cosine_lr(step, sched)
            model.zero_grad()
            # the forward pass moves batch-norm statistics, so keep them for a rollback
            saved = [b.copy() for b in buffers]
            loss = bce_dice_loss(model(Tensor(images)), masks.astype(np.int64))
            value = loss.item()
            grads = None
            if np.isfinite(value):
                loss.backward()
                grads = [p.grad for p in params]
            if grads is None or any(g is not None and not np.isfinite(g).all() for g in grads):
                for b, old in zip(buffers, saved):
                    b[...] = old
                what = f"loss is {value}" if grads is None else "non-finite gradient"
                raise NumericalError(f"seed {seed}: {what} at step {step}", step, seed, model)
            if cfg.grad_clip > 0:
                grads = _clip(grads, cfg.grad_clip)
            sgd_step(params, grads, state)
            losses.append(value)
            step += 1
            if log and (step == 1 or step % 25 == 0 or step == cfg.total_steps):
                log(f"seed {seed} step {step}/{cfg.total_steps} loss {value:.5f} lr {state.current_lr:.3g}")
            if on_eval and cfg.eval_every and step % cfg.eval_every == 0:
                on_eval(step, model)
            if step >= cfg.total_steps:
                break
        epoch += 1
    model.zero_grad()
    report, _ = evaluate(model, eval_dataset or dataset, cfg.batch_size, seed)
    return TrainResult(seed, model, report, losses)


def train_loop(cfg: RunConfig, dataset: list[SegmentationSample], seeds=None,
               eval_dataset=None, log=None) -> list[tuple[dict, MetricsReport]]:
    """One training run per seed; returns ``(state_dict, report)`` pairs."""
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    out = []
    for seed in seeds if seeds is not None else cfg.seeds:
        result = train_seed(cfg, dataset, seed, eval_dataset, log=log)
        out.append((result.model.state_dict(), result.report))
    return out


def summarize(reports: list[MetricsReport]) -> dict[str, np.ndarray]:
    """Mean and std across seeds of every score."""
    return aggregate(reports)


# decoder / encoder-FFN toggles of the component ablation, baseline last
ABLATION_VARIANTS = {
    "full": {"decoder": "mff", "encoder_ffn": "effn"},
    "mff_only": {"decoder": "mff", "encoder_ffn": "ffn"},
    "effn_only": {"decoder": "plain", "encoder_ffn": "effn"},
    "baseline": {"decoder": "plain", "encoder_ffn": "ffn"},
}


def run_ablation(cfg: RunConfig, train_set: list[SegmentationSample],
                 test_set: list[SegmentationSample], seeds=None,
                 log: Callable[[str], None] | None = None) -> dict[str, list[MetricsReport]]:
    """Train every toggle combination for every seed; reports are on ``test_set``."""
    out: dict[str, list[MetricsReport]] = {}
    for name, toggles in ABLATION_VARIANTS.items():
        variant = replace(cfg, **toggles)
        out[name] = []
        for seed in seeds if seeds is not None else cfg.seeds:
            result = train_seed(variant, train_set, seed, eval_dataset=test_set)
            out[name].append(result.report)
            if log:
                log(f"{name} seed {seed}: mean DSC {result.report.mean_dsc:.4f} "
                    f"per class {[round(d, 4) for d in result.report.per_class_dsc]}")
    return out
