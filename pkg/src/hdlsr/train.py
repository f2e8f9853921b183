"""Mini-batch training with Adam and early stopping, plus evaluation."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .data import Manifest, SamplePair
from .losses import LossValue, LossWeights, total_loss
from .metrics import MetricsReport, evaluate_cube, mpsnr, sam
from .model import ModelConfig, ModelParams, hdl_backward, hdl_forward, hdl_forward_train, init_params
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    loss_weights: LossWeights = LossWeights()
    max_epochs: int = 500
    max_steps: int | None = None
    early_stop_patience: int = 10
    early_stop_min_delta: float = 0.0
    val_fraction: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainRecord:
    epoch: int
    train: LossValue
    val: LossValue
    val_mpsnr: float
    val_sam: float
    seconds: float


HISTORY_COLUMNS = ("epoch", "train_total", "val_total", "val_mpsnr", "val_sam", "seconds")


def format_history(history: Sequence[TrainRecord]) -> str:
    """Tab-separated history table; ``seconds`` is the only wall-clock column."""
    rows = ["\t".join(HISTORY_COLUMNS)]
    for r in history:
        rows.append(
            f"{r.epoch}\t{r.train.total!r}\t{r.val.total!r}\t{r.val_mpsnr!r}\t{r.val_sam!r}\t{r.seconds:.3f}"
        )
    return "\n".join(rows) + "\n"


def early_stop_check(history: Sequence[float], patience: int, min_delta: float = 0.0) -> tuple[bool, int]:
    """Return ``(stop, best_index)`` for a list of validation losses.

    A value counts as an improvement only when it beats the running best by
    more than ``min_delta``. ``best_index`` is the argmin of the history, ties
    going to the earliest epoch.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if not history:
        return False, -1
    best = history[0]
    stale = 0
    for v in history[1:]:
        if v < best - min_delta:
            best, stale = v, 0
        else:
            stale += 1
    return stale >= patience, int(np.argmin(history))


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, checkpoint: Checkpoint):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # best validation loss
    last: Checkpoint
    history: list[TrainRecord]
    step_losses: list[float] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.step_losses[0]


def _stack(pairs: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([p.lr_up for p in pairs]).astype(np.float32)
    y = np.stack([p.hr for p in pairs]).astype(np.float32)
    return x, y


def _mean_loss(values: Sequence[LossValue]) -> LossValue:
    n = len(values)
    return LossValue(*(sum(getattr(v, f.name) for v in values) / n for f in fields(LossValue)))


def validate(params: ModelParams, pairs: Sequence[SamplePair], w: LossWeights):
    """Infer-mode mean loss, MPSNR and SAM over ``pairs`` (one pair at a time)."""
    losses, psnrs, sams = [], [], []
    for p in pairs:
        x, y = _stack([p])
        out = hdl_forward(x, params, "infer")
        lv, _ = total_loss(y, out, w)
        losses.append(lv)
        psnrs.append(mpsnr(y[0], out[0]))
        sams.append(sam(y[0], out[0]))
    return _mean_loss(losses), float(np.mean(psnrs)), float(np.mean(sams))


def _resolve_data(data, cfg: TrainConfig):
    if isinstance(data, (str, Path)):
        data = Manifest.load(data)
    if isinstance(data, Manifest):
        return data.load_pairs("train"), data.load_pairs("val")
    train_pairs, val_pairs = data
    return list(train_pairs), list(val_pairs)


def train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    data,
    checkpoint_dir: Path | None = None,
    on_epoch: Callable[[TrainRecord], None] | None = None,
) -> TrainResult:
    """Train from scratch.

    ``data`` is a pairs manifest (object or path) or a ``(train, val)`` tuple
    of :class:`SamplePair` lists. Runs until ``max_epochs``, ``max_steps`` or
    early stopping, and returns the best-validation checkpoint together with
    the full history.
    """
    train_pairs, val_pairs = _resolve_data(data, cfg)
    if not train_pairs or not val_pairs:
        raise ValueError("training needs non-empty train and validation sets")
    if cfg.batch_size > len(train_pairs):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds train set size {len(train_pairs)}")
    if train_pairs[0].hr.shape[-1] != model_cfg.bands:
        raise ValueError(f"data has {train_pairs[0].hr.shape[-1]} bands, model expects {model_cfg.bands}")

    params = init_params(model_cfg)
    adam = AdamState.zeros_like(params.trainable())
    w = cfg.loss_weights
    history: list[TrainRecord] = []
    step_losses: list[float] = []
    step = 0
    best: Checkpoint | None = None

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(params, step, adam, {"seed": cfg.seed, "epoch": epoch}, {"train": cfg.to_dict()})

    n = len(train_pairs)
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        epoch_losses = []
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            x, y = _stack([train_pairs[i] for i in order[start:start + cfg.batch_size]])
            out, tape = hdl_forward_train(x, params)
            lv, g = total_loss(y, out, w)
            if not np.isfinite(lv.total):
                raise TrainingAborted(f"non-finite loss at step {step}", snapshot(epoch))
            grads, _ = hdl_backward(tape, g)
            new, adam = adam_step(
                params.trainable(), grads, adam,
                cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon,
            )
            params = params.updated({**new, **tape.bn_states})
            epoch_losses.append(lv)
            step_losses.append(lv.total)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break

        val_loss, val_psnr, val_sam = validate(params, val_pairs, w)
        rec = TrainRecord(epoch, _mean_loss(epoch_losses), val_loss, val_psnr, val_sam, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d train %.6g val %.6g mpsnr %.3f sam %.3f", epoch, rec.train.total, val_loss.total,
                 val_psnr, val_sam)
        if on_epoch is not None:
            on_epoch(rec)
        if best is None or val_loss.total < best.extra["val_total"]:
            best = snapshot(epoch)
            best.extra["val_total"] = val_loss.total
        if checkpoint_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / "last.ckpt", snapshot(epoch))
        stop, _ = early_stop_check([r.val.total for r in history], cfg.early_stop_patience,
                                   cfg.early_stop_min_delta)
        if stop or (cfg.max_steps is not None and step >= cfg.max_steps):
            break

    return TrainResult(best, snapshot(history[-1].epoch), history, step_losses)


@dataclass
class EvalResult:
    reports: list[MetricsReport]
    aggregate: dict[str, float]


def aggregate_reports(reports: Sequence[MetricsReport]) -> dict[str, float]:
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in MetricsReport.SCALARS}


def evaluate(ckpt: Checkpoint | ModelParams | None, data, split: str | None = "val") -> EvalResult:
    """Metrics of the infer-mode network output against HR, per pair and averaged.

    ``ckpt=None`` scores the bilinear pre-upsampled input itself (the
    interpolation baseline).
    """
    pairs = data.load_pairs(split) if isinstance(data, Manifest) else list(data)
    params = ckpt.params if isinstance(ckpt, Checkpoint) else ckpt
    reports = []
    for p in pairs:
        if params is None:
            out = p.lr_up
        else:
            if p.hr.shape[-1] != params.config.bands:
                raise ValueError(f"pair has {p.hr.shape[-1]} bands, model expects {params.config.bands}")
            out = hdl_forward(p.lr_up[None].astype(np.float32), params, "infer")[0]
        reports.append(evaluate_cube(p.hr, out))
    if not reports:
        raise ValueError("no pairs to evaluate")
    return EvalResult(reports, aggregate_reports(reports))
