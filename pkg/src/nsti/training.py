"""Supervised CTC training of the base model on the source domain."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from . import model as mdl
from .adapt import dev_error
from .ctc import ctc_loss_op, is_feasible
from .errors import TrainingError
from .optim import Optimizer
from .transforms import TransformSpec, apply
from .windowing import DEFAULT_WINDOW

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    lr: float = 3e-3
    optimizer: str = "madgrad"
    momentum: float = 0.9
    window: int = DEFAULT_WINDOW
    crop_stride: float = 0.5
    patience: int = 4
    seed: int = 1
    augment: TransformSpec | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def crop_labels(symbols, start: int, stop: int) -> list[int]:
    """Labels of the symbols whose centre falls inside ``[start, stop)``."""
    return [lab for a, b, lab in symbols if start <= (a + b) / 2.0 < stop]


def training_crops(recording, window: int, stride: float, rng: np.random.Generator):
    """Windows on the subsample grid with a random per-epoch phase."""
    x = recording.normalized()
    T = x.shape[0]
    step = max(mdl.SUBSAMPLE, int(round(stride * window)) // mdl.SUBSAMPLE * mdl.SUBSAMPLE)
    phase = int(rng.integers(0, step // mdl.SUBSAMPLE)) * mdl.SUBSAMPLE if step > mdl.SUBSAMPLE else 0
    crops = []
    for start in range(phase, max(T - window, 0) + 1, step):
        stop = min(start + window, T)
        labels = crop_labels(recording.symbols, start, stop)
        if labels and is_feasible(mdl.out_frames(stop - start), labels):
            crops.append((x[start:stop], labels))
    return crops


def train_step(ckpt: mdl.Checkpoint, x: np.ndarray, labels, optimizer: Optimizer) -> float:
    params = mdl.leaves(ckpt, requires_grad=True)
    logp = mdl.forward_graph(ckpt, x, "train_update_stats", params)
    loss = ctc_loss_op(logp, labels)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError("training loss is not finite")
    dc.backward(loss)
    optimizer.step(ckpt.params, {k: t.grad for k, t in params.items()})
    return value


def train_base(train_split, dev_split, model_config: mdl.ModelConfig, config: TrainConfig | None = None):
    """Train from ``init(model_config)``; return the best source-dev checkpoint.

    Also returns the per-epoch history ``[(epoch, mean_loss, dev_error)]``.
    """
    config = config or TrainConfig()
    ckpt = mdl.init(model_config)
    rng = np.random.default_rng(config.seed)
    opt = Optimizer(ckpt.params, config.optimizer, config.lr, config.momentum)
    best = ckpt.copy()
    best_err = dev_error(ckpt, dev_split) if config.epochs else float("inf")
    history = [(0, None, best_err)]
    stale = 0
    for epoch in range(1, config.epochs + 1):
        crops = [c for rec in train_split for c in training_crops(rec, config.window, config.crop_stride, rng)]
        losses = []
        for j in rng.permutation(len(crops)):
            x, labels = crops[j]
            if config.augment is not None:
                x = apply(config.augment, x, rng)
            losses.append(train_step(ckpt, x, labels, opt))
        err = dev_error(ckpt, dev_split)
        history.append((epoch, float(np.mean(losses)), err))
        log.info("epoch %d loss %.4f dev error %.4f", epoch, np.mean(losses), err)
        if err < best_err:
            best, best_err, stale = ckpt.copy(), err, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best, history
