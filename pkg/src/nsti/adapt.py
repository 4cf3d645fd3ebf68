"""Per-recording noisy student-teacher adaptation and its variants.

Teacher and student are the same parameter set. Each step decodes the
clean segment with the current parameters, then trains on ``copies``
independently transformed views of it against that pseudo-label.

Settings:
    shuffled   segments revisited for ``epochs`` epochs in a fresh random order
    ordered    as shuffled, natural order
    online     one causal pass; each segment is transcribed before it is
               trained on; non-overlapping windows
    awmc       online, but labels and predictions come from an EMA teacher
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import model as mdl
from .ctc import blank_ratio, ctc_loss_op, greedy_decode, is_feasible
from .errors import ValidationError
from .metrics import pooled, wer
from .optim import Optimizer
from .transforms import TransformSpec, apply, draw_spec
from .windowing import DEFAULT_STRIDE, DEFAULT_WINDOW, segment, stitch

SETTINGS = ("shuffled", "ordered", "online", "awmc")
DEFAULT_LR = 9e-5


@dataclass(frozen=True)
class AdaptConfig:
    setting: str = "shuffled"
    transform: TransformSpec = field(default_factory=lambda: draw_spec("specaugment"))
    epochs: int = 5
    lr: float = DEFAULT_LR
    optimizer: str = "madgrad"
    momentum: float = 0.9
    eps: float = 1e-6
    copies: int = 2
    ema_alpha: float = 0.999
    seed: int = 0
    window: int = DEFAULT_WINDOW
    stride: float = DEFAULT_STRIDE

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValidationError(f"unknown setting {self.setting!r}; expected one of {SETTINGS}")
        if self.epochs < 0:
            raise ValidationError("epochs must be nonnegative")
        if self.setting in ("online", "awmc") and self.epochs != 1:
            raise ValidationError(f"the {self.setting} setting runs exactly one epoch")
        if self.lr < 0 or self.copies < 1:
            raise ValidationError("need lr >= 0 and copies >= 1")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValidationError("ema_alpha must lie in [0, 1]")
        if self.optimizer not in ("madgrad", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        d = dict(d)
        if isinstance(d.get("transform"), dict):
            d["transform"] = TransformSpec(**d["transform"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    transcript: list[int]
    wer: dict
    blank_ratio: float
    mean_loss: float | None = None
    steps: int = 0
    skipped: int = 0
    seconds: float = 0.0

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("seconds")
        return d


@dataclass
class AdaptReport:
    recording_id: int
    config: dict
    baseline: EpochRecord
    epochs: list[EpochRecord]
    n_segments: int
    n_frames: int

    @property
    def final(self) -> EpochRecord:
        return self.epochs[-1] if self.epochs else self.baseline

    @property
    def final_transcript(self) -> list[int]:
        return self.final.transcript

    @property
    def segments_processed(self) -> int:
        return sum(e.steps + e.skipped for e in self.epochs)

    def curve(self) -> list[EpochRecord]:
        return [self.baseline, *self.epochs]

    def to_dict(self, timing: bool = False) -> dict:
        return {
            "recording_id": self.recording_id,
            "config": self.config,
            "baseline": self.baseline.to_dict(timing),
            "epochs": [e.to_dict(timing) for e in self.epochs],
            "final_transcript": self.final_transcript,
            "n_segments": self.n_segments,
            "n_frames": self.n_frames,
            "segments_processed": self.segments_processed,
        }

    def to_json(self, timing: bool = False) -> str:
        return json.dumps(self.to_dict(timing), sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# Transcription
# ---------------------------------------------------------------------------

def transcribe_lattice(ckpt: mdl.Checkpoint, x: np.ndarray, window: int = DEFAULT_WINDOW,
                       stride: float = DEFAULT_STRIDE) -> mdl.LogProbLattice:
    segs = segment(x, window, stride)
    pieces = [(s.start // mdl.SUBSAMPLE, mdl.forward(ckpt, s.data, "eval")) for s in segs]
    return stitch(pieces, mdl.out_frames(x.shape[0]))


def transcribe(ckpt: mdl.Checkpoint, x: np.ndarray, window: int = DEFAULT_WINDOW,
               stride: float = DEFAULT_STRIDE) -> list[int]:
    return greedy_decode(transcribe_lattice(ckpt, x, window, stride))


def _record(epoch, lattice, reference, losses=(), skipped=0, seconds=0.0) -> EpochRecord:
    hyp = greedy_decode(lattice)
    return EpochRecord(
        epoch=epoch,
        transcript=hyp,
        wer=wer(reference, hyp).to_dict(),
        blank_ratio=blank_ratio(lattice),
        mean_loss=float(np.mean(losses)) if len(losses) else None,
        steps=len(losses),
        skipped=skipped,
        seconds=seconds,
    )


# ---------------------------------------------------------------------------
# One self-training step
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    loss: float | None
    copy_losses: list[float]
    labels: list[int]

    @property
    def skipped(self) -> bool:
        return self.loss is None


def nsti_step(ckpt: mdl.Checkpoint, x: np.ndarray, config: AdaptConfig, rng: np.random.Generator,
              optimizer: Optimizer, teacher_lattice: mdl.LogProbLattice | None = None) -> StepResult:
    """Pseudo-label ``x`` with the teacher, update ``ckpt`` on augmented copies.

    Returns a skipped result (loss ``None``) when the pseudo-label is empty or
    cannot be aligned; nothing is updated in that case.
    """
    lattice = teacher_lattice if teacher_lattice is not None else mdl.forward(ckpt, x, "eval")
    target = greedy_decode(lattice)
    if not target or not is_feasible(lattice.n_frames, target):
        return StepResult(None, [], target)
    params = mdl.leaves(ckpt, requires_grad=True)
    total = None
    copy_losses = []
    for _ in range(config.copies):
        view = apply(config.transform, x, rng)
        logp = mdl.forward_graph(ckpt, view, "train_frozen_stats", params)
        loss = ctc_loss_op(logp, target)
        copy_losses.append(loss.item())
        total = loss if total is None else dc.add(total, loss)
    mean_loss = dc.scale(total, 1.0 / config.copies)
    dc.backward(mean_loss)
    optimizer.step(ckpt.params, {k: t.grad for k, t in params.items()})
    return StepResult(mean_loss.item(), copy_losses, target)


def _streams(config: AdaptConfig, recording_id: int):
    seq = np.random.SeedSequence([config.seed, recording_id])
    order_seq, aug_seq = seq.spawn(2)
    return np.random.default_rng(order_seq), np.random.default_rng(aug_seq)


def _optimizer(ckpt, config: AdaptConfig) -> Optimizer:
    return Optimizer(ckpt.params, config.optimizer, config.lr, config.momentum, config.eps)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def nsti_run(base: mdl.Checkpoint, recording, config: AdaptConfig, eval_each_epoch: bool = True,
             on_epoch=None):
    """Adapt a fresh copy of ``base`` to one recording, then transcribe it.

    ``on_epoch(epoch, ckpt)`` is called after each epoch's updates; it must
    not modify the checkpoint.
    """
    if config.setting == "online":
        return online_run(base, recording, config)
    if config.setting == "awmc":
        return awmc_run(base, recording, config)
    ckpt = base.copy()
    x = recording.normalized()
    ref = recording.reference
    segs = segment(x, config.window, config.stride)
    order_rng, aug_rng = _streams(config, recording.recording_id)
    opt = _optimizer(ckpt, config)
    t0 = time.perf_counter()
    lattice = transcribe_lattice(ckpt, x, config.window, config.stride)
    baseline = _record(0, lattice, ref, seconds=time.perf_counter() - t0)
    epochs = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = order_rng.permutation(len(segs)) if config.setting == "shuffled" else range(len(segs))
        losses, skipped = [], 0
        for j in order:
            res = nsti_step(ckpt, segs[j].data, config, aug_rng, opt)
            if res.skipped:
                skipped += 1
            else:
                losses.append(res.loss)
        seconds = time.perf_counter() - t0
        if on_epoch is not None:
            on_epoch(epoch, ckpt)
        if eval_each_epoch or epoch == config.epochs:
            t1 = time.perf_counter()
            lattice = transcribe_lattice(ckpt, x, config.window, config.stride)
            seconds += time.perf_counter() - t1
            epochs.append(_record(epoch, lattice, ref, losses, skipped, seconds))
        else:
            epochs.append(EpochRecord(epoch, [], {}, float("nan"), float(np.mean(losses)) if losses else None,
                                      len(losses), skipped, seconds))
    report = AdaptReport(recording.recording_id, config.to_dict(), baseline, epochs, len(segs), x.shape[0])
    return report, ckpt


def _causal_run(base, recording, config: AdaptConfig, ema_alpha: float | None):
    student = base.copy()
    teacher = base.copy() if ema_alpha is not None else student
    x = recording.normalized()
    ref = recording.reference
    segs = segment(x, config.window, 1.0)
    _, aug_rng = _streams(config, recording.recording_id)
    opt = _optimizer(student, config)
    t0 = time.perf_counter()
    lattice = transcribe_lattice(base, x, config.window, config.stride)
    baseline = _record(0, lattice, ref, seconds=time.perf_counter() - t0)
    t0 = time.perf_counter()
    pieces, losses, skipped = [], [], 0
    for seg in segs:
        lattice = mdl.forward(teacher, seg.data, "eval")
        pieces.append((seg.start // mdl.SUBSAMPLE, lattice))
        res = nsti_step(student, seg.data, config, aug_rng, opt, teacher_lattice=lattice)
        if res.skipped:
            skipped += 1
        else:
            losses.append(res.loss)
        if ema_alpha is not None:
            for name, t in teacher.params.items():
                t *= ema_alpha
                t += (1.0 - ema_alpha) * student.params[name]
    stitched = stitch(pieces, mdl.out_frames(x.shape[0]))
    seconds = time.perf_counter() - t0
    record = _record(1, stitched, ref, losses, skipped, seconds)
    report = AdaptReport(recording.recording_id, config.to_dict(), baseline, [record], len(segs), x.shape[0])
    return report, teacher


def online_run(base: mdl.Checkpoint, recording, config: AdaptConfig):
    """Single causal pass; each window is transcribed, then trained on."""
    return _causal_run(base, recording, config, None)


def awmc_run(base: mdl.Checkpoint, recording, config: AdaptConfig):
    """Causal pass with an EMA teacher providing labels and predictions."""
    return _causal_run(base, recording, config, config.ema_alpha)


# ---------------------------------------------------------------------------
# Self-training on a separate adaptation split
# ---------------------------------------------------------------------------

def dev_error(ckpt: mdl.Checkpoint, recordings, window=DEFAULT_WINDOW, stride=DEFAULT_STRIDE) -> float:
    return pooled(wer(r.reference, transcribe(ckpt, r.normalized(), window, stride)) for r in recordings).wer


def nst_train(base: mdl.Checkpoint, split, config: AdaptConfig, dev_split):
    """Noisy student training over all segments of ``split``.

    Returns ``[(checkpoint, dev_error), ...]`` for the base model and after
    every epoch, for best-checkpoint selection.
    """
    if not split:
        raise ValidationError("adaptation split is empty")
    config = replace(config, setting="shuffled")
    ckpt = base.copy()
    items = []
    for rec in split:
        x = rec.normalized()
        items.extend(s.data for s in segment(x, config.window, config.stride))
    order_rng, aug_rng = _streams(config, -1 % (2**31))
    opt = _optimizer(ckpt, config)
    history = [(base.copy(), dev_error(base, dev_split, config.window, config.stride))]
    for _ in range(config.epochs):
        for j in order_rng.permutation(len(items)):
            nsti_step(ckpt, items[j], config, aug_rng, opt)
        history.append((ckpt.copy(), dev_error(ckpt, dev_split, config.window, config.stride)))
    return history
