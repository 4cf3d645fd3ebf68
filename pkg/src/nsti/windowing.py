"""Sliding-window segmentation and overlap-averaged stitching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StitchError, ValidationError
from .model import SUBSAMPLE, LogProbLattice

DEFAULT_WINDOW = 96
DEFAULT_STRIDE = 0.125


@dataclass
class Segment:
    start: int
    data: np.ndarray  # W x F slice
    index: int

    @property
    def length(self) -> int:
        return self.data.shape[0]


def stride_frames(window: int, stride: float, factor: int = SUBSAMPLE) -> int:
    s = int(round(stride * window))
    return max(factor, (s // factor) * factor)


def segment_starts(T: int, window: int, stride: float = DEFAULT_STRIDE, factor: int = SUBSAMPLE) -> list[int]:
    if window < factor:
        raise ValidationError(f"window {window} is smaller than the subsample factor {factor}")
    if not 0.0 < stride <= 1.0:
        raise ValidationError(f"stride fraction must lie in (0, 1], got {stride}")
    if T <= window:
        return [0]
    step = stride_frames(window, stride, factor)
    starts = list(range(0, T - window + 1, step))
    if starts[-1] + window < T:
        # right-align the tail, rounded up to stay on the subsample grid
        tail = -(-(T - window) // factor) * factor
        if tail > starts[-1]:
            starts.append(tail)
    return starts


def segment(x: np.ndarray, window: int = DEFAULT_WINDOW, stride: float = DEFAULT_STRIDE,
            factor: int = SUBSAMPLE) -> list[Segment]:
    """Cut a (T, F) spectrogram into overlapping windows."""
    x = np.asarray(x)
    starts = segment_starts(x.shape[0], window, stride, factor)
    return [Segment(s, x[s:s + window], i) for i, s in enumerate(starts)]


def stitch(pieces, total_frames: int | None = None) -> LogProbLattice:
    """Average overlapping probability rows and return a log lattice.

    ``pieces`` holds ``(offset, lattice)`` pairs in output-frame units. Means
    are accumulated incrementally, so frames covered by identical rows come
    out bit-identical regardless of how many pieces cover them.
    """
    pieces = [(int(o), np.asarray(getattr(l, "logp", l), dtype=np.float64)) for o, l in pieces]
    if not pieces:
        raise StitchError("nothing to stitch")
    end = max(o + l.shape[0] for o, l in pieces)
    total = end if total_frames is None else total_frames
    C = pieces[0][1].shape[1]
    mean = np.zeros((total, C))
    count = np.zeros(total, dtype=np.int64)
    for off, logp in pieces:
        stop = min(off + logp.shape[0], total)
        rows = np.exp(logp[:stop - off])
        count[off:stop] += 1
        mean[off:stop] += (rows - mean[off:stop]) / count[off:stop, None]
    gaps = np.flatnonzero(count == 0)
    if gaps.size:
        raise StitchError(f"output frames {gaps[0]}..{gaps[-1]} are not covered by any piece")
    with np.errstate(divide="ignore"):
        return LogProbLattice(np.log(mean))
