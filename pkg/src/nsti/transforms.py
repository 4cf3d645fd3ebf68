"""Input transformations applied to the student copy of a segment."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import UsageError, ValidationError

KINDS = ("identity", "freq_mask", "cutout", "noise")

# Masks cover the same fraction of the frequency axis as 34 of 80 mel bins.
FREQ_MASK_SCALE = 0.42
FREQ_MASK_COUNT = 6


def scaled_mask_width(n_bins: int) -> int:
    return int(round(FREQ_MASK_SCALE * n_bins))


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "identity"
    n_masks: int = 0
    max_width: int = 0
    n_rects: int = 0
    max_time: int = 0
    max_freq: int = 0
    sigma: float = 0.0
    fill: float = 0.0
    # time masking, off unless explicitly requested for an ablation
    n_time_masks: int = 0
    max_time_width: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")
        ints = (self.n_masks, self.max_width, self.n_rects, self.max_time,
                self.max_freq, self.n_time_masks, self.max_time_width)
        if min(ints) < 0 or self.sigma < 0:
            raise ValidationError(f"transform counts, widths and sigma must be nonnegative: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def _time_masks(out, spec, rng):
    T = out.shape[0]
    for _ in range(spec.n_time_masks):
        w = int(rng.integers(0, min(spec.max_time_width, T) + 1))
        t0 = int(rng.integers(0, T - w + 1))
        out[t0:t0 + w, :] = spec.fill


def apply(spec: TransformSpec, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Return a transformed copy of the (T, F) spectrogram ``x``."""
    x = np.asarray(x, dtype=np.float64)
    T, F = x.shape
    if spec.kind == "identity":
        out = x.copy()
    elif spec.kind == "freq_mask":
        if spec.max_width > F:
            raise ValidationError(f"max_width {spec.max_width} exceeds {F} frequency bins")
        out = x.copy()
        for _ in range(spec.n_masks):
            w = int(rng.integers(0, spec.max_width + 1))
            f0 = int(rng.integers(0, F - w + 1))
            out[:, f0:f0 + w] = spec.fill
    elif spec.kind == "cutout":
        out = x.copy()
        for _ in range(spec.n_rects):
            h = int(rng.integers(0, min(spec.max_time, T) + 1))
            w = int(rng.integers(0, min(spec.max_freq, F) + 1))
            t0 = int(rng.integers(0, T - h + 1))
            f0 = int(rng.integers(0, F - w + 1))
            out[t0:t0 + h, f0:f0 + w] = spec.fill
    else:
        out = x + rng.normal(0.0, spec.sigma, size=x.shape)
    if spec.n_time_masks:
        _time_masks(out, spec, rng)
    return out


def draw_spec(name: str, n_bins: int = 32) -> TransformSpec:
    """Default spec for one row of the transform comparison."""
    if name == "specaugment":
        return TransformSpec("freq_mask", n_masks=FREQ_MASK_COUNT, max_width=scaled_mask_width(n_bins))
    if name == "identity":
        return TransformSpec("identity")
    if name == "noise":
        return TransformSpec("noise", sigma=0.5)
    if name == "cutout":
        return TransformSpec("cutout", n_rects=4, max_time=24, max_freq=scaled_mask_width(n_bins))
    raise UsageError(f"unknown transform {name!r}; expected specaugment, identity, noise or cutout")


def from_dict(d: dict) -> TransformSpec:
    return TransformSpec(**d)
