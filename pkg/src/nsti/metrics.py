"""Token error rate with S/I/D counts, relative reduction, real-time factor.

Synthetic symbols play the role of words, so "WER" here is token error.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

from .errors import ValidationError
from .kernels import edit_ops

FRAMES_PER_SECOND = 100.0


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return self.errors / max(1, self.ref_len)

    def __add__(self, other: "WerBreakdown") -> "WerBreakdown":
        return WerBreakdown(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_len + other.ref_len,
        )

    def rates(self) -> dict:
        n = max(1, self.ref_len)
        return {"sub": self.substitutions / n, "ins": self.insertions / n, "del": self.deletions / n}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wer"] = self.wer
        return d


EMPTY = WerBreakdown(0, 0, 0, 0)


def wer(reference, hypothesis) -> WerBreakdown:
    s, i, d = edit_ops(list(reference), list(hypothesis))
    return WerBreakdown(s, i, d, len(reference))


def pooled(breakdowns) -> WerBreakdown:
    total = EMPTY
    for b in breakdowns:
        total = total + b
    return total


def werr(baseline: float, adapted: float) -> float:
    if baseline <= 0:
        raise ValidationError("relative reduction is undefined for a zero baseline")
    return (baseline - adapted) / baseline


def rtf(processing_seconds: float, duration_seconds: float) -> float:
    if duration_seconds <= 0:
        raise ValidationError("recording duration must be positive")
    return processing_seconds / duration_seconds


def duration_seconds(n_frames: int, fps: float = FRAMES_PER_SECOND) -> float:
    return n_frames / fps
