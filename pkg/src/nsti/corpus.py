"""Synthetic log-spectrogram recordings with per-recording domain nuisances.

A recording is a run of utterances separated by silence. Each utterance is
a random symbol sequence rendered by placing per-symbol templates back to
back. All nuisance draws (tilt, gain, template drift) come from a generator
seeded by ``(domain.seed, recording_id)`` so that every utterance of one
recording shares them; per-cell noise is drawn on top.

Rendered values are clamped to ``[-CLAMP, CLAMP]`` before storage.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, GenerationError, ValidationError

CLAMP = 4.0
MAGIC = b"NSTI"
VERSION = 1
_HEADER = struct.Struct("<4sBII")


@dataclass(frozen=True)
class SymbolTemplate:
    symbol: int
    pattern: np.ndarray  # F x D, values in [0, 1]

    @property
    def duration(self) -> int:
        return self.pattern.shape[1]


@dataclass(frozen=True)
class DomainConfig:
    tilt: float = 0.0
    noise: float = 0.05
    drift: float = 0.0
    gain: float = 1.0
    seed: int = 0
    domain_id: str = "source"
    # exponential decay per frame of a time-smearing tail; 0 disables it
    reverb: float = 0.0

    def __post_init__(self):
        if self.noise < 0 or self.drift < 0:
            raise ValidationError("noise and drift sigmas must be nonnegative")
        if not 0.0 <= self.reverb < 1.0:
            raise ValidationError("reverb decay must lie in [0, 1)")
        if self.gain <= 0:
            raise ValidationError("gain must be positive")


@dataclass(frozen=True)
class Span:
    start: int
    end: int
    labels: tuple[int, ...]


@dataclass
class Recording:
    spectrogram: np.ndarray  # T x F
    reference: list[int]
    spans: list[Span]
    recording_id: int
    domain_id: str
    meta: dict = field(default_factory=dict)
    # (start, end, label) per rendered symbol; used to label training crops
    symbols: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return self.spectrogram.shape[0]

    def normalized(self) -> np.ndarray:
        return normalize(self.spectrogram)

    def crop(self, start: int, stop: int, recording_id: int | None = None) -> "Recording":
        """Frames ``[start, stop)`` as a recording of its own.

        A symbol belongs to the crop when its centre falls inside it.
        """
        if not 0 <= start < stop <= self.n_frames:
            raise ValidationError(f"bad crop [{start}, {stop}) of {self.n_frames} frames")
        kept = [(a, b, lab) for a, b, lab in self.symbols if start <= (a + b) / 2.0 < stop]
        return Recording(
            self.spectrogram[start:stop].copy(),
            [lab for _, _, lab in kept],
            [],
            self.recording_id if recording_id is None else recording_id,
            self.domain_id,
            {**self.meta, "crop": [int(start), int(stop)]},
            [(a - start, b - start, lab) for a, b, lab in kept],
        )


def normalize(spec: np.ndarray) -> np.ndarray:
    """Per-recording zero mean, unit variance."""
    spec = np.asarray(spec, dtype=np.float64)
    std = spec.std()
    return (spec - spec.mean()) / (std if std > 0 else 1.0)


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

def _separable(a: np.ndarray, b: np.ndarray) -> bool:
    return np.mean(np.abs(a - b) > 0.2) >= 0.25


def _draw_pattern(rng: np.random.Generator, F: int, D: int) -> np.ndarray:
    """Two gliding formant bands with Gaussian frequency profiles."""
    bins = np.arange(F)[:, None]
    frames = np.arange(D)[None, :] / max(D - 1, 1)
    pattern = np.zeros((F, D))
    for _ in range(2):
        lo, hi = rng.uniform(1, F - 2, size=2)
        width = rng.uniform(0.8, 1.6)
        centre = lo + (hi - lo) * frames
        pattern = np.maximum(pattern, np.exp(-0.5 * ((bins - centre) / width) ** 2))
    envelope = 0.6 + 0.4 * np.sin(np.pi * (np.arange(D) + 0.5) / D)
    return np.clip(pattern * envelope[None, :], 0.0, 1.0)


def gen_templates(seed: int, V: int = 8, F: int = 32, D: int = 6, max_retries: int = 100) -> list[SymbolTemplate]:
    if V < 2 or F < 8 or D < 2:
        raise ValidationError(f"need V >= 2, F >= 8, D >= 2; got V={V}, F={F}, D={D}")
    rng = np.random.default_rng(seed)
    patterns: list[np.ndarray] = []
    for symbol in range(V):
        for _ in range(max_retries + 1):
            cand = _draw_pattern(rng, F, D)
            if cand.max() > 0.5 and all(_separable(cand, p) for p in patterns):
                patterns.append(cand)
                break
        else:
            raise GenerationError(f"could not draw a separable template for symbol {symbol}")
    return [SymbolTemplate(i, p) for i, p in enumerate(patterns)]


def stretch(pattern: np.ndarray, length: int) -> np.ndarray:
    """Nearest-frame time resampling of a template to ``length`` frames."""
    D = pattern.shape[1]
    idx = np.minimum((np.arange(length) * D) // length, D - 1)
    return pattern[:, idx]


# ---------------------------------------------------------------------------
# Recordings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Layout:
    """Symbol timing shared by all generated recordings."""

    utt_len: tuple[int, int] = (4, 12)
    gap: tuple[int, int] = (2, 6)
    jitter: int = 1
    # <1 shortens every symbol (fast speech)
    duration_scale: float = 1.0


def _nuisance(templates, domain: DomainConfig, recording_id: int):
    rng = np.random.default_rng([domain.seed, recording_id, 0])
    F = templates[0].pattern.shape[0]
    tilt = domain.tilt * rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
    gain = domain.gain * float(np.exp(rng.normal(0.0, 0.1)))
    drifted = []
    for tpl in templates:
        noise = rng.normal(0.0, domain.drift, size=tpl.pattern.shape) if domain.drift > 0 else 0.0
        drifted.append(np.clip(tpl.pattern + noise, 0.0, 1.0))
    ramp = tilt * (np.arange(F) - (F - 1) / 2.0)
    return tilt, gain, drifted, ramp


def synth_recording(
    templates: list[SymbolTemplate],
    domain: DomainConfig,
    n_utterances: int,
    utterance_length_range: tuple[int, int] = (4, 12),
    seed: int = 0,
    recording_id: int = 0,
    layout: Layout | None = None,
) -> Recording:
    if n_utterances < 1:
        raise ValidationError("n_utterances must be >= 1")
    lo, hi = utterance_length_range
    if not 1 <= lo <= hi:
        raise ValidationError(f"bad utterance length range {utterance_length_range}")
    layout = layout or Layout(utt_len=(lo, hi))
    V = len(templates)
    F, D = templates[0].pattern.shape
    tilt, gain, drifted, ramp = _nuisance(templates, domain, recording_id)
    rng = np.random.default_rng([seed, recording_id, 1])

    pieces = []
    spans = []
    symbols = []
    cursor = 0

    def silence(n):
        nonlocal cursor
        pieces.append(np.zeros((F, n)))
        cursor += n

    silence(int(rng.integers(layout.gap[0], layout.gap[1] + 1)))
    for _ in range(n_utterances):
        n_sym = int(rng.integers(lo, hi + 1))
        labels = rng.integers(0, V, size=n_sym)
        start = cursor
        for lab in labels:
            base = int(round(D * layout.duration_scale))
            dur = max(1, base + int(rng.integers(-layout.jitter, layout.jitter + 1)))
            pieces.append(stretch(drifted[lab], dur))
            symbols.append((cursor, cursor + dur, int(lab)))
            cursor += dur
        spans.append(Span(start, cursor, tuple(int(v) for v in labels)))
        silence(int(rng.integers(layout.gap[0], layout.gap[1] + 1)))

    clean = np.concatenate(pieces, axis=1).T  # T x F
    if domain.reverb > 0:
        clean = reverberate(clean, domain.reverb)
    noise_rng = np.random.default_rng([domain.seed, recording_id, 2, seed])
    spec = gain * clean + ramp[None, :]
    if domain.noise > 0:
        spec = spec + noise_rng.normal(0.0, domain.noise, size=spec.shape)
    spec = np.clip(spec, -CLAMP, CLAMP)
    reference = [lab for s in spans for lab in s.labels]
    meta = {"tilt": float(tilt), "gain": float(gain), "seed": int(seed)}
    return Recording(spec, reference, spans, recording_id, domain.domain_id, meta, symbols)


def reverberate(clean: np.ndarray, decay: float) -> np.ndarray:
    """Add a decaying copy of past frames: y[t] = x[t] + decay * y[t-1]."""
    out = clean.copy()
    for t in range(1, out.shape[0]):
        out[t] += decay * out[t - 1]
    return out


def make_split(
    templates: list[SymbolTemplate],
    domain: DomainConfig,
    n_recordings: int,
    seed: int,
    frames: int = 600,
    layout: Layout | None = None,
    first_id: int = 0,
) -> list[Recording]:
    """``n_recordings`` recordings of roughly ``frames`` frames each.

    Ids run from ``first_id``; distinct ids give distinct nuisance draws.
    """
    if n_recordings < 1:
        raise ValidationError("n_recordings must be >= 1")
    layout = layout or Layout()
    D = templates[0].pattern.shape[1]
    mean_utt = 0.5 * sum(layout.utt_len) * max(1.0, D * layout.duration_scale) + 0.5 * sum(layout.gap)
    n_utt = max(1, int(round(frames / mean_utt)))
    return [
        synth_recording(templates, domain, n_utt, layout.utt_len, seed, rid, layout)
        for rid in range(first_id, first_id + n_recordings)
    ]


# ---------------------------------------------------------------------------
# Matched-filter decoding (used to check identifiability)
# ---------------------------------------------------------------------------

def matched_filter_decode(segment: np.ndarray, templates, jitter: int = 1) -> list[int]:
    """Best symbol segmentation of a clean span by exhaustive template fitting.

    Dynamic programming over span prefixes; each step consumes one symbol of
    length ``D - jitter .. D + jitter`` and costs the squared residual against
    the stretched template.
    """
    T = segment.shape[0]
    D = templates[0].pattern.shape[1]
    lengths = [d for d in range(D - jitter, D + jitter + 1) if d >= 1]
    rendered = {(t.symbol, d): stretch(t.pattern, d).T for t in templates for d in lengths}
    best = np.full(T + 1, np.inf)
    back: list[tuple[int, int] | None] = [None] * (T + 1)
    best[0] = 0.0
    for end in range(1, T + 1):
        for d in lengths:
            start = end - d
            if start < 0 or not np.isfinite(best[start]):
                continue
            chunk = segment[start:end]
            for t in templates:
                cost = best[start] + float(np.sum((chunk - rendered[(t.symbol, d)]) ** 2))
                if cost < best[end]:
                    best[end] = cost
                    back[end] = (start, t.symbol)
    if not np.isfinite(best[T]):
        return []
    out = []
    pos = T
    while pos > 0:
        start, sym = back[pos]
        out.append(sym)
        pos = start
    return out[::-1]


# ---------------------------------------------------------------------------
# Disk format
# ---------------------------------------------------------------------------

def write_spectrogram(path, spec: np.ndarray):
    spec = np.ascontiguousarray(spec, dtype="<f8")
    T, F = spec.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, T, F))
        fh.write(spec.tobytes())


def read_spectrogram(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, version, T, F = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise FormatError(f"{path}: bad magic/version {magic!r}/{version}")
    if len(raw) != _HEADER.size + 8 * T * F:
        raise FormatError(f"{path}: expected {T}x{F} float64 payload")
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(T, F).astype(np.float64)


def save_recording(rec: Recording, directory, stem: str | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or f"rec_{rec.recording_id:04d}"
    write_spectrogram(directory / f"{stem}.nsti", rec.spectrogram)
    meta = {
        "recording_id": rec.recording_id,
        "domain_id": rec.domain_id,
        "reference": rec.reference,
        "spans": [[s.start, s.end, list(s.labels)] for s in rec.spans],
        "meta": rec.meta,
        "symbols": [list(s) for s in rec.symbols],
    }
    (directory / f"{stem}.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return directory / f"{stem}.nsti"


def load_recording(path) -> Recording:
    path = Path(path)
    if path.suffix != ".nsti":
        path = path.with_suffix(".nsti")
    spec = read_spectrogram(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    spans = [Span(int(a), int(b), tuple(int(v) for v in labs)) for a, b, labs in meta["spans"]]
    return Recording(spec, [int(v) for v in meta["reference"]], spans,
                     int(meta["recording_id"]), meta["domain_id"], meta.get("meta", {}),
                     [tuple(int(v) for v in s) for s in meta.get("symbols", [])])


def load_split(directory) -> list[Recording]:
    return [load_recording(p) for p in sorted(Path(directory).glob("*.nsti"))]


def domain_to_dict(domain: DomainConfig) -> dict:
    return asdict(domain)
