"""On-disk experiment workspace: generated splits, manifest and base checkpoint.

Layout::

    DIR/manifest.json        reference config actually used
    DIR/<split>/rec_*.nsti   spectrograms, with .json sidecars
    DIR/base.ckpt            written by ``train-base``
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import corpus
from . import model as mdl
from .errors import NSTIError, ValidationError
from .training import TrainConfig
from .transforms import TransformSpec

MANIFEST = "manifest.json"
CHECKPOINT = "base.ckpt"


class WorkspaceError(NSTIError, FileNotFoundError):
    """A workspace artifact is missing."""


def reference_config() -> dict:
    return json.loads(resources.files("nsti").joinpath("reference.json").read_text())


def configure(base: dict | None = None, seed: int | None = None, recordings: int | None = None,
              frames: int | None = None, target_tilt: float | None = None,
              target_noise: float | None = None) -> dict:
    """Reference config with the ``gen-corpus`` overrides applied.

    ``recordings`` and ``frames`` resize the target test and dev splits.
    """
    cfg = copy.deepcopy(base or reference_config())
    if seed is not None:
        cfg["corpus_seed"] = int(seed)
    for name in ("target_test", "target_dev"):
        if recordings is not None:
            if recordings < 1:
                raise ValidationError("--recordings must be >= 1")
            cfg["splits"][name]["n"] = int(recordings)
        if frames is not None:
            if frames < 1:
                raise ValidationError("--frames must be >= 1")
            cfg["splits"][name]["frames"] = int(frames)
    if target_tilt is not None:
        cfg["domains"]["target"]["tilt"] = float(target_tilt)
    if target_noise is not None:
        cfg["domains"]["target"]["noise"] = float(target_noise)
    return cfg


def templates(cfg: dict) -> list[corpus.SymbolTemplate]:
    t = cfg["templates"]
    return corpus.gen_templates(cfg["corpus_seed"], V=t["V"], F=t["F"], D=t["D"])


def build_split(cfg: dict, name: str, tpl=None) -> list[corpus.Recording]:
    spec = cfg["splits"][name]
    domain = corpus.DomainConfig(**cfg["domains"][spec["domain"]], domain_id=spec["domain"])
    layout = corpus.Layout(duration_scale=spec.get("duration_scale", 1.0))
    return corpus.make_split(tpl or templates(cfg), domain, spec["n"], spec["seed"], spec["frames"],
                             layout, spec.get("first_id", 0))


def generate(out, cfg: dict) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tpl = templates(cfg)
    for name in cfg["splits"]:
        for rec in build_split(cfg, name, tpl):
            corpus.save_recording(rec, out / name)
    (out / MANIFEST).write_text(json.dumps(cfg, sort_keys=True, indent=1))
    return out


def model_config(cfg: dict) -> mdl.ModelConfig:
    return mdl.ModelConfig(**cfg["model"])


def train_config(cfg: dict, epochs: int | None = None, seed: int | None = None) -> TrainConfig:
    t = dict(cfg["train"])
    aug = t.pop("augment", None)
    if epochs is not None:
        t["epochs"] = epochs
    if seed is not None:
        t["seed"] = seed
    return TrainConfig(**t, augment=TransformSpec(**aug) if aug else None)


@dataclass
class Workspace:
    root: Path
    config: dict
    _splits: dict = field(default_factory=dict, repr=False)

    @classmethod
    def open(cls, root, need_checkpoint: bool = True) -> "Workspace":
        root = Path(root)
        if not (root / MANIFEST).is_file():
            raise WorkspaceError(f"{root}: no {MANIFEST}; run gen-corpus --out {root} first")
        if need_checkpoint and not (root / CHECKPOINT).is_file():
            raise WorkspaceError(f"{root}: no {CHECKPOINT}; run train-base --corpus {root} --out {root / CHECKPOINT}")
        return cls(root, json.loads((root / MANIFEST).read_text()))

    def split(self, name: str) -> list[corpus.Recording]:
        if name not in self._splits:
            d = self.root / name
            recs = corpus.load_split(d) if d.is_dir() else []
            if not recs:
                raise WorkspaceError(f"{self.root}: split {name!r} is missing or empty")
            self._splits[name] = recs
        return self._splits[name]

    def checkpoint(self) -> mdl.Checkpoint:
        return mdl.load(self.root / CHECKPOINT)

    @property
    def seeds(self) -> list[int]:
        return list(self.config["adapt"]["seeds"])
