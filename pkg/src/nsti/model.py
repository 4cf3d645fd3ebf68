"""Tiny CTC acoustic model.

Architecture (input T x F, output ceil(T/4) x (V+1)):

    subsample  2 x [depthwise conv k=3 stride 2 -> pointwise linear -> SiLU]
               (F -> H, then H -> H)
    blocks     B x [x + FF(x);  x + SiLU(BRN(depthwise conv k=K (x)))]
               FF = linear H->2H, SiLU, linear 2H->H
    head       linear H -> V+1, log-softmax

Depthwise kernels carry no bias (BRN supplies the shift in the blocks).
Weights are uniform(-s, s) with s = sqrt(1 / fan_in); fan_in is the kernel
length for depthwise kernels and the input width for linear layers. Biases
and BRN beta start at 0, BRN gamma at 1, running stats at mean 0 / var 1.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import DimensionError, FormatError, NumericError, ValidationError

SUBSAMPLE = 4
SUB_KERNEL = 3
R_MAX = 3.0
D_MAX = 5.0
MOMENTUM = 0.99
BN_EPS = 1e-5
MODES = ("train_frozen_stats", "train_update_stats", "eval")

CKPT_MAGIC = b"NSTICKPT"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<8sBI")


@dataclass(frozen=True)
class ModelConfig:
    n_bins: int = 32
    hidden: int = 64
    n_blocks: int = 2
    vocab: int = 8
    kernel: int = 5
    seed: int = 0
    subsample: int = SUBSAMPLE

    def validate(self):
        if self.subsample != SUBSAMPLE:
            raise ValidationError(f"subsample factor is fixed at {SUBSAMPLE}")
        if self.vocab < 2 or self.hidden < 8 or self.n_blocks < 1:
            raise ValidationError(f"need vocab >= 2, hidden >= 8, n_blocks >= 1: {self}")
        if self.kernel < 1 or self.n_bins < 1:
            raise ValidationError(f"kernel and n_bins must be positive: {self}")
        return self

    @property
    def blank(self) -> int:
        return self.vocab


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    F, H, V, K = cfg.n_bins, cfg.hidden, cfg.vocab, cfg.kernel
    shapes = {
        "sub1.dw": (SUB_KERNEL, F),
        "sub1.pw.w": (F, H),
        "sub1.pw.b": (H,),
        "sub2.dw": (SUB_KERNEL, H),
        "sub2.pw.w": (H, H),
        "sub2.pw.b": (H,),
    }
    for i in range(cfg.n_blocks):
        p = f"block{i}"
        shapes.update({
            f"{p}.ff1.w": (H, 2 * H),
            f"{p}.ff1.b": (2 * H,),
            f"{p}.ff2.w": (2 * H, H),
            f"{p}.ff2.b": (H,),
            f"{p}.conv.dw": (K, H),
            f"{p}.brn.gamma": (H,),
            f"{p}.brn.beta": (H,),
        })
    shapes["out.w"] = (H, V + 1)
    shapes["out.b"] = (V + 1,)
    return shapes


def n_params(cfg: ModelConfig) -> int:
    """Parameter count in closed form.

    Subsampling 3F + FH + H + 3H + H^2 + H; each block 4H^2 + 5H + KH
    (two feed-forward linears, depthwise kernel, gamma and beta); head
    H(V+1) + V + 1.
    """
    F, H, V, K, B = cfg.n_bins, cfg.hidden, cfg.vocab, cfg.kernel, cfg.n_blocks
    sub = SUB_KERNEL * F + F * H + H + SUB_KERNEL * H + H * H + H
    block = (2 * H * H + 2 * H) + (2 * H * H + H) + K * H + 2 * H
    head = H * (V + 1) + (V + 1)
    return sub + B * block + head


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    stats: dict[str, np.ndarray]
    counter: int = 0

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.stats.items()},
            self.counter,
        )

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


@dataclass
class LogProbLattice:
    logp: np.ndarray  # T' x (V+1)
    subsample: int = SUBSAMPLE

    @property
    def blank(self) -> int:
        return self.logp.shape[1] - 1

    @property
    def n_frames(self) -> int:
        return self.logp.shape[0]


def init(cfg: ModelConfig) -> Checkpoint:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b") or name.endswith(".beta"):
            params[name] = np.zeros(shape)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape)
        else:
            fan_in = shape[0]
            s = math.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-s, s, size=shape)
    stats = {}
    for i in range(cfg.n_blocks):
        stats[f"block{i}.brn.mean"] = np.zeros(cfg.hidden)
        stats[f"block{i}.brn.var"] = np.ones(cfg.hidden)
    return Checkpoint(cfg, params, stats, 0)


# ---------------------------------------------------------------------------
# Batch renormalisation
# ---------------------------------------------------------------------------

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray


def batch_renorm(x: dc.Tensor, gamma: dc.Tensor, beta: dc.Tensor, running: RunningStats,
                 mode: str, r_max: float = R_MAX, d_max: float = D_MAX,
                 momentum: float = MOMENTUM, eps: float = BN_EPS) -> dc.Tensor:
    """Batch renormalisation over the rows (time frames) of a (T, C) tensor.

    In ``train_update_stats`` the batch statistics are used, corrected by
    ``r`` and ``d`` (held constant for the gradient), and ``running`` is
    updated in place. Other modes normalise with the running statistics only.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,) or running.mean.shape != (C,):
        raise DimensionError(f"batch_renorm: channel count {C} does not match parameters")
    if np.any(running.var <= 0):
        raise NumericError("batch_renorm: running variance must be positive")
    run_std = np.sqrt(running.var + eps)

    if mode != "train_update_stats":
        xhat = (x.data - running.mean) / run_std
        inv = 1.0 / run_std
        normed = dc.custom(xhat, (x,), lambda g: (g * inv,), "brn_frozen")
        return dc.add_row(dc.mul_row(normed, gamma), beta)

    n = x.shape[0]
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    std = np.sqrt(var + eps)
    r = np.clip(std / run_std, 1.0 / r_max, r_max)
    d = np.clip((mu - running.mean) / run_std, -d_max, d_max)
    xhat = (x.data - mu) / std
    out = xhat * r + d

    def bw(g):
        gh = g * r
        dx = (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0)) / std
        return (dx,)

    running.mean[:] = momentum * running.mean + (1.0 - momentum) * mu
    unbiased = var * n / max(n - 1, 1)
    running.var[:] = momentum * running.var + (1.0 - momentum) * unbiased
    normed = dc.custom(out, (x,), bw, "brn_train")
    return dc.add_row(dc.mul_row(normed, gamma), beta)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def out_frames(T: int) -> int:
    return -(-T // SUBSAMPLE)


def leaves(ckpt: Checkpoint, requires_grad: bool) -> dict[str, dc.Tensor]:
    return {k: dc.Tensor(v, requires_grad=requires_grad) for k, v in ckpt.params.items()}


def forward_graph(ckpt: Checkpoint, x: np.ndarray, mode: str = "eval",
                  params: dict[str, dc.Tensor] | None = None) -> dc.Tensor:
    """Log-probability tensor; records a graph when ``params`` require grad."""
    cfg = ckpt.config
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.n_bins:
        raise DimensionError(f"expected input (T, {cfg.n_bins}), got {x.shape}")
    if x.shape[0] < 1:
        raise DimensionError("input has no frames")
    p = params if params is not None else leaves(ckpt, requires_grad=False)
    h = dc.Tensor(x)
    for stage in ("sub1", "sub2"):
        h = dc.conv1d_depthwise(h, p[f"{stage}.dw"], stride=2)
        h = dc.silu(dc.linear(h, p[f"{stage}.pw.w"], p[f"{stage}.pw.b"]))
    for i in range(cfg.n_blocks):
        b = f"block{i}"
        ff = dc.silu(dc.linear(h, p[f"{b}.ff1.w"], p[f"{b}.ff1.b"]))
        h = dc.add(h, dc.linear(ff, p[f"{b}.ff2.w"], p[f"{b}.ff2.b"]))
        conv = dc.conv1d_depthwise(h, p[f"{b}.conv.dw"], stride=1)
        running = RunningStats(ckpt.stats[f"{b}.brn.mean"], ckpt.stats[f"{b}.brn.var"])
        conv = batch_renorm(conv, p[f"{b}.brn.gamma"], p[f"{b}.brn.beta"], running, mode)
        h = dc.add(h, dc.silu(conv))
    if mode == "train_update_stats":
        ckpt.counter += 1
    return dc.log_softmax(dc.linear(h, p["out.w"], p["out.b"]))


def forward(ckpt: Checkpoint, x: np.ndarray, mode: str = "eval") -> LogProbLattice:
    with dc.no_grad():
        out = forward_graph(ckpt, x, mode)
    return LogProbLattice(out.data)


# ---------------------------------------------------------------------------
# Checkpoint files
# ---------------------------------------------------------------------------

def _header(ckpt: Checkpoint) -> dict:
    tensors = [{"kind": "param", "name": k, "shape": list(v.shape)} for k, v in ckpt.params.items()]
    tensors += [{"kind": "stat", "name": k, "shape": list(v.shape)} for k, v in ckpt.stats.items()]
    return {"config": asdict(ckpt.config), "counter": ckpt.counter, "tensors": tensors}


def to_bytes(ckpt: Checkpoint) -> bytes:
    head = json.dumps(_header(ckpt), sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes()
                       for v in list(ckpt.params.values()) + list(ckpt.stats.values()))
    return _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(head)) + head + payload


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < _CKPT_HEAD.size:
        raise FormatError("checkpoint truncated before header")
    magic, version, head_len = _CKPT_HEAD.unpack_from(raw)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise FormatError(f"bad checkpoint magic/version {magic!r}/{version}")
    start = _CKPT_HEAD.size
    try:
        head = json.loads(raw[start:start + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header unreadable: {exc}") from exc
    offset = start + head_len
    need = sum(8 * math.prod(t["shape"]) for t in head["tensors"])
    if len(raw) - offset != need:
        raise FormatError(f"checkpoint payload is {len(raw) - offset} bytes, expected {need}")
    params, stats = {}, {}
    for t in head["tensors"]:
        size = math.prod(t["shape"])
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(t["shape"])
        offset += 8 * size
        (params if t["kind"] == "param" else stats)[t["name"]] = arr.astype(np.float64)
    cfg = ModelConfig(**head["config"]).validate()
    return Checkpoint(cfg, params, stats, int(head["counter"]))


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(ckpt))
    return path


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    return to_bytes(a) == to_bytes(b)
