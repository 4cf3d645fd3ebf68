"""The six experiment drivers and their report type.

Every driver expands into independent tasks (one adaptation of one
recording under one seed), runs them through ``_map`` and assembles rows in
task order, so the report does not depend on the worker count. Task results
are cached under ``DIR/cache`` keyed by their full inputs; rerunning an
experiment reuses them and reproduces the same report bytes.

Wall-clock numbers never enter a report. They go to a timing sidecar.
"""
from __future__ import annotations

import hashlib
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as mdl
from .adapt import AdaptConfig, dev_error, nst_train, nsti_run, transcribe_lattice
from .ctc import greedy_decode
from .errors import UsageError
from .metrics import WerBreakdown, duration_seconds, pooled, rtf, wer, werr
from .transforms import draw_spec
from .workspace import Workspace

EXPERIMENTS = ("settings_table", "epoch_curve", "transform_table", "duration_sweep",
               "nst_vs_nsti", "cross_recording")
DURATION_MULTIPLES = (1, 2, 4, 8, 16)
TRANSFORMS = ("specaugment", "identity", "noise", "cutout")


@dataclass
class ExperimentReport:
    name: str
    rows: list[dict]
    seeds: list[int]
    config: dict
    extra: dict = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def row(self, condition: str, split: str | None = None) -> dict:
        for r in self.rows:
            if r["condition"] == condition and (split is None or r["split"] == split):
                return r
        raise KeyError((condition, split))

    def to_dict(self) -> dict:
        return {
            "experiment": self.name,
            "seeds": self.seeds,
            "repeats": len(self.seeds),
            "config": self.config,
            "rows": self.rows,
            "extra": self.extra,
            "artifacts": self.artifacts,
        }


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------

def _breakdown(d: dict) -> WerBreakdown:
    return WerBreakdown(d["substitutions"], d["insertions"], d["deletions"], d["ref_len"])


def _adapt_task(args) -> dict:
    ckpt, rec, config, snapshot_epochs, others = args
    snaps = {}

    def keep(epoch, c):
        if epoch in snapshot_epochs:
            snaps[epoch] = c.copy()

    report, _ = nsti_run(ckpt, rec, config, on_epoch=keep)
    out = {
        "recording_id": rec.recording_id,
        "n_frames": rec.n_frames,
        "curve": [{"epoch": e.epoch, "wer": e.wer, "blank_ratio": e.blank_ratio,
                   "skipped": e.skipped, "seconds": e.seconds} for e in report.curve()],
    }
    # cross evaluation of the snapshots on the other recordings
    out["transfer"] = [
        {"epoch": ep, "recording_id": o.recording_id, "wer": wer(o.reference, greedy_decode(
            transcribe_lattice(snaps[ep], o.normalized(), config.window, config.stride))).to_dict()}
        for ep in sorted(snaps) for o in others
    ]
    return out


def _nst_task(args) -> dict:
    ckpt, adapt_split, dev_split, test_split, config = args
    history = nst_train(ckpt, adapt_split, config, dev_split)
    errs = [e for _, e in history]
    best = int(np.argmin(errs))
    return {"dev_errors": errs, "best_epoch": best, "ckpt": mdl.to_bytes(history[best][0]).hex(),
            "test_error": dev_error(history[best][0], test_split, config.window, config.stride)}


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class _Runner:
    """Runs tasks with a content-addressed cache inside the workspace."""

    def __init__(self, ws: Workspace, workers: int = 1, cache: bool = True):
        self.ws = ws
        self.workers = workers
        self.cache_dir = ws.root / "cache" if cache else None
        self.base = ws.checkpoint()
        manifest = json.dumps(ws.config, sort_keys=True).encode()
        self.base_digest = hashlib.sha256(mdl.to_bytes(self.base) + manifest).hexdigest()

    def _key(self, kind: str, parts) -> str:
        blob = json.dumps([kind, self.base_digest, parts], sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def run(self, kind: str, fn, jobs: list[tuple[list, tuple]]) -> list[dict]:
        """``jobs`` pairs a JSON-able cache key with the task arguments."""
        keys = [self._key(kind, k) for k, _ in jobs]
        results: list[dict | None] = [None] * len(jobs)
        todo = []
        for i, key in enumerate(keys):
            path = self.cache_dir / f"{key}.json" if self.cache_dir else None
            if path is not None and path.is_file():
                results[i] = json.loads(path.read_text())
            else:
                todo.append(i)
        fresh = _map(fn, [jobs[i][1] for i in todo], self.workers)
        for i, res in zip(todo, fresh):
            results[i] = res
            if self.cache_dir is not None:
                self.cache_dir.mkdir(parents=True, exist_ok=True)
                tmp = self.cache_dir / f"{keys[i]}.tmp"
                tmp.write_text(json.dumps(res, sort_keys=True))
                tmp.replace(self.cache_dir / f"{keys[i]}.json")
        return results

    def adapt(self, configs: dict[str, AdaptConfig], split: str, seeds, recordings=None, ckpt=None,
              snapshot_epochs=(), cross: bool = False, ckpt_tag: str = "base"):
        """Results indexed ``[condition][seed_index][recording_index]``."""
        recs = recordings if recordings is not None else self.ws.split(split)
        ckpt = ckpt or self.base
        jobs, index = [], []
        for cond, cfg in configs.items():
            for si, seed in enumerate(seeds):
                c = replace(cfg, seed=seed)
                for ri, rec in enumerate(recs):
                    others = [o for o in recs if o is not rec] if cross else []
                    key = [split, rec.recording_id, rec.meta.get("crop"), c.to_dict(), list(snapshot_epochs),
                           cross, ckpt_tag]
                    jobs.append((key, (ckpt, rec, c, tuple(snapshot_epochs), others)))
                    index.append((cond, si, ri))
        flat = self.run("adapt", _adapt_task, jobs)
        out = {cond: [[None] * len(recs) for _ in seeds] for cond in configs}
        for (cond, si, ri), res in zip(index, flat):
            out[cond][si][ri] = res
        return out


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def _stats(values) -> dict:
    values = [float(v) for v in values]
    d = {"mean": float(np.mean(values))}
    if len(values) >= 2:
        d["stdev"] = statistics.stdev(values)
    return d


def _entry(res: dict, epoch: int = -1) -> dict:
    point = res["curve"][epoch]
    return {"recording_id": res["recording_id"], **point["wer"], "blank_ratio": point["blank_ratio"]}


def _row(condition: str, split: str, per_seed: list[list[dict]], seeds, epoch: int = -1) -> dict:
    runs, wers, dels, blanks = [], [], [], []
    for seed, results in zip(seeds, per_seed):
        entries = [_entry(r, epoch) for r in results]
        total = pooled(_breakdown(e) for e in entries)
        wers.append(total.wer)
        dels.append(total.rates()["del"])
        blanks.append(float(np.mean([e["blank_ratio"] for e in entries])))
        runs.append({"seed": seed, "pooled": total.to_dict(), "recordings": entries})
    return {"condition": condition, "split": split, "wer": _stats(wers), "deletion_rate": _stats(dels),
            "blank_ratio": _stats(blanks), "runs": runs}


def _timing(condition: str, per_seed: list[list[dict]]) -> dict:
    """Per-epoch and total real-time factor, averaged over tasks."""
    first, total, plain = [], [], []
    for results in per_seed:
        for r in results:
            dur = duration_seconds(r["n_frames"])
            secs = [p["seconds"] for p in r["curve"][1:]]
            if secs:
                first.append(rtf(secs[0], dur))
                total.append(rtf(sum(secs), dur))
            plain.append(rtf(r["curve"][0]["seconds"], dur))
    return {"condition": condition, "rtf_epoch1": float(np.mean(first)) if first else None,
            "rtf_total": float(np.mean(total)) if total else None,
            "rtf_transcribe": float(np.mean(plain)) if plain else None}


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

def _base_config(ws: Workspace) -> AdaptConfig:
    a = ws.config["adapt"]
    return AdaptConfig(epochs=a["epochs"], lr=a["lr"])


def settings_table(runner: _Runner, seeds) -> ExperimentReport:
    base = _base_config(runner.ws)
    configs = {
        "unadapted": replace(base, epochs=0),
        "shuffled": base,
        "ordered": replace(base, setting="ordered"),
        "online": replace(base, setting="online", epochs=1),
        "awmc_aug": replace(base, setting="awmc", epochs=1),
        "awmc_noaug": replace(base, setting="awmc", epochs=1, transform=draw_spec("identity")),
    }
    rows, timing = [], []
    for split in ("target_dev", "target_test"):
        res = runner.adapt(configs, split, seeds)
        rows += [_row(c, split, res[c], seeds) for c in configs]
        timing += [{**_timing(c, res[c]), "split": split} for c in configs]
    return ExperimentReport("settings_table", rows, list(seeds),
                            {k: v.to_dict() for k, v in configs.items()}, timing={"rows": timing})


def epoch_curve(runner: _Runner, seeds) -> ExperimentReport:
    cfg = _base_config(runner.ws)
    res = runner.adapt({"shuffled": cfg}, "target_test", seeds)["shuffled"]
    rows, epochs = [], []
    for e in range(cfg.epochs + 1):
        row = _row(f"epoch_{e}", "target_test", res, seeds, epoch=e)
        rows.append(row)
        rates = [r["pooled"] for r in row["runs"]]
        n = [max(1, p["ref_len"]) for p in rates]
        epochs.append({
            "epoch": e,
            "wer": row["wer"],
            "substitution_rate": _stats(p["substitutions"] / k for p, k in zip(rates, n)),
            "insertion_rate": _stats(p["insertions"] / k for p, k in zip(rates, n)),
            "deletion_rate": row["deletion_rate"],
            "blank_ratio": row["blank_ratio"],
        })
    return ExperimentReport("epoch_curve", rows, list(seeds), {"shuffled": cfg.to_dict()},
                            extra={"epochs": epochs}, timing={"rows": [_timing("shuffled", res)]})


def transform_table(runner: _Runner, seeds) -> ExperimentReport:
    base = _base_config(runner.ws)
    configs = {"unadapted": replace(base, epochs=0)}
    configs.update({name: replace(base, transform=draw_spec(name)) for name in TRANSFORMS})
    rows, timing = [], []
    for split in ("target_test", "noisy_test"):
        res = runner.adapt(configs, split, seeds)
        rows += [_row(c, split, res[c], seeds) for c in configs]
        timing += [{**_timing(c, res[c]), "split": split} for c in configs]
    return ExperimentReport("transform_table", rows, list(seeds),
                            {k: v.to_dict() for k, v in configs.items()}, timing={"rows": timing})


def partition(recordings, length: int):
    """Consecutive non-overlapping crops of ``length`` frames; the tail is dropped."""
    pieces = []
    for rec in recordings:
        for i, start in enumerate(range(0, rec.n_frames - length + 1, length)):
            pieces.append(rec.crop(start, start + length, recording_id=rec.recording_id * 1000 + i))
    return pieces


def duration_sweep(runner: _Runner, seeds) -> ExperimentReport:
    cfg = _base_config(runner.ws)
    recs = runner.ws.split("target_test")
    window = cfg.window
    sizes = [(f"{m}x", m * window) for m in DURATION_MULTIPLES if m * window < min(r.n_frames for r in recs)]
    rows, series, timing = [], {"baseline_wer": [], "adapted_wer": [], "werr": []}, []
    for label, length in [*sizes, ("full", None)]:
        pieces = recs if length is None else partition(recs, length)
        res = runner.adapt({label: cfg}, "target_test", seeds, recordings=pieces)[label]
        row = _row(label, "target_test", res, seeds)
        base_wer = pooled(_breakdown(r["curve"][0]["wer"]) for r in res[0]).wer
        gains = [werr(base_wer, run["pooled"]["wer"]) for run in row["runs"]]
        row["frames"] = length if length is not None else int(np.mean([r.n_frames for r in recs]))
        row["n_pieces"] = len(pieces)
        row["baseline_wer"] = base_wer
        row["werr"] = _stats(gains)
        rows.append(row)
        series["baseline_wer"].append(base_wer)
        series["adapted_wer"].append(row["wer"]["mean"])
        series["werr"].append(row["werr"]["mean"])
        timing.append(_timing(label, res))
    extra = {"x": [r["condition"] for r in rows], "x_frames": [r["frames"] for r in rows], "series": series}
    return ExperimentReport("duration_sweep", rows, list(seeds), {"nsti": cfg.to_dict()}, extra=extra,
                            timing={"rows": timing})


def nst_vs_nsti(runner: _Runner, seeds) -> ExperimentReport:
    ws = runner.ws
    cfg = _base_config(ws)
    adapt_split, dev_split, test_split = ws.split("target_adapt"), ws.split("target_dev"), ws.split("target_test")
    nst = runner.run("nst", _nst_task, [
        (["target_adapt", "target_dev", "target_test", replace(cfg, seed=s).to_dict()],
         (runner.base, adapt_split, dev_split, test_split, replace(cfg, seed=s)))
        for s in seeds
    ])
    res = runner.adapt({"unadapted": replace(cfg, epochs=0), "nsti": cfg}, "target_test", seeds)
    rows = [_row(c, "target_test", res[c], seeds) for c in ("unadapted", "nsti")]
    nst_test = [n["test_error"] for n in nst]
    rows.insert(1, {"condition": "nst", "split": "target_test", "wer": _stats(nst_test),
                    "runs": [{"seed": s, "pooled": {"wer": e}, "best_epoch": n["best_epoch"],
                              "dev_errors": n["dev_errors"]} for s, e, n in zip(seeds, nst_test, nst)]})
    # NSTI starting from each seed's best NST checkpoint
    after = []
    for s, n in zip(seeds, nst):
        ck = mdl.from_bytes(bytes.fromhex(n["ckpt"]))
        r = runner.adapt({"nst_nsti": cfg}, "target_test", [s], ckpt=ck,
                         ckpt_tag=hashlib.sha256(n["ckpt"].encode()).hexdigest())
        after.append(r["nst_nsti"][0])
    rows.append(_row("nst_nsti", "target_test", after, seeds))
    extra = {"nst_dev_errors": [n["dev_errors"] for n in nst],
             "adapt_frames": int(sum(r.n_frames for r in adapt_split)),
             "test_frames_per_recording": float(np.mean([r.n_frames for r in test_split]))}
    return ExperimentReport("nst_vs_nsti", rows, list(seeds), {"nst": cfg.to_dict()}, extra=extra,
                            timing={"rows": [_timing("nsti", res["nsti"])]})


def cross_recording(runner: _Runner, seeds) -> ExperimentReport:
    cfg = _base_config(runner.ws)
    recs = runner.ws.split("target_test")
    last = cfg.epochs
    epochs = sorted({1, last})
    res = runner.adapt({"nsti": cfg}, "target_test", seeds, snapshot_epochs=epochs, cross=True)["nsti"]
    rows = [_row("unadapted", "target_test", res, seeds, epoch=0)]
    unadapted = {r["recording_id"]: r["curve"][0]["wer"]["wer"] for r in res[0]}
    for ep in epochs:
        rows.append(_row(f"self_e{ep}", "target_test", res, seeds, epoch=ep))
        runs, wers = [], []
        for seed, results in zip(seeds, res):
            entries = [{"source_id": r["recording_id"], **t["wer"], "recording_id": t["recording_id"]}
                       for r in results for t in r["transfer"] if t["epoch"] == ep]
            total = pooled(_breakdown(e) for e in entries)
            wers.append(total.wer)
            runs.append({"seed": seed, "pooled": total.to_dict(), "recordings": entries})
        rows.append({"condition": f"cross_e{ep}", "split": "target_test", "wer": _stats(wers), "runs": runs})
    pairs = []
    for a in range(len(recs)):
        for b in range(len(recs)):
            if a == b:
                continue
            rb = recs[b].recording_id
            cross = {ep: float(np.mean([next(t["wer"]["wer"] for t in res[si][a]["transfer"]
                                              if t["epoch"] == ep and t["recording_id"] == rb)
                                         for si in range(len(seeds))])) for ep in epochs}
            own = {ep: float(np.mean([res[si][b]["curve"][ep]["wer"]["wer"] for si in range(len(seeds))]))
                   for ep in epochs}
            base = unadapted[rb]
            pairs.append({
                "source_id": recs[a].recording_id, "target_id": rb, "unadapted_wer": base,
                **{f"cross_wer_e{ep}": cross[ep] for ep in epochs},
                **{f"self_wer_e{ep}": own[ep] for ep in epochs},
                **{f"cross_change_e{ep}": (base - cross[ep]) / base if base > 0 else None for ep in epochs},
                "negative_transfer": cross[last] > own[last],
            })
    extra = {"pairs": pairs, "negative_fraction": float(np.mean([p["negative_transfer"] for p in pairs]))
             if pairs else None}
    return ExperimentReport("cross_recording", rows, list(seeds), {"nsti": cfg.to_dict()}, extra=extra,
                            timing={"rows": [_timing("nsti", res)]})


DRIVERS = {
    "settings_table": settings_table,
    "epoch_curve": epoch_curve,
    "transform_table": transform_table,
    "duration_sweep": duration_sweep,
    "nst_vs_nsti": nst_vs_nsti,
    "cross_recording": cross_recording,
}


def run_experiment(name: str, workspace, repeats: int | None = None, workers: int | None = None,
                   cache: bool = True) -> ExperimentReport:
    if name not in DRIVERS:
        raise UsageError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    ws = workspace if isinstance(workspace, Workspace) else Workspace.open(workspace)
    seeds = ws.seeds
    if repeats is not None:
        if repeats < 1:
            raise UsageError("repeats must be >= 1")
        seeds = [seeds[i] if i < len(seeds) else seeds[-1] + i - len(seeds) + 1 for i in range(repeats)]
    workers = workers if workers is not None else int(ws.config.get("workers", 1))
    runner = _Runner(ws, max(1, workers), cache)
    report = DRIVERS[name](runner, seeds)
    report.timing["workers"] = runner.workers
    return report
