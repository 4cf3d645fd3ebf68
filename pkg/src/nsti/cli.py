"""Command-line entry point.

Every subcommand accepts ``--config FILE``: a JSON object whose keys are the
flag names (``target-tilt`` or ``target_tilt``). Explicit flags win.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import corpus
from . import model as mdl
from .adapt import SETTINGS, AdaptConfig, nsti_run, transcribe_lattice
from .ctc import blank_ratio, greedy_decode
from .errors import FormatError, NSTIError, NumericError, ValidationError
from .experiments import EXPERIMENTS, run_experiment
from .report import FORMATS, emit
from .training import train_base
from .transforms import draw_spec
from .windowing import DEFAULT_STRIDE, DEFAULT_WINDOW
from .workspace import Workspace, WorkspaceError, configure, generate, model_config, train_config

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("nsti")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nsti", description="Per-recording test-time adaptation of a CTC model.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p.subcommands = {}

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        p.subcommands[name] = sp
        sp.add_argument("--config", type=Path, help="JSON file of flag defaults")
        return sp

    g = add("gen-corpus", "generate the synthetic reference workspace")
    g.add_argument("--out", type=Path)
    g.add_argument("--seed", type=int)
    g.add_argument("--recordings", type=int, help="target test/dev recordings")
    g.add_argument("--frames", type=int, help="frames per target recording")
    g.add_argument("--target-tilt", type=float)
    g.add_argument("--target-noise", type=float)

    t = add("train-base", "train the source-domain base model")
    t.add_argument("--corpus", type=Path)
    t.add_argument("--out", type=Path)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)

    r = add("transcribe", "transcribe one recording with a checkpoint")
    r.add_argument("--ckpt", type=Path)
    r.add_argument("--recording", type=Path)
    r.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    r.add_argument("--stride", type=float, default=DEFAULT_STRIDE)

    a = add("adapt", "adapt to one recording and print the report")
    a.add_argument("--ckpt", type=Path)
    a.add_argument("--recording", type=Path)
    a.add_argument("--setting", choices=SETTINGS, default="shuffled")
    a.add_argument("--transform", choices=("specaugment", "identity", "noise", "cutout"), default="specaugment")
    a.add_argument("--epochs", type=int)
    a.add_argument("--lr", type=float, default=9e-5)
    a.add_argument("--seed", type=int, default=0)

    e = add("experiment", "run one experiment on a workspace")
    e.add_argument("name", nargs="?", choices=EXPERIMENTS)
    e.add_argument("--workspace", type=Path)
    e.add_argument("--repeats", type=int)
    e.add_argument("--emit", default="json,csv")
    e.add_argument("--workers", type=int)
    e.add_argument("--out", type=Path, help="report directory (default DIR/reports)")
    e.add_argument("--no-cache", action="store_true")
    return p


REQUIRED = {
    "gen-corpus": ("out", "seed"),
    "train-base": ("corpus", "out", "seed"),
    "transcribe": ("ckpt", "recording"),
    "adapt": ("ckpt", "recording"),
    "experiment": ("name", "workspace"),
}


def _apply_config(parser, args, argv) -> argparse.Namespace:
    """Fill options not given on the command line from ``--config``."""
    if args.config is None:
        return args
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError("config file must hold a JSON object")
    given = {tok.split("=", 1)[0].lstrip("-").replace("-", "_") for tok in argv if tok.startswith("--")}
    known = vars(args)
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("command", "config"):
            raise ValidationError(f"config key {key!r} is not a flag of {args.command}")
        if dest in given or (dest == "name" and known["name"] is not None):
            continue
        action = next(a for a in parser.subcommands[args.command]._actions if a.dest == dest)
        if action.type is not None and value is not None and not isinstance(value, bool):
            value = action.type(value)
        if action.choices is not None and value not in action.choices:
            raise ValidationError(f"config value {value!r} for {key!r} is not one of {sorted(action.choices)}")
        setattr(args, dest, value)
    return args


def _check_required(args):
    missing = [k for k in REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        flags = ", ".join(m if m == "name" else "--" + m.replace("_", "-") for m in missing)
        raise ValidationError(f"{args.command}: missing {flags}")


def _load_ckpt(path) -> mdl.Checkpoint:
    if not Path(path).is_file():
        raise ValidationError(f"checkpoint {path} does not exist")
    return mdl.load(path)


def _load_recording(path) -> corpus.Recording:
    path = Path(path)
    if not path.with_suffix(".nsti").is_file():
        raise ValidationError(f"recording {path} does not exist")
    return corpus.load_recording(path)


def cmd_gen_corpus(args) -> int:
    cfg = configure(seed=args.seed, recordings=args.recordings, frames=args.frames,
                    target_tilt=args.target_tilt, target_noise=args.target_noise)
    out = generate(args.out, cfg)
    print(json.dumps({"workspace": str(out), "splits": sorted(cfg["splits"])}, sort_keys=True))
    return EXIT_OK


def cmd_train_base(args) -> int:
    ws = Workspace.open(args.corpus, need_checkpoint=False)
    ckpt, history = train_base(ws.split("source_train"), ws.split("source_dev"), model_config(ws.config),
                               train_config(ws.config, args.epochs, args.seed))
    mdl.save(ckpt, args.out)
    best = min(h[2] for h in history)
    print(json.dumps({"checkpoint": str(args.out), "source_dev_error": best,
                      "history": [{"epoch": e, "loss": loss, "dev_error": d} for e, loss, d in history]},
                     sort_keys=True))
    return EXIT_OK


def cmd_transcribe(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    rec = _load_recording(args.recording)
    lattice = transcribe_lattice(ckpt, rec.normalized(), args.window, args.stride)
    print(json.dumps({"recording_id": rec.recording_id, "transcript": greedy_decode(lattice),
                      "blank_ratio": blank_ratio(lattice), "n_frames": rec.n_frames}, sort_keys=True))
    return EXIT_OK


def cmd_adapt(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    rec = _load_recording(args.recording)
    epochs = args.epochs if args.epochs is not None else (1 if args.setting in ("online", "awmc") else 5)
    config = AdaptConfig(setting=args.setting, transform=draw_spec(args.transform), epochs=epochs,
                         lr=args.lr, seed=args.seed)
    report, _ = nsti_run(ckpt, rec, config)
    print(report.to_json())
    return EXIT_OK


def cmd_experiment(args) -> int:
    formats = [f.strip() for f in args.emit.split(",") if f.strip()]
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise ValidationError(f"--emit: unknown format(s) {bad}")
    ws = Workspace.open(args.workspace)
    report = run_experiment(args.name, ws, args.repeats, args.workers, cache=not args.no_cache)
    paths = emit(report, args.out or ws.root / "reports", formats)
    print(json.dumps({"experiment": args.name, "written": [str(p) for p in paths]}, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-base": cmd_train_base,
    "transcribe": cmd_transcribe,
    "adapt": cmd_adapt,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _apply_config(parser, args, argv)
        _check_required(args)
        return COMMANDS[args.command](args)
    except (ValidationError, WorkspaceError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, NSTIError, ArithmeticError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
