"""Command-line entry point: synth, train, eval, infer, bench, describe.

Every failure prints one line ``error category=<cat> exit=<code> message=<text>`` to stderr
and exits with the category's code (2 usage, 3 data, 4 format, 5 internal).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__, data, model, runtime, synth, train
from .errors import BioliteError, DataError
from .metrics import ConfusionMatrix, EvalReport

OUT_ENV = "BIOLITE_OUT"
log = logging.getLogger("biolite")


class UsageError(BioliteError):
    category = "usage"
    exit_code = 2


# ---------------------------------------------------------------- config file


@dataclasses.dataclass
class RunConfig:
    """Everything a train run depends on. Keys of the config file are these field names."""

    train: train.TrainConfig = dataclasses.field(default_factory=train.TrainConfig)
    arch: model.ArchConfig = dataclasses.field(default_factory=model.ArchConfig)
    preprocess: data.PreprocessConfig = dataclasses.field(default_factory=data.PreprocessConfig)

    def to_dict(self):
        return {"train": dataclasses.asdict(self.train), "arch": self.arch.to_dict(),
                "preprocess": dataclasses.asdict(self.preprocess)}


_SECTIONS = {"train": train.TrainConfig, "arch": model.ArchConfig, "preprocess": data.PreprocessConfig}


def _convert(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        return tuple(type(default[0])(v) for v in raw.replace("x", ",").split(","))
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if default is None:
        return None if raw.lower() == "none" else int(raw)
    return raw


def _find_field(key: str):
    section, _, name = key.rpartition(".")
    candidates = [section] if section else list(_SECTIONS)
    for sec in candidates:
        cls = _SECTIONS.get(sec)
        if cls is not None and name in {f.name for f in dataclasses.fields(cls)}:
            return sec, name
    raise UsageError(f"unknown config key {key!r}")


def parse_overrides(lines, source="config") -> dict:
    """``key = value`` lines (``#`` comments allowed) -> {(section, field): raw string}."""
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {line!r}")
        out[_find_field(key.strip())] = value.strip()
    return out


def resolve_config(overrides: dict) -> RunConfig:
    kwargs = {sec: {} for sec in _SECTIONS}
    defaults = {sec: cls() for sec, cls in _SECTIONS.items()}
    for (sec, name), raw in overrides.items():
        try:
            kwargs[sec][name] = _convert(raw, getattr(defaults[sec], name))
        except ValueError as exc:
            raise UsageError(f"bad value for {sec}.{name}: {exc}") from None
    try:
        return RunConfig(**{sec: cls(**kwargs[sec]) for sec, cls in _SECTIONS.items()})
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- run manifest


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int
    version: str
    started: str
    outputs: dict
    finished: str | None = None

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    out = _out_dir(args)
    if args.n < 1:
        raise UsageError("--n must be positive")
    frames = [s.frame for s in synth.generate_dataset(args.n, args.difficulty, args.seed, (args.size, args.size))]
    sp = data.split(frames, args.seed) if len(frames) >= 10 else None
    meta = {"generator": "biolite.synth", "version": __version__, "difficulty": args.difficulty,
            "seed": args.seed, "n": args.n, "size": f"{args.size}x{args.size}"}
    manifest = data.write_frames(frames, out, sp, meta)
    print(f"wrote {len(frames)} frames to {manifest}")
    return 0


def _load_run_config(args) -> RunConfig:
    overrides = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        overrides.update(parse_overrides(text.splitlines(), args.config))
    overrides.update(parse_overrides(args.set or [], "--set"))
    flag_map = {"epochs": "max_epochs", "lr": "lr", "batch_size": "batch_size", "max_steps": "max_steps"}
    for flag, name in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[("train", name)] = str(value)
    if args.seed is not None:
        overrides[("train", "seed")] = str(args.seed)
    return resolve_config(overrides)


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    outputs = {"weights": str(out / "best.blw"), "log": str(out / "train_log.csv"), "manifest": str(out / "run.json")}
    manifest = RunManifest("train", sys.argv[1:], cfg.to_dict(), cfg.train.seed, __version__, _now(), outputs)
    manifest.write(outputs["manifest"])

    frames, sp, _ = data.load_manifest(args.data)
    if not sp.train or not sp.val:
        sp = data.split(frames, cfg.train.seed)
    by_id = {f.id: f for f in frames}
    with runtime.thread_limit(args.threads):
        tr = [data.preprocess(by_id[i], cfg.preprocess) for i in sp.train]
        va = [data.preprocess(by_id[i], cfg.preprocess) for i in sp.val]
        params = model.build(cfg.arch, seed=cfg.train.seed)
        best, tlog = train.train(tr, va, params, cfg.train)
    runtime.save(best, outputs["weights"], cfg.preprocess)
    tlog.to_csv(outputs["log"])
    manifest.finished = _now()
    manifest.write(outputs["manifest"])
    print(f"best epoch {tlog.best_epoch} val_dice {tlog.best_val_dice:.4f}; weights {outputs['weights']}")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    frames, sp, _ = data.load_manifest(args.data)
    ids = sp.of(args.split) if args.split != "all" else [f.id for f in frames]
    if not ids:
        raise DataError(f"split {args.split!r} is empty in {args.data}")
    by_id = {f.id: f for f in frames}
    chosen = [by_id[i] for i in ids]
    if args.self_test:
        preds = [f.mask for f in chosen]
        report = EvalReport.from_confusion(_confusion(preds, chosen), model="self-test")
    else:
        if not args.weights:
            raise UsageError("--weights is required unless --self-test is given")
        params, _, pre = runtime.load(args.weights)
        with runtime.thread_limit(args.threads):
            preds = [runtime.infer(f.image, params, pre) for f in chosen]
        report = EvalReport.from_confusion(_confusion(preds, chosen))
    (out / "eval.csv").write_text(report.to_csv())
    sys.stdout.write(report.to_kv())
    return 0


def _confusion(preds, frames):
    cm = ConfusionMatrix()
    for p, f in zip(preds, frames):
        cm.accumulate(p, f.mask)
    return cm


def cmd_infer(args) -> int:
    out = _out_dir(args)
    params, _, pre = runtime.load(args.weights)
    image = data.read_image(args.image)
    with runtime.thread_limit(args.threads):
        mask = runtime.infer(image, params, pre)
    stem = Path(args.image).stem
    data.write_png(out / f"{stem}_mask.png", mask)
    if args.overlay:
        data.write_png(out / f"{stem}_overlay.png", runtime.overlay_rgba(mask))
    print(out / f"{stem}_mask.png")
    return 0


def cmd_bench(args) -> int:
    out = _out_dir(args)
    params, _, pre = runtime.load(args.weights)
    if args.data:
        frames = [f.image for f in data.load_manifest(args.data)[0]]
    else:
        frames = [s.image for s in synth.generate_dataset(10, "medium", args.seed or 0)]
    report = runtime.benchmark(params, frames, n=args.frames, warmup=args.warmup, threads=args.threads, preprocess=pre)
    (out / "latency.csv").write_text(report.to_csv())
    sys.stdout.write(report.to_csv())
    return 0


def cmd_describe(args) -> int:
    if args.weights:
        _, arch, _ = runtime.load(args.weights)
    else:
        arch = _load_run_config(args).arch
    report = runtime.describe(arch, (args.size, args.size))
    sys.stdout.write(report.to_csv() if args.csv else report.to_text())
    return 0


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="biolite", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"biolite {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
        sp.add_argument("--threads", type=int, default=1)
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    s = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    common(s)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--difficulty", choices=synth.DIFFICULTIES, default="easy")
    s.add_argument("--size", type=int, default=256)
    s.set_defaults(func=cmd_synth, seed=0)

    def config_args(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")

    t = sub.add_parser("train", help="train from a dataset manifest")
    common(t)
    config_args(t)
    t.add_argument("--data", required=True, help="dataset directory or manifest.tsv")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="segmentation metrics on a dataset split")
    common(e, seed=False)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--weights")
    e.add_argument("--self-test", action="store_true", help="score the ground truth against itself")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment one image")
    common(i, seed=False)
    i.add_argument("--weights", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--overlay", action="store_true")
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="latency benchmark")
    common(b)
    b.add_argument("--weights", required=True)
    b.add_argument("--data", help="frames to cycle through (default: synthetic)")
    b.add_argument("--frames", type=int, default=100)
    b.add_argument("--warmup", type=int, default=10)
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("describe", help="parameter and FLOP table")
    config_args(d)
    d.add_argument("--weights")
    d.add_argument("--size", type=int, default=256)
    d.add_argument("--csv", action="store_true")
    d.set_defaults(func=cmd_describe, seed=None)
    return p


def _fail(exc: BioliteError) -> int:
    msg = " ".join(str(exc).split())
    print(f"error category={exc.category} exit={exc.exit_code} message={msg}", file=sys.stderr)
    return exc.exit_code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except BioliteError as exc:
        return _fail(exc)
    except OSError as exc:
        return _fail(DataError(f"{exc.filename or ''}: {exc.strerror or exc}"))
    except Exception as exc:  # noqa: BLE001
        err = BioliteError(f"{type(exc).__name__}: {exc}")
        return _fail(err)


if __name__ == "__main__":
    sys.exit(main())
