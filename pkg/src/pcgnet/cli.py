"""Command-line front end.

Exit status is 0 on success, 1 on usage or configuration errors and 2 on
data errors (unreadable audio, bad manifests, corrupt checkpoints, ...).

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines, then command-line flags. Keys are the field names of
:class:`~pcgnet.features.MfccConfig` and :class:`~pcgnet.trainer.Hyperparams`.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import segmentation
from .errors import ConfigError, DataError, PcgNetError
from .features import MfccConfig, read_heatmap, render_ppm, write_heatmap
from .pcg_io import CANONICAL_RATE, labelled_counts, load_dataset, read_manifest
from .scoring import (ScoreReport, format_report, read_predictions, score_predictions, truncate4,
                      write_predictions)
from .tensor_nn import Architecture, load_checkpoint, save_checkpoint
from .trainer import Hyperparams, Pipeline, featurize_recordings, predict_recording, split_dataset, train

logger = logging.getLogger("pcgnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


_MFCC_FIELDS = {f.name: f for f in dataclasses.fields(MfccConfig)}
_HYPER_FIELDS = {f.name: f for f in dataclasses.fields(Hyperparams) if f.name != "seed"}
_SEED_FIELD = next(f for f in dataclasses.fields(Hyperparams) if f.name == "seed")


def _parse_bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _field_type(field):
    t = str(field.type)
    if t == "bool":
        return _parse_bool
    if "int" in t and "float" not in t:
        return int
    return float


def _add_overrides(p, fields):
    for name, f in fields.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=_field_type(f), default=None)


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; blank lines and ``#`` comments are ignored."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _MFCC_FIELDS and key not in _HYPER_FIELDS and key != "seed":
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def _convert(field, text):
    try:
        return _field_type(field)(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {field.name}: {text!r}") from exc


def _settings(args):
    """Merge defaults, config file and flags into ``(MfccConfig, Hyperparams)``."""
    raw = read_config(args.config) if getattr(args, "config", None) else {}
    mfcc, hyper = {}, {}
    for name, f in _MFCC_FIELDS.items():
        value = getattr(args, name, None)
        if value is None and name in raw:
            value = _convert(f, raw[name]) if raw[name].lower() != "none" else None
        if value is not None:
            mfcc[name] = value
    for name, f in _HYPER_FIELDS.items():
        value = getattr(args, name, None)
        if value is None and name in raw:
            value = _convert(f, raw[name])
        if value is not None:
            hyper[name] = value
    seed = getattr(args, "seed", None)
    if seed is None and "seed" in raw:
        seed = _convert(_SEED_FIELD, raw["seed"])
    if seed is not None:
        hyper["seed"] = seed
    try:
        return MfccConfig(**mfcc), Hyperparams(**hyper)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load(args):
    if not args.manifest:
        raise UsageError("--manifest is required")
    return load_dataset(args.manifest, args.data_dir, CANONICAL_RATE)


def _out_path(args, default=None) -> Path:
    if args.out is None:
        if default is None:
            raise UsageError("--out is required")
        return Path(default)
    return Path(args.out)


# subcommands

def cmd_ingest(args):
    recs = _load(args)
    summary = labelled_counts(recs)
    summary["total_seconds"] = round(sum(r.duration for r in recs), 3)
    summary["subjects"] = len({r.subject_id for r in recs})
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_segment(args):
    recs = _load(args)
    onsets = {}
    for r in recs:
        seq = segmentation.segment_states(r)
        onsets[r.id] = [int(o) for o in seq.s1_onsets]
    out = _out_path(args)
    segmentation.write_onsets(out, onsets)
    print(f"wrote onsets for {len(onsets)} recording(s) to {out}")


def cmd_featurize(args):
    mfcc, _ = _settings(args)
    recs = _load(args)
    out = _out_path(args)
    out.mkdir(parents=True, exist_ok=True)
    maps = featurize_recordings(recs, Pipeline(mfcc=mfcc), skip_errors=False)
    counters: dict[str, int] = {}
    for hm in maps:
        k = counters.get(hm.source_id, 0)
        counters[hm.source_id] = k + 1
        write_heatmap(hm, out / f"{hm.source_id}_{k:03d}.mfhm")
    print(f"wrote {len(maps)} heat map(s) for {len(counters)} recording(s) to {out}")


def cmd_render(args):
    if args.scale < 1:
        raise UsageError("--scale must be a positive integer")
    hm = read_heatmap(args.input)
    out = _out_path(args, Path(args.input).with_suffix(".ppm"))
    out.write_bytes(render_ppm(hm, args.scale))
    print(f"wrote {out}")


def cmd_train(args):
    mfcc, hyper = _settings(args)
    recs = _load(args)
    if args.val_manifest:
        val = load_dataset(args.val_manifest, args.data_dir, CANONICAL_RATE)
        train_recs = recs
    else:
        plan = split_dataset(recs, (1 - args.val_fraction, args.val_fraction), seed=hyper.seed)
        keep = set(plan.validation)
        train_recs = [r for r in recs if r.id not in keep]
        val = [r for r in recs if r.id in keep]
    pipe = Pipeline(mfcc=mfcc)
    train_maps = featurize_recordings(train_recs, pipe)
    val_maps = featurize_recordings(val, pipe)
    rows, cols = train_maps[0].values.shape if train_maps else (mfcc.kept_coefficients, 0)
    arch = Architecture(input_shape=(1, rows, cols))

    run = _out_path(args)
    run.mkdir(parents=True, exist_ok=True)
    log_path = run / "train_log.csv"
    if log_path.exists():
        log_path.unlink()
    result = train(train_maps, val_maps, hyper, arch, log_path=log_path)
    for p in (result.params, result.last):
        p.hyper = dict(hyper.to_dict(), mfcc=dataclasses.asdict(mfcc))
    save_checkpoint(result.params, run / "best.ckpt")
    save_checkpoint(result.last, run / "last.ckpt")
    best = result.log[result.best_epoch]
    print(f"best epoch {best.epoch}: validation Se {truncate4(best.val_se)} Sp {truncate4(best.val_sp)} "
          f"score {truncate4(best.val_score)}")


def _pipeline_for(params, args) -> Pipeline:
    mfcc, _ = _settings(args)
    stored = (params.hyper or {}).get("mfcc")
    if stored and not any(getattr(args, k, None) is not None for k in _MFCC_FIELDS) and not args.config:
        mfcc = MfccConfig(**stored)
    return Pipeline(mfcc=mfcc)


def _predict(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    params = load_checkpoint(args.checkpoint)
    recs = _load(args)
    pipe = _pipeline_for(params, args)
    return {r.id: predict_recording(r, params, pipe).code for r in recs}


def cmd_predict(args):
    preds = _predict(args)
    out = _out_path(args)
    write_predictions(out, preds)
    print(f"wrote {len(preds)} prediction(s) to {out}")


def cmd_evaluate(args):
    preds = _predict(args)
    if args.out:
        write_predictions(args.out, preds)
    _, _, report = score_predictions(preds, read_manifest(args.manifest))
    print(format_report(report))


def cmd_score(args):
    if args.se is not None or args.sp is not None:
        if args.se is None or args.sp is None:
            raise UsageError("--se and --sp must be given together")
        print(truncate4(ScoreReport(args.se, args.sp).overall))
        return
    if not args.predictions or not args.manifest:
        raise UsageError("score needs --se/--sp or --predictions with --manifest")
    _, _, report = score_predictions(read_predictions(args.predictions), read_manifest(args.manifest))
    print(format_report(report))


def cmd_synth(args):
    from .synthetic import generate_dataset, write_dataset

    items = generate_dataset(args.count, seed=args.seed or 0, abnormal_fraction=args.abnormal_fraction,
                             poor_fraction=args.poor_fraction, duration=args.duration)
    path = write_dataset(items, _out_path(args))
    print(f"wrote {len(items)} recording(s) and {path}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcgnet", description="Heart-sound classification pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, func, help, data=True, out_help=None):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        if data:
            p.add_argument("--manifest", help="manifest CSV (record_id,path,label,quality,subject_id)")
            p.add_argument("--data-dir", help="directory that manifest paths are relative to")
        p.add_argument("--out", help=out_help)
        return p

    command("ingest", cmd_ingest, "validate recordings and print a dataset summary",
            out_help="also write the JSON summary here")
    command("segment", cmd_segment, "write detected S1 onsets as CSV", out_help="onsets CSV")

    p = command("featurize", cmd_featurize, "write MFCC heat maps (.mfhm)", out_help="output directory")
    p.add_argument("--config")
    _add_overrides(p, _MFCC_FIELDS)

    p = command("render", cmd_render, "render a heat map as a PPM image", data=False,
                out_help="output .ppm (default: input name with .ppm)")
    p.add_argument("--input", required=True)
    p.add_argument("--scale", type=int, default=1, help="integer nearest-neighbour upscaling factor")

    p = command("train", cmd_train, "train the network", out_help="run directory")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--val-manifest", help="separate validation manifest (default: subject-disjoint split)")
    p.add_argument("--val-fraction", type=float, default=0.2)
    _add_overrides(p, _MFCC_FIELDS)
    _add_overrides(p, _HYPER_FIELDS)

    for name, func, help, out_help in (
        ("predict", cmd_predict, "classify recordings", "predictions CSV"),
        ("evaluate", cmd_evaluate, "classify and score a labelled set", "optional predictions CSV"),
    ):
        p = command(name, func, help, out_help=out_help)
        p.add_argument("--checkpoint")
        p.add_argument("--config")
        _add_overrides(p, _MFCC_FIELDS)

    p = command("score", cmd_score, "score predictions, or combine Se and Sp", data=False)
    p.add_argument("--manifest")
    p.add_argument("--predictions")
    p.add_argument("--se", type=float)
    p.add_argument("--sp", type=float)

    p = command("synth", cmd_synth, "write a synthetic labelled dataset", data=False, out_help="output directory")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--abnormal-fraction", type=float, default=0.2)
    p.add_argument("--poor-fraction", type=float, default=0.2)
    p.add_argument("--duration", type=float, default=10.0)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except PcgNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
