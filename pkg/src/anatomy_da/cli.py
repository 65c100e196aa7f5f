"""Command-line entry point: ``anatomy-da <command> [options]``.

Commands: gen-data, derive-bounds, train-source, adapt-uda, adapt-sfda, eval.

Training options come from ``--config FILE`` (YAML mapping of training
fields) with individual flags taking precedence.  Relative dataset paths that
do not exist under the working directory are looked up under
``$ANATOMY_DA_DATA``.  Errors are printed to stderr as
``anatomy-da: error[CODE]: message`` and exit with a nonzero status.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import yaml
from threadpoolctl import threadpool_limits

from . import __version__
from .datagen import (
    SPLITS,
    ShiftConfig,
    BodyTemplate,
    default_shift,
    dir_checksum,
    generate_dataset,
    load_dataset,
    load_split,
)
from .evaluation import correlation_study, evaluate_poses, format_report, format_table, mean_pose_baseline
from .model import ModelState, load_checkpoint, predict, save_checkpoint
from .skeleton import (
    SkeletonSpec,
    default_skeleton,
    derive_bounds,
    load_bounds,
    load_skeleton,
    save_bounds,
)
from .trainer import TrainConfig, TrainingDiverged, adapt_sfda, adapt_uda, train_source

DATA_ROOT_ENV = "ANATOMY_DA_DATA"

log = logging.getLogger("anatomy_da")


class CliError(Exception):
    """An error with a stable code and exit status."""

    def __init__(self, code: str, message: str, status: int = 1):
        super().__init__(message)
        self.code = code
        self.status = status


# exit statuses
EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_MISMATCH, EXIT_DIVERGED = 2, 3, 4, 5, 6


# ---------------------------------------------------------------- helpers


def _resolve_input(path) -> Path:
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    root = os.environ.get(DATA_ROOT_ENV)
    if root and (Path(root) / p).exists():
        return Path(root) / p
    return p


def _read_yaml_mapping(path, what: str) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise CliError("E_IO", f"cannot read {what} {p}: {exc.strerror}", EXIT_IO) from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise CliError("E_CONFIG", f"{p}{where}: {getattr(exc, 'problem', exc)}", EXIT_CONFIG) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise CliError("E_CONFIG", f"{p}: expected a mapping at top level", EXIT_CONFIG)
    return data


def _train_config(args) -> TrainConfig:
    """Defaults < config file < flags."""
    values = {}
    if args.config:
        data = _read_yaml_mapping(args.config, "config")
        values.update(data.get("train", data))
    for f in fields(TrainConfig):
        v = getattr(args, f"opt_{f.name}", None)
        if v is not None:
            values[f.name] = v
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise CliError("E_CONFIG", f"training config: {exc}", EXIT_CONFIG) from exc


def _load_data(path):
    manifest = _resolve_input(path)
    if manifest.is_dir():
        manifest = manifest / "manifest.yaml"
    if not manifest.exists():
        raise CliError("E_IO", f"dataset manifest not found: {manifest}", EXIT_IO)
    try:
        return (manifest, *load_dataset(manifest))
    except (OSError, KeyError, ValueError) as exc:
        raise CliError("E_DATA", f"cannot load dataset {manifest}: {exc}", EXIT_IO) from exc


def _load_bounds(path, spec: SkeletonSpec):
    p = _resolve_input(path)
    try:
        bounds = load_bounds(p)
    except OSError as exc:
        raise CliError("E_IO", f"cannot read bounds {p}: {exc.strerror}", EXIT_IO) from exc
    except (KeyError, ValueError) as exc:
        raise CliError("E_CONFIG", f"bounds file {p}: {exc}", EXIT_CONFIG) from exc
    try:
        bounds.check_spec(spec)
    except ValueError as exc:
        raise CliError("E_MISMATCH", f"bounds {p} do not fit the skeleton: {exc}", EXIT_MISMATCH) from exc
    return bounds


def _load_ckpt(path) -> ModelState:
    p = _resolve_input(path)
    try:
        return load_checkpoint(p)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError("E_IO", f"cannot load checkpoint {p}: {exc}", EXIT_IO) from exc


def _check_ckpt_spec(state: ModelState, spec: SkeletonSpec, what: str) -> None:
    k = state.student.config.n_joints
    if k != spec.n_joints:
        raise CliError("E_MISMATCH", f"{what} predicts {k} joints but the skeleton has {spec.n_joints}",
                       EXIT_MISMATCH)


def _rel(path, base: Path) -> str:
    return os.path.relpath(Path(path).resolve(), base.resolve())


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Provenance record written next to a training output before training starts."""

    def __init__(self, out: Path, command: str, config: TrainConfig, inputs: dict):
        self.path = out.with_name(out.name + ".run.yaml")
        base = self.path.parent
        self.data = {
            "command": command,
            "version": __version__,
            "seed": config.seed,
            "config": config.to_dict(),
            "inputs": {k: _rel(v, base) for k, v in inputs.items()},
            "checksums": {k: _checksum(v) for k, v in inputs.items()},
            "output": _rel(out, base),
            "started": _now(),
            "finished": None,
        }
        self._write()

    def finish(self, **extra) -> None:
        self.data["finished"] = _now()
        self.data.update(extra)
        self._write()

    def _write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as fh:
            yaml.safe_dump(self.data, fh, sort_keys=False)


def _checksum(path) -> str:
    p = Path(path)
    if p.is_dir():
        return dir_checksum(p)
    return hashlib.sha256(p.read_bytes()).hexdigest()


def _write_ckpt(state: ModelState, out: Path) -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out)


def _run_training(fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except TrainingDiverged as exc:
        raise CliError("E_DIVERGED", str(exc), EXIT_DIVERGED) from exc


def _log_path(args, out: Path) -> Path:
    return Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _read_yaml_mapping(args.config, "config") if args.config else {}
    known = {"template", "skeleton", "counts", "shift", "seed", "points_per_bone", "noise",
             "subjects_per_split", "scale_range", "sym_tol"}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise CliError("E_CONFIG", f"unknown gen-data field(s): {', '.join(unknown)}", EXIT_CONFIG)
    base = Path(args.config).parent if args.config else Path(".")
    template = None
    if "template" in cfg:
        tpath = base / str(cfg["template"])
        if not tpath.exists():
            raise CliError("E_CONFIG", f"field 'template': file not found: {tpath}", EXIT_CONFIG)
        spec = load_skeleton(base / cfg["skeleton"]) if "skeleton" in cfg else default_skeleton()
        try:
            template = BodyTemplate.from_dict(_read_yaml_mapping(tpath, "template"), spec)
        except (TypeError, ValueError) as exc:
            raise CliError("E_CONFIG", f"field 'template': {exc}", EXIT_CONFIG) from exc
    try:
        shift = [ShiftConfig.from_dict(s) for s in cfg["shift"]] if "shift" in cfg else default_shift()
    except (TypeError, ValueError) as exc:
        raise CliError("E_CONFIG", f"field 'shift': {exc}", EXIT_CONFIG) from exc
    counts = cfg.get("counts", (400, 400, 50, 100))
    if args.counts:
        counts = [int(c) for c in args.counts.split(",")]
    if isinstance(counts, (list, tuple)) and len(counts) != len(SPLITS):
        raise CliError("E_CONFIG", f"field 'counts': need {len(SPLITS)} values", EXIT_CONFIG)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    try:
        manifest = generate_dataset(
            args.out, template=template, counts=counts, target_shift=shift, seed=seed,
            points_per_bone=int(cfg.get("points_per_bone", 40)), noise=float(cfg.get("noise", 0.005)),
            subjects_per_split=int(cfg.get("subjects_per_split", 10)),
            scale_range=tuple(cfg.get("scale_range", (0.9, 1.1))), sym_tol=float(cfg.get("sym_tol", 0.0)),
        )
    except ValueError as exc:
        raise CliError("E_CONFIG", str(exc), EXIT_CONFIG) from exc
    except OSError as exc:
        raise CliError("E_IO", f"cannot write dataset: {exc}", EXIT_IO) from exc
    print(manifest)
    return 0


def cmd_derive_bounds(args) -> int:
    split_dir = _resolve_input(args.split)
    if not split_dir.is_dir():
        raise CliError("E_IO", f"split directory not found: {split_dir}", EXIT_IO)
    spec = _spec_for_split(args, split_dir)
    split = load_split(split_dir, spec)
    if split.poses is None or not len(split):
        raise CliError("E_DATA", f"split {split_dir} has no labeled poses", EXIT_MISMATCH)
    try:
        bounds = derive_bounds(split.poses, spec, args.sym_tol, sym_from_data=not args.no_sym_from_data)
        bounds = bounds.with_margin(args.margin)
    except ValueError as exc:
        raise CliError("E_DATA", str(exc), EXIT_MISMATCH) from exc
    save_bounds(bounds, args.out)
    print(args.out)
    return 0


def _spec_for_split(args, split_dir: Path) -> SkeletonSpec:
    if args.skeleton:
        return load_skeleton(_resolve_input(args.skeleton))
    sibling = split_dir.parent / "skeleton.yaml"
    return load_skeleton(sibling) if sibling.exists() else default_skeleton()


def cmd_train_source(args) -> int:
    cfg = _train_config(args)
    manifest, _, spec, _, splits = _load_data(args.data)
    split = splits[args.split]
    if split.poses is None:
        raise CliError("E_DATA", f"split {args.split} has no labels", EXIT_MISMATCH)
    state = None
    if args.resume:
        state = _load_ckpt(args.resume)
        _check_ckpt_spec(state, spec, "resume checkpoint")
    out = Path(args.out)
    run = RunManifest(out, "train-source", cfg, {"data": manifest.parent})
    state = _run_training(train_source, split.clouds, split.poses, cfg, state=state,
                          log_path=_log_path(args, out), fail_dir=out.parent)
    _write_ckpt(state, out)
    run.finish(epochs_completed=state.epoch)
    print(out)
    return 0


def cmd_adapt_uda(args) -> int:
    if not args.bounds:
        raise CliError("E_USAGE", "adapt-uda requires --bounds (derive them with derive-bounds)", EXIT_USAGE)
    cfg = _train_config(args)
    manifest, _, spec, _, splits = _load_data(args.data)
    bounds = _load_bounds(args.bounds, spec)
    src, tgt = splits["source_train"], splits[args.target_split]
    state = None
    if args.resume:
        state = _load_ckpt(args.resume)
        _check_ckpt_spec(state, spec, "resume checkpoint")
    out = Path(args.out)
    run = RunManifest(out, "adapt-uda", cfg, {"data": manifest.parent, "bounds": _resolve_input(args.bounds)})
    state = _run_training(adapt_uda, src.clouds, src.poses, tgt.clouds, spec, bounds, cfg, state=state,
                          log_path=_log_path(args, out), fail_dir=out.parent)
    _write_ckpt(state, out)
    run.finish(epochs_completed=state.epoch)
    print(out)
    return 0


def cmd_adapt_sfda(args) -> int:
    if not args.bounds:
        raise CliError("E_USAGE", "adapt-sfda requires --bounds", EXIT_USAGE)
    cfg = _train_config(args)
    manifest, _, spec, _, splits = _load_data(args.data)
    bounds = _load_bounds(args.bounds, spec)
    start = _load_ckpt(args.resume or args.checkpoint)
    _check_ckpt_spec(start, spec, "checkpoint")
    out = Path(args.out)
    run = RunManifest(out, "adapt-sfda", cfg, {"data": manifest.parent, "bounds": _resolve_input(args.bounds),
                                               "checkpoint": _resolve_input(args.resume or args.checkpoint)})
    state = _run_training(adapt_sfda, start, splits[args.target_split].clouds, spec, bounds, cfg,
                          log_path=_log_path(args, out), fail_dir=out.parent)
    _write_ckpt(state, out)
    run.finish(epochs_completed=state.epoch)
    print(out)
    return 0


def _parse_joints(text: str, spec: SkeletonSpec) -> list[int]:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok.isdigit():
            j = int(tok)
        elif tok in spec.joint_names:
            j = spec.joint_names.index(tok)
        else:
            raise CliError("E_USAGE", f"unknown joint {tok!r}", EXIT_USAGE)
        if not 0 <= j < spec.n_joints:
            raise CliError("E_USAGE", f"joint index {j} out of range", EXIT_USAGE)
        out.append(j)
    return out


def cmd_eval(args) -> int:
    manifest, _, spec, data_bounds, splits = _load_data(args.data)
    state = _load_ckpt(args.checkpoint)
    _check_ckpt_spec(state, spec, "checkpoint")
    bounds = _load_bounds(args.bounds, spec) if args.bounds else data_bounds
    split = splits[args.split]
    if split.poses is None:
        raise CliError("E_DATA", f"split {args.split} has no labels to evaluate against", EXIT_MISMATCH)
    net = state.teacher if args.teacher else state.student
    pred = predict(net, split.clouds)
    joints = _parse_joints(args.joints, spec) if args.joints else None
    report = evaluate_poses(pred, split.poses, spec, bounds, joints)
    extra = {"split": args.split, "network": "teacher" if args.teacher else "student"}
    if args.baseline:
        base = mean_pose_baseline(splits["source_train"].poses, split.poses, spec.root, spec)
        extra["mean_pose_baseline_mm"] = f"{base.mean * 1000:.3f}"
    text = format_report(report, spec, extra)
    if args.correlation:
        val = splits[args.correlation]
        if val.poses is None:
            raise CliError("E_DATA", f"split {args.correlation} has no labels", EXIT_MISMATCH)
        try:
            rows = correlation_study(predict(net, val.clouds), val.poses, spec, bounds)
        except ValueError as exc:
            raise CliError("E_DATA", f"correlation study: {exc}", EXIT_MISMATCH) from exc
        text += "".join(f"pearson.{n}.r: {r:.6f}\npearson.{n}.p: {p:.6g}\n" for n, r, p in rows)
        if args.table:
            print(format_table(rows, ["loss", "R", "p"]), end="", file=sys.stderr)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser


def _add_train_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training options (override --config)")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if f.name == "enc_dims":
            kind = lambda s: tuple(int(v) for v in s.split(","))  # noqa: E731
        elif f.name in ("ema_momentum",):
            kind = float
        elif f.name in ("epochs",):
            kind = int
        else:
            kind = type(default)
        g.add_argument(flag, dest=f"opt_{f.name}", type=kind, default=None, metavar=f.name.upper(),
                       help=f"default: {default if default is not None else 'stage dependent'}")


def build_parser() -> argparse.ArgumentParser:
    # global options are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="limit BLAS threads; 1 gives fully deterministic numerics")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log every epoch to stderr")
    parser = argparse.ArgumentParser(prog="anatomy-da", description=__doc__.split("\n\n")[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.set_defaults(threads=None, verbose=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic source/target dataset")
    p.add_argument("--config", help="YAML with template, counts, shift, seed, ...")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--counts", help="comma-separated sizes of " + ",".join(SPLITS))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("derive-bounds", parents=[common], help="derive anatomical bounds from a labeled split")
    p.add_argument("--split", required=True, help="split directory with .pose.txt files")
    p.add_argument("--out", required=True)
    p.add_argument("--skeleton", help="skeleton YAML (default: next to the split, else built-in)")
    p.add_argument("--sym-tol", type=float, default=0.0, help="minimum symmetry tolerance (m)")
    p.add_argument("--no-sym-from-data", action="store_true",
                   help="use --sym-tol as is instead of the empirical maximum asymmetry")
    p.add_argument("--margin", type=float, default=0.0, help="relative widening of length intervals")
    p.set_defaults(func=cmd_derive_bounds)

    for name, func, hlp in (("train-source", cmd_train_source, "supervised training on a labeled split"),
                            ("adapt-uda", cmd_adapt_uda, "unsupervised domain adaptation"),
                            ("adapt-sfda", cmd_adapt_sfda, "source-free adaptation of a checkpoint")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("--data", required=True, help="dataset directory or manifest.yaml")
        p.add_argument("--out", required=True, help="output checkpoint path")
        p.add_argument("--config", help="YAML training config")
        p.add_argument("--log", help="JSON-lines epoch log (default: <out>.log.jsonl)")
        p.add_argument("--resume", help="checkpoint of an interrupted run of the same command")
        if name == "train-source":
            p.add_argument("--split", default="source_train", choices=SPLITS)
        else:
            p.add_argument("--bounds", help="anatomical bounds YAML (required)")
            p.add_argument("--target-split", default="target_train", choices=SPLITS)
        if name == "adapt-sfda":
            p.add_argument("--checkpoint", required=True, help="pretrained source checkpoint")
        _add_train_options(p)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a labeled split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="target_test", choices=SPLITS)
    p.add_argument("--bounds", help="bounds YAML (default: the dataset's bounds)")
    p.add_argument("--joints", help="comma-separated joint names or indices for a subset mean")
    p.add_argument("--teacher", action="store_true", help="evaluate the teacher network")
    p.add_argument("--baseline", action="store_true", help="also report the mean-pose baseline")
    p.add_argument("--correlation", choices=SPLITS, help="labeled split for the loss/error correlation study")
    p.add_argument("--table", action="store_true", help="print the correlation table to stderr")
    p.add_argument("--out", help="also write the report to this file")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise CliError("E_USAGE", "--threads must be >= 1", EXIT_USAGE)
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except CliError as exc:
        print(f"anatomy-da: error[{exc.code}]: {exc}", file=sys.stderr)
        return exc.status
    except FileNotFoundError as exc:
        print(f"anatomy-da: error[E_IO]: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
