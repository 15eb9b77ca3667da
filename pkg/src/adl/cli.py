"""Command-line entry point for the full experiment pipeline.

Subcommands: gen-data, train-teacher, train-student, eval, localize,
arrow-of-time, export-attn, selftest. Every command reads an optional flat
`key = value` config file, applies flag overrides, and persists the
resolved merge next to its outputs. Exit codes: 0 success, 1 invalid
input or config, 2 runtime failure.
"""

import argparse
import hashlib
import os
import sys

_TRAIN_KEYS = (
    "mode", "epochs", "batch_size", "lr", "lr_decay", "plateau_patience",
    "plateau_threshold", "momentum", "weight_decay", "dropout", "temperature",
    "lambda_distill", "lambda_uniform", "featmatch_weight", "seed",
    "literal_eq4", "sampled_targets", "flip_prob", "widths",
)
_GEN_KEYS = ("seed", "train_per_class", "test_per_class", "background_amplitude",
             "shapes", "motions")


def _set_threads(argv):
    """Pin BLAS pools before numpy loads; --threads beats ADL_THREADS beats 1."""
    threads = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif a.startswith("--threads="):
            threads = a.split("=", 1)[1]
    if threads is None:
        threads = os.environ.get("ADL_THREADS", "1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(threads)
    return threads


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="adl", description="attention distillation lab")
    parser.add_argument("--threads", default=None,
                        help="BLAS thread count (default 1; >1 may break "
                             "bit-reproducibility)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat key = value file")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")

    p = sub.add_parser("gen-data", help="generate the synthetic video dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", default=None)
    p.add_argument("--train-per-class", dest="train_per_class", default=None)
    p.add_argument("--test-per-class", dest="test_per_class", default=None)
    p.add_argument("--background-amplitude", dest="background_amplitude", default=None)
    p.add_argument("--shapes", default=None, help="comma list of class shapes")
    p.add_argument("--motions", default=None, help="comma list of class motions")
    p.set_defaults(func=cmd_gen_data)

    def train_flags(p):
        common(p)
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--out", required=True)
        p.add_argument("--mode", default=None)
        p.add_argument("--epochs", default=None)
        p.add_argument("--batch-size", dest="batch_size", default=None)
        p.add_argument("--lr", default=None)
        p.add_argument("--lr-decay", dest="lr_decay", default=None)
        p.add_argument("--plateau-patience", dest="plateau_patience", default=None)
        p.add_argument("--plateau-threshold", dest="plateau_threshold", default=None)
        p.add_argument("--momentum", default=None)
        p.add_argument("--weight-decay", dest="weight_decay", default=None)
        p.add_argument("--dropout", default=None)
        p.add_argument("--temperature", default=None)
        p.add_argument("--lambda-distill", dest="lambda_distill", default=None)
        p.add_argument("--lambda-uniform", dest="lambda_uniform", default=None)
        p.add_argument("--featmatch-weight", dest="featmatch_weight", default=None)
        p.add_argument("--seed", default=None)
        p.add_argument("--literal-eq4", dest="literal_eq4", action="store_const",
                       const="true", default=None)
        p.add_argument("--sampled-targets", dest="sampled_targets",
                       action="store_const", const="true", default=None)
        p.add_argument("--flip-prob", dest="flip_prob", default=None)
        p.add_argument("--widths", default=None, help="comma list, e.g. 16,32,64")

    p = sub.add_parser("train-teacher", help="train the flow teacher")
    train_flags(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train a colour student")
    train_flags(p)
    p.add_argument("--role", default=None,
                   help="student role (e.g. student-rgb-distill)")
    p.add_argument("--teacher", default=None, help="teacher checkpoint path")
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("eval", help="mean class accuracy of a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--reversed", action="store_true", dest="reversed_clips")
    p.add_argument("--teacher", default=None)
    p.add_argument("--out", default=None, help="directory for eval.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("localize", help="attention localization PR report")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--teacher", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--recall-dilated", action="store_true", dest="recall_dilated")
    p.add_argument("--center-prior", action="store_true", dest="center_prior",
                   help="also score the Gaussian center-prior baseline")
    p.add_argument("--overlays", type=int, default=3,
                   help="number of clips to render as overlays")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("arrow-of-time", help="forward vs reversed accuracy")
    common(p)
    p.add_argument("--ckpt", required=True, nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--teacher", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_arrow)

    p = sub.add_parser("export-attn", help="write attention maps to files")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--teacher", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="pgm", choices=("pgm", "csv"))
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--overlay", action="store_true")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("selftest", help="fast invariant battery")
    p.set_defaults(func=cmd_selftest)
    return parser


# ------------------------------------------------------------------ helpers

def _merge_config(args, keys):
    """File entries overridden by given flags, as a flat string map."""
    from .config import parse_flat
    merged = {}
    if args.config:
        if not os.path.exists(args.config):
            from .errors import InputError
            raise InputError(f"config file {args.config} does not exist")
        with open(args.config) as fh:
            merged.update(parse_flat(fh.read()))
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = str(value)
    return merged


def _guard_outputs(paths, force):
    from .errors import InputError
    existing = [p for p in paths if os.path.exists(p)]
    if existing and not force:
        raise InputError(f"output exists: {existing[0]} (pass --force to overwrite)")
    for p in existing:
        os.remove(p)


def _write_resolved(out_dir, name, entries):
    from .config import format_flat
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        fh.write(format_flat(entries))
    return path


def _load_split(data_dir, split):
    from .dataio import read_dataset
    from .errors import InputError
    path = os.path.join(data_dir, f"{split}.advd")
    if not os.path.exists(path):
        raise InputError(f"no {split} split at {path}; run gen-data first")
    return read_dataset(path)


def _load_ckpt(path):
    from .checkpoint import load_checkpoint
    from .errors import InputError
    if not os.path.exists(path):
        raise InputError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _maybe_teacher(args):
    return _load_ckpt(args.teacher) if args.teacher else None


def _digest_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _dataset_config_flat(config):
    return {
        "frames": str(config.frames), "height": str(config.height),
        "width": str(config.width), "sprite_size": str(config.sprite_size),
        "shapes": ",".join(config.shapes), "motions": ",".join(config.motions),
        "train_per_class": str(config.train_per_class),
        "test_per_class": str(config.test_per_class),
        "speeds": ",".join(str(s) for s in config.speeds),
        "distractor_counts": ",".join(str(c) for c in config.distractor_counts),
        "background_amplitude": repr(config.background_amplitude),
    }


def _dataset_config_digest(config):
    from .config import digest
    return digest(_dataset_config_flat(config))


# ------------------------------------------------------------------ commands

def cmd_gen_data(args):
    from . import datagen as dg
    from .dataio import manifest_path, write_dataset
    merged = _merge_config(args, _GEN_KEYS)
    seed = int(merged.pop("seed", "0"))
    kwargs = {}
    for key in ("train_per_class", "test_per_class"):
        if key in merged:
            kwargs[key] = int(merged.pop(key))
    if "background_amplitude" in merged:
        kwargs["background_amplitude"] = float(merged.pop("background_amplitude"))
    for key in ("shapes", "motions"):
        if key in merged:
            kwargs[key] = tuple(merged.pop(key).split(","))
    if merged:
        from .errors import ConfigError
        raise ConfigError(f"unknown config keys: {sorted(merged)}")
    config = dg.DatasetConfig(**kwargs)
    os.makedirs(args.out, exist_ok=True)
    digest = _dataset_config_digest(config)

    train, test = dg.generate_dataset(config, seed=seed)
    for split, data in (("train", train), ("test", test)):
        path = os.path.join(args.out, f"{split}.advd")
        fresh = path + ".tmp"
        write_dataset(fresh, data, split=split, seed=seed, config_digest=digest)
        if os.path.exists(path):
            same = _digest_file(path) == _digest_file(fresh)
            if same:
                os.remove(fresh)
                os.remove(manifest_path(fresh))
            elif not args.force:
                os.remove(fresh)
                os.remove(manifest_path(fresh))
                from .errors import InputError
                raise InputError(f"{path} exists with different content "
                                 "(pass --force to overwrite)")
            else:
                os.replace(fresh, path)
                os.replace(manifest_path(fresh), manifest_path(path))
        else:
            os.replace(fresh, path)
            os.replace(manifest_path(fresh), manifest_path(path))
        print(f"{split} {_digest_file(path)} ({len(data)} clips)")
    resolved = dict(_dataset_config_flat(config), seed=str(seed))
    _write_resolved(args.out, "gen-config.txt", resolved)
    return 0


def _run_training(args, role, teacher=None):
    from . import figures
    from .checkpoint import save_checkpoint
    from .harness import RunConfig, train_student, train_teacher
    merged = _merge_config(args, _TRAIN_KEYS)
    merged["role"] = role
    config = RunConfig.from_flat(merged)
    train_set = _load_split(args.data, "train")

    stem = "teacher" if role == "teacher-flow" else role.replace("student-rgb-", "student-")
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, f"{stem}.adck")
    log_path = os.path.join(args.out, f"{stem}.log")
    curve_path = os.path.join(args.out, f"{stem}-curve.png")
    _guard_outputs([ckpt_path, log_path, curve_path], args.force)

    if role == "teacher-flow":
        ckpt = train_teacher(train_set, config, log_path=log_path)
    else:
        ckpt = train_student(train_set, config, teacher=teacher, log_path=log_path)
    save_checkpoint(ckpt, ckpt_path)
    _write_resolved(args.out, f"{stem}-config.txt", ckpt.config)
    if config.epochs > 0:
        figures.save_training_curves(log_path, curve_path)
    acc = ckpt.metrics.get("train_accuracy", float("nan"))
    print(f"{stem} {_digest_file(ckpt_path)} train_accuracy {acc:.4f}")
    return 0


def cmd_train_teacher(args):
    return _run_training(args, "teacher-flow")


def cmd_train_student(args):
    from .errors import ConfigError
    from .harness import STUDENT_ROLES, TEACHER_FED_ROLES
    merged = _merge_config(args, _TRAIN_KEYS + ("role",))
    role = merged.get("role")
    if role is None:
        raise ConfigError("student training needs --role (or a config entry)")
    if role not in STUDENT_ROLES:
        raise ConfigError(f"unknown student role {role!r}; "
                          f"expected one of {STUDENT_ROLES}")
    teacher = _maybe_teacher(args)
    if role in TEACHER_FED_ROLES and teacher is None:
        raise ConfigError(f"role {role} trains against the teacher; "
                          "pass --teacher with its checkpoint")
    return _run_training(args, role, teacher=teacher)


def cmd_eval(args):
    from .evaluation import evaluate_accuracy
    ckpt = _load_ckpt(args.ckpt)
    dataset = _load_split(args.data, args.split)
    acc = evaluate_accuracy(ckpt, dataset, reversed_clips=args.reversed_clips,
                            teacher=_maybe_teacher(args))
    direction = "reversed" if args.reversed_clips else "forward"
    print(f"mean_class_accuracy {acc:.6f} ({args.split}, {direction})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "eval.txt")
        _guard_outputs([path], args.force)
        _write_resolved(args.out, "eval.txt", {
            "checkpoint": args.ckpt, "split": args.split,
            "direction": direction, "mean_class_accuracy": repr(acc)})
    return 0


def cmd_localize(args):
    import numpy as np
    from . import figures
    from .evaluation import (center_prior_baseline, localization_pr,
                             motion_attention_maps, write_report)
    ckpt = _load_ckpt(args.ckpt)
    dataset = _load_split(args.data, args.split)
    teacher = _maybe_teacher(args)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "localization.txt")
    curve_path = os.path.join(args.out, "pr-curve.png")
    overlay_paths = [os.path.join(args.out, f"overlay-{i}.png")
                     for i in range(args.overlays)]
    guard = [report_path, curve_path] + overlay_paths
    prior_path = os.path.join(args.out, "localization-center-prior.txt")
    if args.center_prior:
        guard.append(prior_path)
    _guard_outputs(guard, args.force)

    maps = motion_attention_maps(ckpt, dataset, teacher=teacher)
    frame_size = dataset.rgb.shape[2:4]
    report = localization_pr(maps, dataset.boxes, frame_size,
                             labels=dataset.labels,
                             recall_dilated=args.recall_dilated)
    namer = _class_namer_np(dataset)
    header = [f"resolution {report.resolution} tolerance {report.tolerance}",
              f"best threshold {report.best.threshold:.9g} "
              f"precision {report.best.precision:.6f} "
              f"recall {report.best.recall:.6f} f1 {report.best.f1:.6f}"]
    write_report(report_path, report.lines(class_names=namer), header=header)
    figures.save_pr_curve(report, curve_path)
    for i, path in enumerate(overlay_paths):
        if i >= len(dataset):
            break
        figures.save_attention_overlay(dataset.rgb[i], maps[i], path)
    print(f"best f1 {report.best.f1:.4f} at threshold {report.best.threshold:.6g}")

    if args.center_prior:
        t_grid = maps.shape[1]
        prior = center_prior_baseline((t_grid,), resolution=report.resolution)
        prior_maps = np.broadcast_to(prior, (len(dataset),) + prior.shape)
        prior_report = localization_pr(prior_maps, dataset.boxes, frame_size,
                                       labels=dataset.labels,
                                       recall_dilated=args.recall_dilated)
        write_report(prior_path, prior_report.lines(class_names=namer),
                     header=[f"gaussian center prior, sigma {report.resolution / 4}",
                             f"best f1 {prior_report.best.f1:.6f}"])
        print(f"center prior best f1 {prior_report.best.f1:.4f}")
    return 0


def _class_namer_np(dataset):
    from . import datagen as dg
    config = dg.DatasetConfig()
    n_classes = int(dataset.labels.max()) + 1 if len(dataset.labels) else 0
    if n_classes == config.num_classes:
        return config.class_name
    return None


def cmd_arrow(args):
    from . import figures
    from .evaluation import arrow_of_time_report, write_report
    dataset = _load_split(args.data, args.split)
    teacher = _maybe_teacher(args)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "arrow-of-time.txt")
    bars_path = os.path.join(args.out, "arrow-of-time.png")
    _guard_outputs([report_path, bars_path], args.force)

    rows, entries = [], []
    for path in args.ckpt:
        ckpt = _load_ckpt(path)
        name = os.path.splitext(os.path.basename(path))[0]
        rep = arrow_of_time_report(ckpt, dataset, teacher=teacher)
        rows.append(f"{name} {rep['forward']:.6f} {rep['reversed']:.6f} "
                    f"{rep['drop']:.6f}")
        entries.append((name, rep["forward"], rep["reversed"]))
        print(rows[-1])
    write_report(report_path, rows, header=["name forward reversed drop"])
    figures.save_accuracy_bars(entries, bars_path)
    return 0


def cmd_export(args):
    from . import figures
    from .evaluation import export_attention, motion_attention_maps
    ckpt = _load_ckpt(args.ckpt)
    dataset = _load_split(args.data, args.split)
    maps = motion_attention_maps(ckpt, dataset, teacher=_maybe_teacher(args))
    os.makedirs(args.out, exist_ok=True)
    count = min(args.count, len(dataset))
    written = []
    for i in range(count):
        stem = os.path.join(args.out, f"clip{i:03d}")
        first = f"{stem}_t0.pgm" if args.format == "pgm" else f"{stem}.csv"
        _guard_outputs([first], args.force)
        written.extend(export_attention(maps[i], stem, fmt=args.format))
        if args.overlay:
            overlay = f"{stem}-overlay.png"
            _guard_outputs([overlay], args.force)
            figures.save_attention_overlay(dataset.rgb[i], maps[i], overlay)
            written.append(overlay)
    print(f"wrote {len(written)} files for {count} clips to {args.out}")
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest
    failures = run_selftest(print)
    return 2 if failures else 0


# ------------------------------------------------------------------ entry

def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    _set_threads(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    from .errors import (AdlError, ConfigError, CorruptionError,
                         EvaluationError, FormatError, InputError)
    try:
        return args.func(args)
    except (ConfigError, InputError, FormatError, CorruptionError,
            EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AdlError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
