"""Command-line experiment runner.

Eight subcommands cover the pipeline stages: synthetic data generation,
teacher training, pseudo-labeling, full self-training, evaluation, paired
AUC comparison, the ablation suites, and ROC point export.

Every run is configured by the same flat key = value schema: built-in
defaults, overridden by --config FILE, overridden by --set KEY=VALUE flags
(--seed and --out-dir are shorthands that win over --set). All randomness
derives from the single config seed, and every emitted text artifact begins
with a header line recording the artifact version, config hash, and seed, so
identical configurations produce byte-identical outputs.

Exit codes: 0 success, 1 usage error, 2 config schema error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from nslgc.ablation import run_suite
from nslgc.config import (
    ConfigSchemaError,
    ExperimentConfig,
    build_experiment_config,
    load_config_file,
)
from nslgc.evaluate import confusion_at_threshold, delong_test, roc_curve, specificity, true_positive_rate
from nslgc.experiments import (
    _derive,
    make_labeled_split,
    make_test_cases,
    make_unlabeled_pool,
)
from nslgc.aggregate import predict_patient
from nslgc.persist import PersistError, load_checkpoint, load_crop_archive, save_checkpoint, save_crop_archive
from nslgc.selftrain import _child_rng, infer_pseudo_labels, params_hash, self_train_loop, train_supervised
from nslgc.model import build_model, predict_nodule
from nslgc.synth import gen_labeled_dataset, gen_patient_cohort
from nslgc.tensor import NumericError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    """Bad command line: unknown subcommand, malformed flag, missing argument."""


class _Parser(argparse.ArgumentParser):
    """argparse parser that reports errors as exceptions instead of exiting."""

    def error(self, message):
        raise UsageError(message)


def _fmt(x: float) -> str:
    """Deterministic, diff-stable float rendering."""
    return f"{float(x):.10g}"


# ---------------------------------------------------------------------------
# Configuration assembly
# ---------------------------------------------------------------------------


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="configuration file (flat key = value lines)")
    p.add_argument("--set", action="append", default=[], dest="sets", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--out-dir", help="shorthand for --set out_dir=DIR")


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    file_values = load_config_file(args.config) if args.config else None
    overrides: dict[str, str] = {}
    for item in args.sets:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    return build_experiment_config(file_values, overrides)


def _out_dir(exp: ExperimentConfig) -> Path:
    path = Path(exp["out_dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_records(path: Path, exp: ExperimentConfig, lines: list[str]) -> None:
    """One structured-text record: header line, then key = value lines."""
    path.write_text(exp.header_line() + "\n" + "".join(line + "\n" for line in lines),
                    encoding="utf-8")


def _write_roc_csv(path: Path, exp: ExperimentConfig, curve) -> None:
    rows = [exp.header_line(), "f_pr,t_pr"]
    rows += [f"{_fmt(f)},{_fmt(t)}" for f, t in zip(curve.fpr, curve.tpr)]
    path.write_text("".join(row + "\n" for row in rows), encoding="utf-8")


def _read_floats(path: str, what: str) -> np.ndarray:
    """One float per line; blank lines and '#' comments ignored."""
    values = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValueError(f"cannot read {what} file {path!r}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        try:
            values.append(float(stripped))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected a number, got {stripped!r}") from None
    if not values:
        raise ValueError(f"{what} file {path!r} contains no values")
    return np.array(values, dtype=np.float64)


def _read_labels(path: str) -> np.ndarray:
    labels = _read_floats(path, "labels")
    as_int = labels.astype(np.int64)
    if not np.array_equal(as_int, labels) or not np.isin(as_int, (0, 1)).all():
        raise ValueError(f"labels file {path!r} must contain only 0 and 1")
    return as_int


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_synth_gen(args: argparse.Namespace) -> int:
    """Write the same labeled set and unlabeled cohort the pipeline stages
    derive internally from the config seed, as inspectable archives."""
    exp = _experiment(args)
    out = _out_dir(exp)
    seed = exp["seed"]
    labeled = gen_labeled_dataset(exp.synth_config(seed=_derive(seed, 0)))
    cohort = gen_patient_cohort(exp.synth_config(seed=_derive(seed, 1)))

    save_crop_archive(str(out / "labeled.crops"),
                      [n.crop for n in labeled.nodules],
                      labels={n.crop.crop_id: float(n.label) for n in labeled.nodules})
    save_crop_archive(str(out / "cohort.crops"),
                      [crop for case in cohort.cases for crop in case.crops],
                      cases=cohort.cases)

    n_malignant = sum(n.label for n in labeled.nodules)
    _write_records(out / "synth-metrics.txt", exp, [
        f"n_labeled_nodules = {len(labeled.nodules)}",
        f"n_labeled_malignant = {n_malignant}",
        f"n_excluded_median_indeterminate = {labeled.n_excluded}",
        f"n_cohort_patients = {len(cohort.cases)}",
        f"n_cohort_crops = {sum(len(c.crops) for c in cohort.cases)}",
    ])
    print(f"wrote {out / 'labeled.crops'}, {out / 'cohort.crops'}, {out / 'synth-metrics.txt'}")
    return EXIT_OK


def _cmd_train_teacher(args: argparse.Namespace) -> int:
    exp = _experiment(args)
    out = _out_dir(exp)
    seed = exp["seed"]
    train_examples, val_examples = make_labeled_split(exp, seed)

    model = build_model(replace(exp.model_config(), seed=seed))
    model, trace = train_supervised(model, train_examples, exp.train_config(),
                                    exp.noise_toggles(), exp.mixup_config(),
                                    _child_rng(seed, 0, 0), mixup_rng=_child_rng(seed, 0, 2))
    save_checkpoint(model, str(out / "teacher.ckpt"))

    lines = [
        f"n_train = {len(train_examples)}",
        f"n_val = {len(val_examples)}",
        f"epochs = {exp['train.epochs']}",
        f"final_loss = {_fmt(trace[-1]) if trace else 'none'}",
        f"param_hash = {params_hash(model)}",
    ]
    if val_examples:
        scores = np.array([predict_nodule(model, e.crop.volume) for e in val_examples])
        labels = np.array([int(e.label >= 0.5) for e in val_examples])
        if len(set(labels.tolist())) == 2:
            lines.append(f"val_auc = {_fmt(roc_curve(scores, labels).auc)}")
    _write_records(out / "teacher-metrics.txt", exp, lines)
    print(f"wrote {out / 'teacher.ckpt'}, {out / 'teacher-metrics.txt'}")
    return EXIT_OK


def _cmd_pseudo_label(args: argparse.Namespace) -> int:
    exp = _experiment(args)
    out = _out_dir(exp)
    model = load_checkpoint(args.model)
    crops, _, _ = load_crop_archive(args.crops)
    if not crops:
        raise ValueError(f"crop archive {args.crops!r} contains no crops")
    noised = exp["noise.noised_teacher"]
    pseudo = infer_pseudo_labels(model, crops, noised,
                                 rng=_child_rng(exp["seed"], 0, 1) if noised else None)
    rows = [exp.header_line(), "crop_id,probability,confidence"]
    rows += [f"{e.crop_id},{_fmt(e.probability)},{_fmt(e.confidence)}" for e in pseudo.entries]
    path = out / "pseudo-labels.csv"
    path.write_text("".join(r + "\n" for r in rows), encoding="utf-8")
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_self_train(args: argparse.Namespace) -> int:
    exp = _experiment(args)
    out = _out_dir(exp)
    seed = exp["seed"]
    train_examples, val_examples = make_labeled_split(exp, seed)
    unlabeled = make_unlabeled_pool(exp, seed)

    config = replace(exp.selftrain_config(), model=replace(exp.model_config(), seed=seed))
    result = self_train_loop(config, train_examples, unlabeled, val_examples, seed=seed)
    save_checkpoint(result.final_model, str(out / "final.ckpt"))

    lines = [
        f"iterations = {config.iterations}",
        f"n_train = {len(train_examples)}",
        f"n_val = {len(val_examples)}",
        f"n_unlabeled = {len(unlabeled)}",
    ]
    for rec in result.iterations:
        prefix = f"iteration_{rec.iteration}"
        lines.append(f"{prefix}.variant = {rec.variant}")
        lines.append(f"{prefix}.n_pseudo_total = {rec.n_pseudo_total}")
        lines.append(f"{prefix}.n_pseudo_kept = {rec.n_pseudo_kept}")
        lines.append(f"{prefix}.final_loss = {_fmt(rec.loss_trace[-1]) if rec.loss_trace else 'none'}")
        lines.append(f"{prefix}.val_auc = {_fmt(rec.val_auc) if rec.val_auc is not None else 'none'}")
    lines.append(f"final_param_hash = {params_hash(result.final_model)}")
    _write_records(out / "selftrain-metrics.txt", exp, lines)
    print(f"wrote {out / 'final.ckpt'}, {out / 'selftrain-metrics.txt'}")
    return EXIT_OK


def _cmd_evaluate(args: argparse.Namespace) -> int:
    exp = _experiment(args)
    out = _out_dir(exp)
    model = load_checkpoint(args.model)

    if args.cohort:
        _, _, cases = load_crop_archive(args.cohort)
        cases = [c for c in cases if c.label is not None]
        if not cases:
            raise ValueError(f"cohort archive {args.cohort!r} has no labeled patient cases")
    else:
        cases = make_test_cases(exp, exp["seed"])

    scores = np.array([predict_patient(model, c).probability for c in cases])
    labels = np.array([c.label for c in cases], dtype=np.int64)
    if len(set(labels.tolist())) < 2:
        raise ValueError("cohort must contain both cancer and cancer-free patients")
    curve = roc_curve(scores, labels)
    counts = confusion_at_threshold(scores, labels, 0.5)
    accuracy = (counts.tp + counts.tn) / len(labels)

    _write_records(out / "evaluate-metrics.txt", exp, [
        f"n_patients = {len(cases)}",
        f"auc = {_fmt(curve.auc)}",
        f"accuracy = {_fmt(accuracy)}",
        f"sensitivity = {_fmt(true_positive_rate(counts))}",
        f"specificity = {_fmt(specificity(counts))}",
    ])
    if args.roc:
        _write_roc_csv(Path(args.roc), exp, curve)
        print(f"wrote {out / 'evaluate-metrics.txt'}, {args.roc}")
    else:
        print(f"wrote {out / 'evaluate-metrics.txt'}")
    return EXIT_OK


def _cmd_delong(args: argparse.Namespace) -> int:
    exp = _experiment(args)
    scores_a = _read_floats(args.scores_a, "scores")
    scores_b = _read_floats(args.scores_b, "scores")
    labels = _read_labels(args.labels)
    if not (len(scores_a) == len(scores_b) == len(labels)):
        raise ValueError(
            f"score/label lengths differ: {len(scores_a)}, {len(scores_b)}, {len(labels)}"
        )
    result = delong_test(scores_a, scores_b, labels)
    lines = [
        f"auc_a = {_fmt(result.auc_a)}",
        f"auc_b = {_fmt(result.auc_b)}",
        f"z = {_fmt(result.z)}",
        f"p = {_fmt(result.p_value)}",
    ]
    for line in lines:
        print(line)
    if args.out:
        _write_records(Path(args.out), exp, lines)
        print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_ablate(args: argparse.Namespace) -> int:
    exp = _experiment(args)
    out = _out_dir(exp)
    try:
        table = run_suite(args.suite, exp)
    except ValueError as exc:
        if "unknown ablation suite" in str(exc):
            raise UsageError(str(exc)) from exc
        raise
    rows = [exp.header_line(),
            f"suite = {table.suite}",
            f"seeds = {','.join(str(s) for s in table.seeds)}",
            "row\tmean_auc\tseed_aucs"]
    for row in table.rows:
        rows.append(f"{row.name}\t{_fmt(row.mean_auc)}\t{','.join(_fmt(a) for a in row.aucs)}")
    path = out / f"ablate-{table.suite}.txt"
    path.write_text("".join(r + "\n" for r in rows), encoding="utf-8")
    for line in rows[1:]:
        print(line)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_roc_export(args: argparse.Namespace) -> int:
    exp = _experiment(args)
    scores = _read_floats(args.scores, "scores")
    labels = _read_labels(args.labels)
    if len(scores) != len(labels):
        raise ValueError(f"score/label lengths differ: {len(scores)}, {len(labels)}")
    curve = roc_curve(scores, labels)
    _write_roc_csv(Path(args.out), exp, curve)
    print(f"wrote {args.out} (auc = {_fmt(curve.auc)})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="nslgc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-gen", help="generate labeled nodules and a patient cohort")
    _add_common_flags(p)
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("train-teacher", help="train a supervised teacher on labeled nodules")
    _add_common_flags(p)
    p.set_defaults(func=_cmd_train_teacher)

    p = sub.add_parser("pseudo-label", help="infer pseudo labels for a crop archive")
    _add_common_flags(p)
    p.add_argument("--model", required=True, help="teacher checkpoint")
    p.add_argument("--crops", required=True, help="crop archive to label")
    p.set_defaults(func=_cmd_pseudo_label)

    p = sub.add_parser("self-train", help="run the full noisy-student loop")
    _add_common_flags(p)
    p.set_defaults(func=_cmd_self_train)

    p = sub.add_parser("evaluate", help="patient-level evaluation of a checkpoint")
    _add_common_flags(p)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--cohort", help="labeled cohort archive (default: generate from config)")
    p.add_argument("--roc", help="also write ROC points to this CSV path")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("delong", help="compare two score files on the same labels")
    _add_common_flags(p)
    p.add_argument("--scores-a", required=True)
    p.add_argument("--scores-b", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", help="also write the result record to this path")
    p.set_defaults(func=_cmd_delong)

    p = sub.add_parser("ablate", help="run one ablation suite")
    _add_common_flags(p)
    p.add_argument("--suite", required=True,
                   help="suite id b1..b6 or alias (variants|labels|warmstart|noise|head|alpha)")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("roc-export", help="export ROC points for a score file")
    _add_common_flags(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_roc_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError("a subcommand is required (see --help)")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except ConfigSchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PersistError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:  # argparse --help
        code = exc.code
        return int(code) if code is not None else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
