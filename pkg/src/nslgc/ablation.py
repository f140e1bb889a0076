"""Ablation suites: six predefined configuration grids over the self-training
pipeline (student architecture, label mode, warm-starting, noise sources,
head type, and the mixup mixing parameter).

Each grid row is a named set of raw config overrides applied on top of the
base experiment configuration; a row's result is the mean patient-level test
AUC over the configured seed list. Grids are pure data until executed, so
row definitions can be inspected and counted without training anything.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nslgc.config import ExperimentConfig, build_experiment_config, parse_config_text
from nslgc.experiments import run_ablation_row

SUITES = ("b1", "b2", "b3", "b4", "b5", "b6")

# Human-oriented aliases accepted wherever a suite id is expected.
SUITE_ALIASES = {
    "variants": "b1",
    "labels": "b2",
    "warmstart": "b3",
    "noise": "b4",
    "head": "b5",
    "alpha": "b6",
}

MIXUP_ALPHA_GRID = (0.1, 0.2, 0.4, 0.8, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0)


def resolve_suite(suite: str) -> str:
    """Map a suite id or alias to its canonical id; unknown ids raise."""
    canonical = SUITE_ALIASES.get(suite, suite)
    if canonical not in SUITES:
        known = ", ".join(SUITES + tuple(sorted(SUITE_ALIASES)))
        raise ValueError(f"unknown ablation suite {suite!r} (known: {known})")
    return canonical


@dataclass(frozen=True)
class RowSpec:
    """One grid row: a display name plus raw config overrides."""

    name: str
    overrides: tuple[tuple[str, str], ...]


@dataclass
class AblationRow:
    suite: str
    name: str
    seeds: tuple[int, ...]
    aucs: tuple[float, ...]
    mean_auc: float


@dataclass
class AblationTable:
    suite: str
    seeds: tuple[int, ...]
    rows: list[AblationRow]


def _student_variants(exp: ExperimentConfig, variant: str) -> str:
    """Raw value pinning every student iteration to ``variant``."""
    return ",".join([variant] * max(0, exp["selftrain.iterations"] - 1))


def suite_specs(suite: str, exp: ExperimentConfig) -> list[RowSpec]:
    """The configuration grid for one suite, as pure row specifications."""
    suite = resolve_suite(suite)

    def row(name: str, **overrides: str) -> RowSpec:
        return RowSpec(name=name, overrides=tuple(sorted(overrides.items())))

    if suite == "b1":
        # Student-architecture grid: the teacher keeps the default variant;
        # every student iteration uses the row's (equal or larger) variant.
        # Students of a different architecture cannot be warm-started.
        def variant_row(name: str, variant: str) -> RowSpec:
            return row(name, **{
                "selftrain.student_variants": _student_variants(exp, variant),
                "selftrain.warm_start": "false",
            })

        return [
            variant_row("Maxout A", "maxout_a"),
            variant_row("ResNet A", "resnet_a"),
            variant_row("ResNet A with Maxout layer", "resnet_a_maxout"),
            variant_row("Maxout Local-Global Network", "maxout_local_global"),
        ]
    if suite == "b2":
        return [
            row("Hard labels", **{"selftrain.label_mode": "hard"}),
            row("Soft labels", **{"selftrain.label_mode": "soft"}),
        ]
    if suite == "b3":
        return [
            row("Maxout Local-Global Network w. warm-starting",
                **{"selftrain.warm_start": "true", "selftrain.student_variants": ""}),
            row("Maxout Local-Global Network w/o. warm-starting",
                **{"selftrain.warm_start": "false", "selftrain.student_variants": ""}),
        ]
    if suite == "b4":
        # Noise grid: linear-head teacher, default-variant students; noise
        # toggles peeled off one at a time, plus the noised-teacher row.
        student = exp["model.variant"]
        linear_teacher = {
            "model.variant": "local_global_linear",
            "selftrain.student_variants": _student_variants(exp, student),
            "selftrain.warm_start": "false",
        }
        return [
            row("Local-Global Network",
                **{"model.variant": "local_global_linear", "selftrain.iterations": "1",
                   "selftrain.student_variants": ""}),
            row("Noisy Student Training",
                **linear_teacher, **{"noise.augmentation": "true",
                                     "noise.stochastic_depth": "true",
                                     "noise.dropout": "true"}),
            row("student w/o. Aug",
                **linear_teacher, **{"noise.augmentation": "false",
                                     "noise.stochastic_depth": "true",
                                     "noise.dropout": "true"}),
            row("student w/o. Aug, w/o. SD",
                **linear_teacher, **{"noise.augmentation": "false",
                                     "noise.stochastic_depth": "false",
                                     "noise.dropout": "true"}),
            row("student w/o. Aug, w/o. SD, w/o. Dropout",
                **linear_teacher, **{"noise.augmentation": "false",
                                     "noise.stochastic_depth": "false",
                                     "noise.dropout": "false"}),
            row("teacher w. Aug, w. SD, w. Dropout",
                **linear_teacher, **{"noise.augmentation": "true",
                                     "noise.stochastic_depth": "true",
                                     "noise.dropout": "true",
                                     "noise.noised_teacher": "true"}),
        ]
    if suite == "b5":
        return [
            row("Local-Global Network", **{"model.variant": "local_global_linear"}),
            row("Maxout Local-Global Network", **{"model.variant": "maxout_local_global"}),
        ]
    # b6: no-mixup baseline plus the mixing-parameter sweep.
    rows = [row("Maxout Local-Global Network", **{"mixup.alpha": "none"})]
    for alpha in MIXUP_ALPHA_GRID:
        rendered = f"{alpha:g}"
        rows.append(row(f"alpha = {rendered}", **{"mixup.alpha": rendered}))
    return rows


def row_config(exp: ExperimentConfig, spec: RowSpec) -> ExperimentConfig:
    """The base configuration with one row's overrides applied."""
    base_raw = parse_config_text(exp.canonical_text())
    base_raw.update(dict(spec.overrides))
    return build_experiment_config(base_raw)


def run_suite(suite: str, exp: ExperimentConfig) -> AblationTable:
    """Execute one suite: every row trained on every configured seed."""
    suite = resolve_suite(suite)
    seeds = tuple(exp["ablate.seeds"])
    rows = []
    for spec in suite_specs(suite, exp):
        row_exp = row_config(exp, spec)
        aucs = tuple(run_ablation_row(row_exp, seed) for seed in seeds)
        rows.append(AblationRow(
            suite=suite,
            name=spec.name,
            seeds=seeds,
            aucs=aucs,
            mean_auc=float(np.mean(aucs)),
        ))
    return AblationTable(suite=suite, seeds=seeds, rows=rows)
