"""Desk-scale benchmark experiments: dataset assembly, the teacher/student
comparison used by the headline benchmark, and the per-row runner for
ablation suites.

The benchmark trains the expensive prefix (teacher + intermediate student)
once per seed and branches only the final iteration into its maxout,
linear-head, and mixup variants, so the three comparisons share every
upstream bit of work and randomness.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from nslgc.aggregate import PatientCase, noisy_or
from nslgc.config import ExperimentConfig
from nslgc.evaluate import roc_curve
from nslgc.mixup import MixupConfig
from nslgc.model import ModelState, build_model, clone_model, model_forward
from nslgc.preprocess import NoduleCrop, center_views
from nslgc.tensor import Tensor
from nslgc.selftrain import (
    SelfTrainConfig,
    TrainExample,
    _child_rng,
    _derived_model_seed,
    filter_confident,
    harden_labels,
    infer_pseudo_labels,
    self_train_loop,
    train_supervised,
)
from nslgc.synth import gen_labeled_dataset, gen_patient_cohort


def _derive(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence((seed, stream)).generate_state(1)[0])


@dataclass
class BenchmarkData:
    train_examples: list[TrainExample]
    val_examples: list[TrainExample]
    unlabeled_crops: list[NoduleCrop]
    test_cases: list[PatientCase]


def make_labeled_split(exp: ExperimentConfig, seed: int) -> tuple[list[TrainExample], list[TrainExample]]:
    """Rater-labeled nodules split into (train, validation) example lists."""
    labeled = gen_labeled_dataset(exp.synth_config(seed=_derive(seed, 0)))
    examples = [TrainExample(crop=n.crop, label=float(n.label)) for n in labeled.nodules]
    n_val = int(round(exp["eval.val_fraction"] * len(examples)))
    order = np.random.default_rng(np.random.PCG64(np.random.SeedSequence((seed, 3)))).permutation(len(examples))
    val_examples = [examples[i] for i in order[:n_val]]
    train_examples = [examples[i] for i in order[n_val:]]
    return train_examples, val_examples


def make_unlabeled_pool(exp: ExperimentConfig, seed: int) -> list[NoduleCrop]:
    """Every detected crop in the unlabeled cohort — nodules, vessels, and
    background alike, since a detector's output is not curated."""
    cohort = gen_patient_cohort(exp.synth_config(seed=_derive(seed, 1)))
    return [crop for case in cohort.cases for crop in case.crops]


def make_test_cases(exp: ExperimentConfig, seed: int) -> list[PatientCase]:
    """A labeled patient cohort reserved for final evaluation."""
    cohort = gen_patient_cohort(
        exp.synth_config(seed=_derive(seed, 2), n_patients=exp["synth.n_test_patients"])
    )
    return cohort.cases


def make_benchmark_data(exp: ExperimentConfig, seed: int) -> BenchmarkData:
    """Labeled train/val split, an unlabeled patient cohort, and a labeled test
    cohort, each drawn from its own derived seed so the three are independent."""
    train_examples, val_examples = make_labeled_split(exp, seed)
    return BenchmarkData(
        train_examples=train_examples,
        val_examples=val_examples,
        unlabeled_crops=make_unlabeled_pool(exp, seed),
        test_cases=make_test_cases(exp, seed),
    )


def patient_auc(model: ModelState, cases: list[PatientCase]) -> float:
    """Patient-level ROC AUC of noisy-or predictions over a labeled cohort.

    Case-by-case this is predict_patient; here all crops are forwarded in
    large batches (eval-mode outputs are row-independent), which is much
    faster on cohorts of hundreds of patients.
    """
    views = np.stack(
        [view for case in cases for crop in case.crops for view in center_views(crop.volume)]
    )[:, None, :, :]
    chunk = 288  # rows per forward; any multiple of the 3 views per crop
    probs = np.concatenate(
        [
            model_forward(model, Tensor(views[start : start + chunk]), mode="eval").data
            for start in range(0, views.shape[0], chunk)
        ]
    )
    crop_probs = probs.reshape(-1, 3).mean(axis=1)
    scores, labels, i = [], [], 0
    for case in cases:
        scores.append(noisy_or(crop_probs[i : i + len(case.crops)]))
        labels.append(case.label)
        i += len(case.crops)
    return float(roc_curve(np.array(scores), np.array(labels, dtype=np.int64)).auc)


def _student_examples(
    teacher: ModelState,
    config: SelfTrainConfig,
    labeled: list[TrainExample],
    unlabeled: list[NoduleCrop],
    seed: int,
    iteration: int,
) -> list[TrainExample]:
    """The labeled + confident pseudo-labeled example list a student at
    ``iteration`` would train on, bit-compatible with self_train_loop."""
    crop_by_id = {c.crop_id: c for c in unlabeled}
    pseudo = infer_pseudo_labels(
        teacher,
        unlabeled,
        config.noise.noised_teacher,
        rng=_child_rng(seed, iteration, 1),
        teacher_iteration=iteration - 1,
    )
    kept = filter_confident(pseudo, config.confidence_threshold)
    if config.label_mode == "hard":
        kept = harden_labels(kept)
    return list(labeled) + [TrainExample(crop=crop_by_id[e.crop_id], label=e.probability) for e in kept.entries]


def _final_student(
    teacher: ModelState,
    config: SelfTrainConfig,
    examples: list[TrainExample],
    variant: str,
    mixup: MixupConfig,
    seed: int,
    iteration: int,
) -> ModelState:
    """One extra student iteration on top of ``teacher``, bit-compatible with
    what self_train_loop would run at the same iteration index."""
    if config.warm_start:
        if variant != teacher.config.variant:
            raise ValueError("a warm-started final student must keep the teacher's variant")
        model = clone_model(teacher)
    else:
        model = build_model(
            replace(config.model, variant=variant, seed=_derived_model_seed(config.model.seed, iteration))
        )
    train_supervised(
        model,
        examples,
        config.train,
        config.noise,
        mixup,
        _child_rng(seed, iteration, 0),
        mixup_rng=_child_rng(seed, iteration, 2),
    )
    return model


@dataclass
class BenchmarkSeedResult:
    seed: int
    teacher_auc: float
    student_auc: float  # maxout head, no mixup
    linear_student_auc: float
    mixup_student_auc: float
    val_aucs: list[float | None]


@dataclass
class BenchmarkResult:
    seeds: tuple[int, ...]
    per_seed: list[BenchmarkSeedResult]
    mean_teacher_auc: float
    mean_student_auc: float
    mean_linear_student_auc: float
    mean_mixup_student_auc: float


def run_benchmark_seed(exp: ExperimentConfig, seed: int) -> BenchmarkSeedResult:
    """Teacher -> student prefix shared; final iteration branched three ways."""
    data = make_benchmark_data(exp, seed)
    iterations = int(exp["benchmark.iterations"])
    if iterations < 2:
        raise ValueError("benchmark.iterations must be >= 2 (teacher plus at least one student)")
    epochs = int(exp["benchmark.epochs"])
    if epochs < 1:
        raise ValueError("benchmark.epochs must be >= 1")
    base = replace(
        exp.selftrain_config(),
        iterations=iterations,
        train=replace(exp.train_config(), epochs=epochs),
    )
    model_config = replace(base.model, seed=seed)

    prefix_config = replace(
        base,
        model=model_config,
        iterations=max(1, iterations - 1),
        mixup=MixupConfig(alpha=None),
        student_variants=None,
    )
    prefix = self_train_loop(
        prefix_config, data.train_examples, data.unlabeled_crops, data.val_examples, seed=seed
    )
    teacher_auc = patient_auc(prefix.iterations[0].model, data.test_cases)
    last_teacher = prefix.final_model
    final_t = iterations - 1

    branch_config = replace(base, model=model_config)
    examples = _student_examples(
        last_teacher, branch_config, data.train_examples, data.unlabeled_crops, seed, final_t
    )

    def branch(variant: str, mixup: MixupConfig) -> ModelState:
        return _final_student(last_teacher, branch_config, examples, variant, mixup, seed, final_t)

    student = branch("maxout_local_global", MixupConfig(alpha=None))
    linear_student = branch("local_global_linear", MixupConfig(alpha=None))
    mixup_student = branch("maxout_local_global", MixupConfig(alpha=exp["benchmark.mixup_alpha"]))

    return BenchmarkSeedResult(
        seed=seed,
        teacher_auc=teacher_auc,
        student_auc=patient_auc(student, data.test_cases),
        linear_student_auc=patient_auc(linear_student, data.test_cases),
        mixup_student_auc=patient_auc(mixup_student, data.test_cases),
        val_aucs=[r.val_auc for r in prefix.iterations],
    )


def run_benchmark(exp: ExperimentConfig) -> BenchmarkResult:
    seeds = tuple(exp["benchmark.seeds"])
    per_seed = [run_benchmark_seed(exp, s) for s in seeds]
    return BenchmarkResult(
        seeds=seeds,
        per_seed=per_seed,
        mean_teacher_auc=float(np.mean([r.teacher_auc for r in per_seed])),
        mean_student_auc=float(np.mean([r.student_auc for r in per_seed])),
        mean_linear_student_auc=float(np.mean([r.linear_student_auc for r in per_seed])),
        mean_mixup_student_auc=float(np.mean([r.mixup_student_auc for r in per_seed])),
    )


def run_ablation_row(exp: ExperimentConfig, seed: int) -> float:
    """Full self-training pipeline on the benchmark datasets; returns the
    final model's patient-level test AUC."""
    data = make_benchmark_data(exp, seed)
    config = replace(exp.selftrain_config(), model=replace(exp.model_config(), seed=seed))
    result = self_train_loop(config, data.train_examples, data.unlabeled_crops, data.val_examples, seed=seed)
    return patient_auc(result.final_model, data.test_cases)
