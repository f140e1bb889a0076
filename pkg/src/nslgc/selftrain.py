"""Iterative teacher/student self-training with pseudo-labels and noise.

The loop: train a teacher on labeled crops, infer soft labels on unlabeled
crops, keep the confident ones, then train a (possibly noised, possibly
larger) student on labeled + pseudo-labeled data; the student becomes the
next teacher. Mixup can be layered onto the final iteration.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from nslgc.mixup import MixupConfig, mixup_batch
from nslgc.model import ModelConfig, ModelState, VARIANTS, build_model, clone_model, model_forward, predict_nodule
from nslgc.preprocess import NoduleCrop, center_views, training_patches
from nslgc.tensor import SgdConfig, Tape, Tensor, backward, bce_loss, sgd_step

LABEL_MODES = ("soft", "hard")
MIXUP_STAGES = ("final", "all")


@dataclass
class NoiseToggles:
    """Which noise sources are active during student training and inference."""

    augmentation: bool = False
    stochastic_depth: bool = False
    dropout: bool = True
    noised_teacher: bool = False


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    sgd: SgdConfig = field(default_factory=SgdConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")


@dataclass
class SelfTrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    iterations: int = 3
    label_mode: str = "soft"
    confidence_threshold: float = 0.3  # keep pseudo labels with |p - 0.5| >= threshold
    warm_start: bool = False  # student starts from the teacher's parameters
    student_variants: tuple[str, ...] | None = None  # one per student iteration
    mixup: MixupConfig = field(default_factory=lambda: MixupConfig(alpha=None))
    mixup_stage: str = "final"
    noise: NoiseToggles = field(default_factory=NoiseToggles)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        if not 0.0 <= self.confidence_threshold < 0.5:
            raise ValueError(f"confidence_threshold must lie in [0, 0.5), got {self.confidence_threshold}")
        if self.mixup_stage not in MIXUP_STAGES:
            raise ValueError(f"mixup_stage must be one of {MIXUP_STAGES}, got {self.mixup_stage!r}")
        if self.student_variants is not None:
            if len(self.student_variants) != self.iterations - 1:
                raise ValueError(
                    f"student_variants needs {self.iterations - 1} entries (one per student iteration), "
                    f"got {len(self.student_variants)}"
                )
            for v in self.student_variants:
                if v not in VARIANTS:
                    raise ValueError(f"unknown student variant {v!r}")
            if self.warm_start and any(v != self.model.variant for v in self.student_variants):
                raise ValueError("warm_start students inherit the teacher's parameters; variants must match")

    def student_variant_at(self, iteration: int) -> str:
        if self.student_variants is None:
            return self.model.variant
        return self.student_variants[iteration - 1]


@dataclass
class TrainExample:
    """A crop paired with its (possibly soft) target in [0, 1]."""

    crop: NoduleCrop
    label: float

    def __post_init__(self):
        self.label = float(self.label)
        if not 0.0 <= self.label <= 1.0:
            raise ValueError(f"label must lie in [0, 1], got {self.label}")


@dataclass
class PseudoLabel:
    crop_id: str
    probability: float
    confidence: float  # |p - 0.5| * 2
    teacher_iteration: int


@dataclass
class PseudoLabeledSet:
    entries: list[PseudoLabel]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class IterationRecord:
    iteration: int
    variant: str
    n_pseudo_total: int
    n_pseudo_kept: int
    empty_pseudo_warning: bool
    loss_trace: list[float]
    val_auc: float | None
    init_param_hash: str
    param_hash: str
    model: ModelState
    teacher: ModelState | None  # the exact object that produced this iteration's pseudo labels


@dataclass
class SelfTrainResult:
    final_model: ModelState
    iterations: list[IterationRecord]


def _child_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.PCG64(np.random.SeedSequence((seed, *key))))


def _derived_model_seed(base: int, iteration: int) -> int:
    return int(np.random.SeedSequence((base, iteration)).generate_state(1)[0])


def params_hash(state: ModelState) -> str:
    """SHA-256 over all parameter bytes in traversal order (bit-exact identity)."""
    digest = hashlib.sha256()
    for name, p in state.parameters():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(p.data).tobytes())
    for name, buf in state.bn_buffers():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(buf).tobytes())
    return digest.hexdigest()


def train_supervised(
    model: ModelState,
    examples: list[TrainExample],
    train_config: TrainConfig,
    noise: NoiseToggles,
    mixup_config: MixupConfig,
    rng: np.random.Generator,
    mixup_rng: np.random.Generator | None = None,
) -> tuple[ModelState, list[float]]:
    """SGD over shuffled view batches; mutates ``model`` in place.

    With the augmentation toggle on, each epoch draws a fresh set of 27
    augmented patches per crop; off, the three plain center views are reused.
    Mixup draws come from ``mixup_rng`` (falling back to ``rng``), so two
    otherwise-identical runs that differ only in the mixup toggle still share
    the same data order and dropout masks. Returns the model and the
    per-epoch mean training loss. A trailing batch of a single view is
    skipped (batch statistics need at least two rows).
    """
    if not examples:
        raise ValueError("train_supervised: empty example list")
    crops = [e.crop for e in examples]
    labels = np.array([e.label for e in examples], dtype=np.float64)
    params = model.parameters()
    mix_rng = mixup_rng if mixup_rng is not None else rng

    plain_patches = None
    if not noise.augmentation:
        plain_patches = training_patches(crops, augment=False)

    trace: list[float] = []
    for _ in range(train_config.epochs):
        if noise.augmentation:
            patches, owners = training_patches(crops, augment=True, rng=rng)
        else:
            patches, owners = plain_patches
        targets = labels[owners]
        order = rng.permutation(len(owners))
        batch_losses = []
        for start in range(0, len(order), train_config.batch_size):
            idx = order[start : start + train_config.batch_size]
            if idx.size < 2:
                continue
            xb, yb, _, _ = mixup_batch(patches[idx], targets[idx], mixup_config, mix_rng)
            with Tape() as tape:
                probs = model_forward(
                    model,
                    Tensor(xb),
                    mode="train",
                    rng=rng,
                    dropout_enabled=noise.dropout,
                    stochastic_depth_enabled=noise.stochastic_depth,
                    update_bn_stats=True,
                )
                loss = bce_loss(probs, yb)
                backward(loss, tape)
            sgd_step(params, train_config.sgd, model.epoch)
            batch_losses.append(float(loss.data))
        model.epoch += 1
        trace.append(float(np.mean(batch_losses)))
    return model, trace


def infer_pseudo_labels(
    teacher: ModelState,
    unlabeled_crops: list[NoduleCrop],
    noised_teacher: bool,
    rng: np.random.Generator | None = None,
    teacher_iteration: int = 0,
) -> PseudoLabeledSet:
    """Soft labels for every crop; un-noised runs eval mode (deterministic),
    noised runs a train-mode forward with dropout and stochastic depth live
    (running statistics left untouched)."""
    if noised_teacher and rng is None:
        raise ValueError("noised teacher inference requires an rng")
    entries = []
    for crop in unlabeled_crops:
        if noised_teacher:
            views = center_views(crop.volume)[:, None, :, :]
            probs = model_forward(teacher, Tensor(views), mode="train", rng=rng, update_bn_stats=False)
            p = float(probs.data.mean())
        else:
            p = predict_nodule(teacher, crop.volume)
        entries.append(
            PseudoLabel(
                crop_id=crop.crop_id,
                probability=p,
                confidence=abs(p - 0.5) * 2.0,
                teacher_iteration=teacher_iteration,
            )
        )
    return PseudoLabeledSet(entries=entries)


def filter_confident(pseudo: PseudoLabeledSet, threshold: float) -> PseudoLabeledSet:
    """Keep entries with |p - 0.5| >= threshold, preserving order."""
    if not 0.0 <= threshold < 0.5:
        raise ValueError(f"confidence threshold must lie in [0, 0.5), got {threshold}")
    return PseudoLabeledSet(entries=[e for e in pseudo.entries if abs(e.probability - 0.5) >= threshold])


def harden_labels(pseudo: PseudoLabeledSet) -> PseudoLabeledSet:
    """Round soft labels: p >= 0.5 -> 1, else 0 (confidence becomes 1)."""
    return PseudoLabeledSet(
        entries=[
            PseudoLabel(
                crop_id=e.crop_id,
                probability=1.0 if e.probability >= 0.5 else 0.0,
                confidence=1.0,
                teacher_iteration=e.teacher_iteration,
            )
            for e in pseudo.entries
        ]
    )


def _validation_auc(model: ModelState, val_examples: list[TrainExample]) -> float | None:
    from nslgc.evaluate import roc_curve  # local import: avoid cycle at module load

    labels = np.array([int(round(e.label)) for e in val_examples], dtype=np.int64)
    if labels.min() == labels.max():
        return None  # single-class validation split: AUC undefined
    scores = np.array([predict_nodule(model, e.crop.volume) for e in val_examples])
    return float(roc_curve(scores, labels).auc)


def self_train_loop(
    config: SelfTrainConfig,
    labeled: list[TrainExample],
    unlabeled: list[NoduleCrop],
    val_examples: list[TrainExample] | None = None,
    seed: int = 0,
) -> SelfTrainResult:
    """Run ``config.iterations`` rounds of teacher -> pseudo-label -> student.

    Iteration 0 trains the teacher on labeled data only. Each later iteration
    infers pseudo labels with the current teacher, filters them by confidence
    (hardening them in hard mode), and trains a student on labeled + kept
    pseudo-labeled crops; that student object becomes the next teacher. An
    empty filtered pseudo set warns and falls back to labeled-only training
    for that iteration. The whole run is a pure function of (config, data,
    seed).
    """
    if not labeled:
        raise ValueError("self_train_loop: empty labeled set")
    if not unlabeled:
        raise ValueError("self_train_loop: empty unlabeled set")
    crop_by_id = {c.crop_id: c for c in unlabeled}
    if len(crop_by_id) != len(unlabeled):
        raise ValueError("unlabeled crop ids must be unique")

    records: list[IterationRecord] = []
    teacher: ModelState | None = None
    for t in range(config.iterations):
        final_iteration = t == config.iterations - 1
        if t == 0:
            variant = config.model.variant
            model = build_model(config.model)
            examples = list(labeled)
            teacher_ref = None
            n_total = n_kept = 0
            warned = False
        else:
            variant = config.student_variant_at(t)
            infer_rng = _child_rng(seed, t, 1)
            pseudo = infer_pseudo_labels(
                teacher, unlabeled, config.noise.noised_teacher, rng=infer_rng, teacher_iteration=t - 1
            )
            kept = filter_confident(pseudo, config.confidence_threshold)
            if config.label_mode == "hard":
                kept = harden_labels(kept)
            n_total, n_kept = len(pseudo), len(kept)
            warned = n_kept == 0
            if warned:
                warnings.warn(
                    f"iteration {t}: no pseudo labels passed the confidence threshold; "
                    "training on labeled data only",
                    stacklevel=2,
                )
            if config.warm_start:
                model = clone_model(teacher)
            else:
                model = build_model(
                    replace(config.model, variant=variant, seed=_derived_model_seed(config.model.seed, t))
                )
            pseudo_examples = [TrainExample(crop=crop_by_id[e.crop_id], label=e.probability) for e in kept.entries]
            examples = list(labeled) + pseudo_examples
            teacher_ref = teacher

        mixup_cfg = config.mixup if (config.mixup_stage == "all" or final_iteration) else MixupConfig(alpha=None)
        init_hash = params_hash(model)
        train_rng = _child_rng(seed, t, 0)
        _, trace = train_supervised(
            model, examples, config.train, config.noise, mixup_cfg, train_rng, mixup_rng=_child_rng(seed, t, 2)
        )
        val_auc = _validation_auc(model, val_examples) if val_examples else None
        records.append(
            IterationRecord(
                iteration=t,
                variant=variant,
                n_pseudo_total=n_total,
                n_pseudo_kept=n_kept,
                empty_pseudo_warning=warned,
                loss_trace=trace,
                val_auc=val_auc,
                init_param_hash=init_hash,
                param_hash=params_hash(model),
                model=model,
                teacher=teacher_ref,
            )
        )
        teacher = model
    return SelfTrainResult(final_model=teacher, iterations=records)


def kfold_split(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Deterministic shuffled partition of range(n) into k folds, sizes within 1."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"cannot split {n} items into {k} folds")
    order = np.random.default_rng(np.random.PCG64(seed)).permutation(n)
    return [np.sort(fold) for fold in np.array_split(order, k)]
