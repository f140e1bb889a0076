"""Synthetic nodule benchmark: labeled crops via simulated rater medians,
and patient cohorts with hidden per-nodule truth.

Benign nodules are smooth radial blobs; malignant nodules perturb the
boundary radius sinusoidally in angle (a spiculation surrogate) and add
high-frequency internal texture. Two malignant sub-modes (boundary-driven
and texture-driven) create the intra-class variation a multi-piece head
can exploit. The ``difficulty`` knob shrinks malignant feature strength
while leaking the same features into benign crops, so class overlap grows
continuously from separable (0) to heavy (1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from nslgc.aggregate import PatientCase, select_top_k
from nslgc.preprocess import NoduleCrop

COHORT_STRATA = ("benign_nodule", "abnormal_no_cancer", "normal", "cancer")
DEFAULT_STRATA_WEIGHTS = (500, 500, 402, 603)
BENIGN_RATER_DIST = (0.2, 0.5, 0.2, 0.1, 0.0)  # scores 1..5
MALIGNANT_RATER_DIST = tuple(reversed(BENIGN_RATER_DIST))


@dataclass
class SynthConfig:
    n_labeled_nodules: int = 200
    n_patients: int = 400
    nodules_per_patient: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)  # P(k=1..5)
    difficulty: float = 0.5
    crop_size: int = 16
    seed: int = 0
    strata_weights: tuple[float, float, float, float] = DEFAULT_STRATA_WEIGHTS

    def __post_init__(self):
        if self.n_labeled_nodules < 1 or self.n_patients < 1:
            raise ValueError("all counts must be positive")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ValueError(f"difficulty must lie in [0, 1], got {self.difficulty}")
        if self.crop_size < 8:
            raise ValueError(f"crop_size must be >= 8, got {self.crop_size}")
        if len(self.nodules_per_patient) != 5 or abs(sum(self.nodules_per_patient) - 1.0) > 1e-9:
            raise ValueError("nodules_per_patient must be 5 probabilities summing to 1")
        if len(self.strata_weights) != 4 or min(self.strata_weights) < 0:
            raise ValueError("strata_weights must be 4 nonnegative weights")


@dataclass
class LabeledNodule:
    crop: NoduleCrop
    label: int  # rater-derived, not the hidden generator class
    rater_scores: tuple[int, int, int, int]
    true_class: int  # diagnostics only


@dataclass
class LabeledDataset:
    nodules: list[LabeledNodule]
    n_excluded: int


@dataclass
class PatientCohort:
    cases: list[PatientCase]
    nodule_truths: dict[str, int] = field(default_factory=dict)  # crop id -> hidden class
    strata: dict[str, str] = field(default_factory=dict)  # patient id -> stratum


# ---------------------------------------------------------------------------
# Volume generators
# ---------------------------------------------------------------------------


def _smooth3(volume: np.ndarray, sigma: float) -> np.ndarray:
    """Separable 3-D Gaussian smoothing with reflected borders."""
    r = max(1, math.ceil(3.0 * sigma))
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k /= k.sum()
    out = volume
    for axis in range(3):
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        win = np.lib.stride_tricks.sliding_window_view(np.pad(out, pad, mode="reflect"), 2 * r + 1, axis=axis)
        out = win @ k
    return out


def _parenchyma(size: int, rng: np.random.Generator) -> np.ndarray:
    """Mildly textured lung background around intensity 0.1."""
    coarse = _smooth3(rng.normal(0.0, 1.0, size=(size,) * 3), sigma=1.5)
    coarse /= max(coarse.std(), 1e-12)
    fine = rng.normal(0.0, 1.0, size=(size,) * 3)
    return np.clip(0.10 + 0.03 * coarse + 0.015 * fine, 0.0, 1.0)


def gen_nodule_volume(
    true_class: int, difficulty: float, rng: np.random.Generator, size: int = 16, crop_id: str = ""
) -> NoduleCrop:
    """One synthetic nodule crop; ``true_class`` 1 = malignant.

    Malignant feature strength fades with difficulty while benign crops
    pick up a growing share of the same features, so the classes overlap
    more and more. Malignant crops split between a spiculation-dominant
    and a texture-dominant sub-mode.
    """
    if true_class not in (0, 1):
        raise ValueError(f"true_class must be 0 or 1, got {true_class}")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must lie in [0, 1], got {difficulty}")

    grid = np.arange(size, dtype=np.float64)
    center = (size - 1) / 2.0 + rng.uniform(-0.7, 0.7, size=3)
    zz, yy, xx = np.meshgrid(grid - center[0], grid - center[1], grid - center[2], indexing="ij")
    dist_sq = zz**2 + yy**2 + xx**2
    r = np.sqrt(dist_sq)
    azimuth = np.arctan2(yy, xx)
    polar = np.arccos(np.clip(zz / np.maximum(r, 1e-9), -1.0, 1.0))

    base_radius = rng.uniform(2.6, 4.8) * size / 16.0
    strength = 1.0 - 0.9 * difficulty  # malignant features fade as difficulty grows
    # Benign crops pick up a growing share of the same features, capped at the
    # malignant level so heavy overlap saturates at chance rather than inverting.
    leak = min(0.7 * difficulty, strength)

    # Shape nuisance shared by both classes: brightness varies widely and the
    # body may be stretched along a random axis. Benign crops span the full
    # faint-to-bright and round-to-elongated range, so structureless or
    # vessel-like appearances sit inside the benign manifold; malignancy is
    # carried only by boundary spiculation and interior texture.
    axis = rng.normal(0.0, 1.0, size=3)
    axis /= np.linalg.norm(axis)
    if true_class == 1:
        elongation = rng.uniform(1.0, 1.35)
        amplitude = rng.uniform(0.46, 0.72)
        edge_width = 0.50 - 0.20 * strength  # spiculated margins are sharper
        if rng.random() < 0.5:  # spiculation-dominant mode
            spic_amp = 0.34 * strength * rng.uniform(0.85, 1.15)
            tex_amp = 0.09 * strength * rng.uniform(0.7, 1.0)
        else:  # texture-dominant mode
            spic_amp = 0.16 * strength * rng.uniform(0.85, 1.15)
            tex_amp = 0.20 * strength * rng.uniform(0.85, 1.15)
    else:
        elongation = rng.uniform(1.0, 2.0)
        amplitude = rng.uniform(0.34, 0.72)
        edge_width = 0.62 - 0.26 * leak * rng.uniform(0.0, 1.0)
        spic_amp = 0.34 * leak * rng.uniform(0.0, 1.0)
        tex_amp = 0.20 * leak * rng.uniform(0.0, 1.0)

    along = zz * axis[0] + yy * axis[1] + xx * axis[2]
    r_shape = np.sqrt(dist_sq + (1.0 / elongation**2 - 1.0) * along**2)

    lobes_az = rng.integers(3, 6)
    lobes_pol = rng.integers(2, 5)
    phase_az = rng.uniform(0.0, 2.0 * math.pi)
    phase_pol = rng.uniform(0.0, 2.0 * math.pi)
    boundary = base_radius * (
        1.0 + spic_amp * np.sin(lobes_az * azimuth + phase_az) * np.sin(lobes_pol * polar + phase_pol)
    )

    support = 1.0 / (1.0 + np.exp(-(boundary - r_shape) / edge_width))  # soft interior mask
    nodule = amplitude * support

    texture = _smooth3(rng.normal(0.0, 1.0, size=(size,) * 3), sigma=0.7)
    texture /= max(texture.std(), 1e-12)
    nodule = nodule + tex_amp * texture * support

    volume = np.clip(np.maximum(_parenchyma(size, rng), nodule), 0.0, 1.0)
    return NoduleCrop(crop_id=crop_id, volume=volume)


def gen_clutter_volume(rng: np.random.Generator, size: int = 16, crop_id: str = "") -> NoduleCrop:
    """A vessel-like tube through the crop: abnormal but not a nodule."""
    grid = np.arange(size, dtype=np.float64)
    center = (size - 1) / 2.0 + rng.uniform(-1.0, 1.0, size=3)
    direction = rng.normal(0.0, 1.0, size=3)
    direction /= np.linalg.norm(direction)
    zz, yy, xx = np.meshgrid(grid - center[0], grid - center[1], grid - center[2], indexing="ij")
    pts = np.stack([zz, yy, xx], axis=-1)
    along = pts @ direction
    dist_sq = np.sum(pts**2, axis=-1) - along**2
    dist = np.sqrt(np.maximum(dist_sq, 0.0))
    radius = rng.uniform(1.0, 1.7) * size / 16.0
    amplitude = rng.uniform(0.38, 0.55)
    tube = amplitude / (1.0 + np.exp(-(radius - dist) / 0.5))
    volume = np.clip(np.maximum(_parenchyma(size, rng), tube), 0.0, 1.0)
    return NoduleCrop(crop_id=crop_id, volume=volume)


def gen_background_volume(rng: np.random.Generator, size: int = 16, crop_id: str = "") -> NoduleCrop:
    """Plain parenchyma: what a detector's false alarm on normal lung looks like."""
    return NoduleCrop(crop_id=crop_id, volume=_parenchyma(size, rng))


# ---------------------------------------------------------------------------
# Rater simulation
# ---------------------------------------------------------------------------


def gen_rater_scores(true_class: int, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Four independent 1..5 ratings from the class-conditional distribution."""
    dist = MALIGNANT_RATER_DIST if true_class == 1 else BENIGN_RATER_DIST
    draws = rng.choice(np.arange(1, 6), size=4, p=dist)
    return tuple(int(d) for d in draws)


def aggregate_rater_median(scores: tuple[int, int, int, int]) -> int | None:
    """Median of four scores (mean of the middle two): <3 -> 0, >3 -> 1, ==3 -> None (excluded)."""
    if len(scores) != 4 or any(not 1 <= s <= 5 for s in scores):
        raise ValueError(f"rater scores must be four integers in 1..5, got {scores}")
    mid = sorted(scores)[1:3]
    median = (mid[0] + mid[1]) / 2.0
    if median < 3.0:
        return 0
    if median > 3.0:
        return 1
    return None


# ---------------------------------------------------------------------------
# Dataset and cohort assembly
# ---------------------------------------------------------------------------


def gen_labeled_dataset(config: SynthConfig) -> LabeledDataset:
    """Balanced benign/malignant draws, labeled by rater median, median-3 excluded."""
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    nodules: list[LabeledNodule] = []
    n_excluded = 0
    for i in range(config.n_labeled_nodules):
        true_class = i % 2  # balanced before exclusion
        crop = gen_nodule_volume(true_class, config.difficulty, rng, config.crop_size, crop_id=f"L{i:05d}")
        crop.patient_id = f"LP{i:05d}"
        scores = gen_rater_scores(true_class, rng)
        label = aggregate_rater_median(scores)
        if label is None:
            n_excluded += 1
            continue
        nodules.append(LabeledNodule(crop=crop, label=label, rater_scores=scores, true_class=true_class))
    return LabeledDataset(nodules=nodules, n_excluded=n_excluded)


def _stratum_counts(n_patients: int, weights) -> list[int]:
    """Largest-remainder apportionment so the mix matches the weights exactly."""
    total = float(sum(weights))
    quotas = [n_patients * w / total for w in weights]
    counts = [int(math.floor(q)) for q in quotas]
    remainder = n_patients - sum(counts)
    order = sorted(range(len(weights)), key=lambda i: quotas[i] - counts[i], reverse=True)
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def gen_patient_cohort(config: SynthConfig) -> PatientCohort:
    """Patient cases across the four strata, with per-crop detection scores.

    Cancer patients hold at least one malignant nodule; every other stratum
    is malignancy-free, so the patient label equals the noisy-or of the
    hidden per-nodule truths. Crops are ranked by detection score.
    """
    rng = np.random.default_rng(np.random.PCG64((config.seed, 1)))
    counts = _stratum_counts(config.n_patients, config.strata_weights)
    ks = np.arange(1, 6)

    cases: list[PatientCase] = []
    truths: dict[str, int] = {}
    strata: dict[str, str] = {}
    pid = 0
    for stratum, count in zip(COHORT_STRATA, counts):
        for _ in range(count):
            patient_id = f"P{pid:05d}"
            pid += 1
            k = int(rng.choice(ks, p=config.nodules_per_patient))
            crop_classes: list[tuple[str, int]] = []  # (kind, true_class)
            if stratum == "benign_nodule":
                crop_classes = [("nodule", 0)] * k
            elif stratum == "abnormal_no_cancer":
                crop_classes = [("clutter", 0)] * k
            elif stratum == "normal":
                crop_classes = [("background", 0)] * k
            else:  # cancer
                n_mal = 1 + int(rng.binomial(k - 1, 0.35))
                crop_classes = [("nodule", 1)] * n_mal + [("nodule", 0)] * (k - n_mal)

            detections = []
            for j, (kind, true_class) in enumerate(crop_classes):
                crop_id = f"{patient_id}-c{j}"
                if kind == "nodule":
                    crop = gen_nodule_volume(true_class, config.difficulty, rng, config.crop_size, crop_id)
                    score = rng.uniform(0.55, 0.95)
                elif kind == "clutter":
                    crop = gen_clutter_volume(rng, config.crop_size, crop_id)
                    score = rng.uniform(0.35, 0.75)
                else:
                    crop = gen_background_volume(rng, config.crop_size, crop_id)
                    score = rng.uniform(0.05, 0.45)
                crop.patient_id = patient_id
                detections.append((float(score), crop))
                truths[crop_id] = true_class

            ranked = select_top_k(detections)
            for rank, crop in enumerate(ranked):
                crop.detection_rank = rank
            label = 1 if stratum == "cancer" else 0
            cases.append(PatientCase(patient_id=patient_id, crops=ranked, label=label))
            strata[patient_id] = stratum
    return PatientCohort(cases=cases, nodule_truths=truths, strata=strata)
