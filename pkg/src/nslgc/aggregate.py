"""Patient-level aggregation: top-k detections and the noisy-or rule.

A patient is malignant if at least one nodule is malignant, so the patient
probability combines per-nodule probabilities as
P = 1 - prod_i (1 - P_i), treating nodules as independent detectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from nslgc.model import ModelState, predict_nodule
from nslgc.preprocess import NoduleCrop

MAX_NODULES_PER_PATIENT = 5
LOG_SPACE_THRESHOLD = 0.999


@dataclass
class PatientCase:
    """Up to five nodule crops ranked by detection score, plus the known label."""

    patient_id: str
    crops: list[NoduleCrop]
    label: int | None = None

    def __post_init__(self):
        if len(self.crops) > MAX_NODULES_PER_PATIENT:
            raise ValueError(
                f"patient {self.patient_id!r} has {len(self.crops)} crops; max is {MAX_NODULES_PER_PATIENT}"
            )
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"patient label must be 0 or 1, got {self.label}")


@dataclass
class PatientPrediction:
    patient_id: str
    probability: float
    nodule_probabilities: list[float] = field(default_factory=list)


def select_top_k(
    detections: list[tuple[float, NoduleCrop]], k: int = MAX_NODULES_PER_PATIENT
) -> list[NoduleCrop]:
    """Keep the k highest-scoring detections, ties broken by original order."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranked = sorted(range(len(detections)), key=lambda i: (-detections[i][0], i))
    return [detections[i][1] for i in ranked[:k]]


def noisy_or(probabilities) -> float:
    """P = 1 - prod_i (1 - P_i); switches to log-space when any P_i > 0.999.

    The log-space branch computes 1 - exp(sum log1p(-P_i)), which stays
    accurate when a near-one factor would underflow the direct product.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("noisy_or needs a non-empty 1-D probability list")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("noisy_or probabilities must lie in [0, 1]")
    if np.any(p > LOG_SPACE_THRESHOLD):
        if np.any(p == 1.0):
            return 1.0
        return float(1.0 - np.exp(np.log1p(-p).sum()))
    return float(1.0 - np.prod(1.0 - p))


def predict_patient(state: ModelState, case: PatientCase) -> PatientPrediction:
    """Noisy-or over the per-nodule probabilities of every crop in the case."""
    if not case.crops:
        raise ValueError(f"patient {case.patient_id!r} has no crops to aggregate")
    nodule_probs = [predict_nodule(state, crop.volume) for crop in case.crops]
    return PatientPrediction(
        patient_id=case.patient_id,
        probability=noisy_or(nodule_probs),
        nodule_probabilities=nodule_probs,
    )
