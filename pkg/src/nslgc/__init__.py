"""Noisy-student self-training pipeline for nodule-patch classification.

Everything runs on a small float64 autodiff engine (`nslgc.tensor`);
the network blocks, self-training loop, evaluation statistics, and the
synthetic benchmark are built on top of it with no framework deps.
"""

__version__ = "0.1.0"

from nslgc.tensor import Tensor, Tape, backward  # noqa: F401
