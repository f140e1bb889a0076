"""Crop normalization, orthogonal view extraction, and the 27-patch augmentation.

A nodule is stored as a normalized [S, S, S] cube. Training consumes 2-D
patches: the three orthogonal center slices, optionally expanded to 27
augmented patches (per view: three random rotations, three rotations plus
Gaussian noise, three rotations plus Gaussian blur at increasing scales).
Every augmented patch carries a descriptor that, together with the crop,
reproduces it exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NOISE_SIGMA = 0.05
BLUR_SIGMAS = (0.5, 1.0, 1.5)


@dataclass
class NoduleCrop:
    """A detection-sized cube cut around one nodule candidate."""

    crop_id: str
    volume: np.ndarray  # [S, S, S], float64, values in [0, 1]
    patient_id: str = ""
    detection_rank: int = 0

    def __post_init__(self):
        v = np.asarray(self.volume, dtype=np.float64)
        if v.ndim != 3 or len(set(v.shape)) != 1:
            raise ValueError(f"crop volume must be a cube, got shape {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError(f"crop {self.crop_id!r} is not normalized to [0, 1]")
        self.volume = v


@dataclass
class AugmentDescriptor:
    """Everything needed to regenerate one patch from its crop."""

    view_axis: int  # 0 axial, 1 coronal, 2 sagittal
    kind: str  # rotate | rotate_noise | rotate_blur | plain
    angle_deg: float = 0.0
    noise_sigma: float | None = None
    noise_seed: int | None = None
    blur_sigma: float | None = None


@dataclass
class ViewPatch:
    patch: np.ndarray  # [S, S]
    descriptor: AugmentDescriptor


def clip_normalize(volume_hu: np.ndarray, lo: float = -1000.0, hi: float = 400.0) -> np.ndarray:
    """Clip raw intensities to [lo, hi] and map linearly onto [0, 1]."""
    if lo >= hi:
        raise ValueError(f"clip window must satisfy lo < hi, got [{lo}, {hi}]")
    v = np.asarray(volume_hu, dtype=np.float64)
    return (np.clip(v, lo, hi) - lo) / (hi - lo)


def center_views(volume: np.ndarray) -> np.ndarray:
    """The three orthogonal slices through the center voxel, stacked [3, S, S].

    Axial, coronal, sagittal planes at index floor(S/2).
    """
    if volume.ndim != 3 or len(set(volume.shape)) != 1:
        raise ValueError(f"volume must be a cube, got shape {volume.shape}")
    m = volume.shape[0] // 2
    return np.stack([volume[m, :, :], volume[:, m, :], volume[:, :, m]]).astype(np.float64)


def rotate_patch(patch: np.ndarray, angle_deg: float, fill: float = 0.0) -> np.ndarray:
    """Rotate about the patch center with bilinear resampling; out-of-bounds -> fill."""
    s = patch.shape[0]
    if patch.ndim != 2 or patch.shape[1] != s:
        raise ValueError(f"patch must be square, got shape {patch.shape}")
    c = (s - 1) / 2.0
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    yy, xx = np.meshgrid(np.arange(s, dtype=np.float64), np.arange(s, dtype=np.float64), indexing="ij")
    dy, dx = yy - c, xx - c
    # Sample the source at the inverse rotation of each output pixel.
    sx = c + cos_t * dx + sin_t * dy
    sy = c - sin_t * dx + cos_t * dy
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    wx = sx - x0
    wy = sy - y0

    def sample(yi, xi):
        inside = (yi >= 0) & (yi < s) & (xi >= 0) & (xi < s)
        return np.where(inside, patch[np.clip(yi, 0, s - 1), np.clip(xi, 0, s - 1)], fill)

    return (
        sample(y0, x0) * (1.0 - wy) * (1.0 - wx)
        + sample(y0, x0 + 1) * (1.0 - wy) * wx
        + sample(y0 + 1, x0) * wy * (1.0 - wx)
        + sample(y0 + 1, x0 + 1) * wy * wx
    )


def gaussian_blur(patch: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with a 3-sigma kernel and reflected borders."""
    if sigma <= 0.0:
        raise ValueError(f"blur sigma must be positive, got {sigma}")
    r = max(1, math.ceil(3.0 * sigma))
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k /= k.sum()
    win = np.lib.stride_tricks.sliding_window_view(np.pad(patch, ((r, r), (0, 0)), mode="reflect"), 2 * r + 1, axis=0)
    tmp = win @ k
    win = np.lib.stride_tricks.sliding_window_view(np.pad(tmp, ((0, 0), (r, r)), mode="reflect"), 2 * r + 1, axis=1)
    return win @ k


def add_gaussian_noise(patch: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    return patch + np.random.default_rng(seed).normal(0.0, sigma, size=patch.shape)


def regenerate_patch(crop: NoduleCrop, desc: AugmentDescriptor) -> np.ndarray:
    """Rebuild the exact patch an AugmentDescriptor describes."""
    base = center_views(crop.volume)[desc.view_axis]
    if desc.kind == "plain":
        return base
    patch = rotate_patch(base, desc.angle_deg)
    if desc.kind == "rotate_noise":
        patch = add_gaussian_noise(patch, desc.noise_sigma, desc.noise_seed)
    elif desc.kind == "rotate_blur":
        patch = gaussian_blur(patch, desc.blur_sigma)
    elif desc.kind != "rotate":
        raise ValueError(f"unknown augment kind {desc.kind!r}")
    return np.clip(patch, 0.0, 1.0)


def augment_27(
    crop: NoduleCrop,
    rng: np.random.Generator,
    noise_sigma: float = NOISE_SIGMA,
    blur_sigmas: tuple[float, float, float] = BLUR_SIGMAS,
) -> list[ViewPatch]:
    """27 augmented patches: per view, 3 rotations, 3 noisy rotations, 3 blurred rotations.

    Rotation angles are drawn fresh per patch from [-180, 180); noise uses a
    child seed recorded in the descriptor; blur scales follow ``blur_sigmas``
    in order. Every patch is clamped back to [0, 1].
    """
    views = center_views(crop.volume)
    patches: list[ViewPatch] = []
    for axis in range(3):
        base = views[axis]
        for kind in ("rotate", "rotate_noise", "rotate_blur"):
            for j in range(3):
                angle = float(rng.uniform(-180.0, 180.0))
                desc = AugmentDescriptor(view_axis=axis, kind=kind, angle_deg=angle)
                patch = rotate_patch(base, angle)
                if kind == "rotate_noise":
                    desc.noise_sigma = noise_sigma
                    desc.noise_seed = int(rng.integers(0, 2**31 - 1))
                    patch = add_gaussian_noise(patch, noise_sigma, desc.noise_seed)
                elif kind == "rotate_blur":
                    desc.blur_sigma = blur_sigmas[j]
                    patch = gaussian_blur(patch, blur_sigmas[j])
                patches.append(ViewPatch(patch=np.clip(patch, 0.0, 1.0), descriptor=desc))
    return patches


def training_patches(
    crops: list[NoduleCrop], augment: bool, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Stack training patches for a crop list.

    Returns (patches [M, 1, S, S], crop_index [M]); without augmentation each
    crop contributes its three plain center views, with augmentation its 27
    augmented patches.
    """
    if not crops:
        raise ValueError("training_patches: empty crop list")
    if augment and rng is None:
        raise ValueError("training_patches: augmentation requires an rng")
    stacks = []
    owners = []
    for i, crop in enumerate(crops):
        if augment:
            group = np.stack([vp.patch for vp in augment_27(crop, rng)])
        else:
            group = center_views(crop.volume)
        stacks.append(group)
        owners.extend([i] * group.shape[0])
    x = np.concatenate(stacks)[:, None, :, :]
    return x, np.asarray(owners, dtype=np.int64)
