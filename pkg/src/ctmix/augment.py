"""Stochastic two-view augmentation for volumes.

Geometric work (random resized crop + in-plane rotation) runs as one affine
resampling per slice; photometric work is brightness/contrast jitter. The
``volume3d`` mode shares a single draw across all slices of a volume, the
``slicewise`` mode draws independently per slice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgument, InvalidConfig
from .volumes import CTVolume, resize_volume

MODE_VOLUME3D = "volume3d"
MODE_SLICEWISE = "slicewise"


@dataclass(frozen=True)
class AugmentationPolicy:
    """All stochastic ranges of the augmentation module, config-surfaced."""

    mode: str = MODE_VOLUME3D
    base_shape: tuple[int, int, int] = (128, 224, 224)
    crop_scale_range: tuple[float, float] = (0.7, 1.0)
    depth_crop: int = 64
    rotation_degrees: tuple[float, float] = (-10.0, 10.0)
    brightness_jitter: float = 0.2
    contrast_jitter: float = 0.2
    train_resolution: int = 192
    eval_resolution: int = 224

    def __post_init__(self):
        if self.mode not in (MODE_VOLUME3D, MODE_SLICEWISE):
            raise InvalidConfig(f"unknown augmentation mode {self.mode!r}")
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise InvalidConfig(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        if self.rotation_degrees[0] > self.rotation_degrees[1]:
            raise InvalidConfig(f"rotation_degrees out of order: {self.rotation_degrees}")
        if not (0.0 <= self.brightness_jitter < 1.0) or not (0.0 <= self.contrast_jitter < 1.0):
            raise InvalidConfig("jitter magnitudes must lie in [0, 1)")
        if self.depth_crop < 1 or self.depth_crop > self.base_shape[0]:
            raise InvalidConfig(f"depth_crop {self.depth_crop} incompatible with base depth {self.base_shape[0]}")
        if self.train_resolution < 1 or self.eval_resolution < 1:
            raise InvalidConfig("resolutions must be >= 1")
        if self.eval_resolution > min(self.base_shape[1], self.base_shape[2]):
            raise InvalidConfig(
                f"eval_resolution {self.eval_resolution} exceeds base frame {self.base_shape[1:]}"
            )


@dataclass(frozen=True)
class ViewPair:
    """Two independently augmented views of one scan, sharing its label."""

    view_a: CTVolume
    view_b: CTVolume
    label: int


def _affine_theta(angles_rad, crop_h, crop_w, cy, cx, height, width):
    """Per-slice affine rows mapping output [-1,1]^2 onto the rotated crop box."""
    cos = np.cos(angles_rad)
    sin = np.sin(angles_rad)
    theta = np.zeros((len(angles_rad), 2, 3), dtype=np.float32)
    theta[:, 0, 0] = crop_w * cos / width
    theta[:, 0, 1] = -crop_h * sin / width
    theta[:, 0, 2] = 2.0 * cx / width - 1.0
    theta[:, 1, 0] = crop_w * sin / height
    theta[:, 1, 1] = crop_h * cos / height
    theta[:, 1, 2] = 2.0 * cy / height - 1.0
    return torch.from_numpy(theta)


def _augment(v: CTVolume, policy: AugmentationPolicy, rng: np.random.Generator, per_slice: bool) -> CTVolume:
    depth, height, width = v.shape
    d_crop = policy.depth_crop
    if depth < d_crop:
        raise InvalidArgument(f"volume depth {depth} smaller than depth_crop {d_crop}")
    out_res = policy.train_resolution

    # draw order is part of the reproducibility contract:
    # depth window, crop scale, crop center, angle, brightness, contrast
    d0 = int(rng.integers(0, depth - d_crop + 1))
    n_draws = d_crop if per_slice else 1
    scale = rng.uniform(policy.crop_scale_range[0], policy.crop_scale_range[1], size=n_draws)
    crop_h = np.sqrt(scale) * height
    crop_w = np.sqrt(scale) * width
    cy = crop_h / 2.0 + rng.uniform(0.0, 1.0, size=n_draws) * (height - crop_h)
    cx = crop_w / 2.0 + rng.uniform(0.0, 1.0, size=n_draws) * (width - crop_w)
    angles = np.deg2rad(rng.uniform(policy.rotation_degrees[0], policy.rotation_degrees[1], size=n_draws))
    bright = rng.uniform(1.0 - policy.brightness_jitter, 1.0 + policy.brightness_jitter, size=n_draws)
    contrast = rng.uniform(1.0 - policy.contrast_jitter, 1.0 + policy.contrast_jitter, size=n_draws)

    window = torch.from_numpy(v.voxels[d0 : d0 + d_crop]).unsqueeze(1)  # (D,1,H,W)
    if not per_slice:
        scale, crop_h, crop_w = (np.repeat(a, d_crop) for a in (scale, crop_h, crop_w))
        cy, cx, angles = (np.repeat(a, d_crop) for a in (cy, cx, angles))
    theta = _affine_theta(angles, crop_h, crop_w, cy, cx, height, width)
    grid = F.affine_grid(theta, (d_crop, 1, out_res, out_res), align_corners=False)
    sampled = F.grid_sample(window, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    sampled = sampled.squeeze(1)  # (D,R,R)

    b = torch.from_numpy(bright.astype(np.float32))
    c = torch.from_numpy(contrast.astype(np.float32))
    jittered = sampled
    if per_slice:
        if bool((b != 1.0).any()):
            jittered = jittered * b.view(-1, 1, 1)
        if bool((c != 1.0).any()):
            mean = jittered.mean(dim=(1, 2), keepdim=True)
            jittered = (jittered - mean) * c.view(-1, 1, 1) + mean
    else:
        if b[0] != 1.0:
            jittered = jittered * b[0]
        if c[0] != 1.0:
            mean = jittered.mean()
            jittered = (jittered - mean) * c[0] + mean
    return CTVolume(jittered.clamp_(0.0, 1.0).numpy(), v.scan_id)


def augment_3d(v: CTVolume, policy: AugmentationPolicy, rng: np.random.Generator) -> CTVolume:
    """One shared geometric + photometric draw applied to every slice."""
    return _augment(v, policy, rng, per_slice=False)


def augment_slicewise(v: CTVolume, policy: AugmentationPolicy, rng: np.random.Generator) -> CTVolume:
    """Independent per-slice draws of the same transform family."""
    return _augment(v, policy, rng, per_slice=True)


def augment(v: CTVolume, policy: AugmentationPolicy, rng: np.random.Generator) -> CTVolume:
    """Apply the policy's configured mode."""
    if policy.mode == MODE_SLICEWISE:
        return augment_slicewise(v, policy, rng)
    return augment_3d(v, policy, rng)


def make_views(v: CTVolume, label: int, policy: AugmentationPolicy, rng: np.random.Generator) -> ViewPair:
    """Draw two independent augmentations of one scan; both inherit its label."""
    view_a = augment(v, policy, rng)
    view_b = augment(v, policy, rng)
    return ViewPair(view_a=view_a, view_b=view_b, label=label)


def eval_transform(v: CTVolume, policy: AugmentationPolicy) -> CTVolume:
    """Deterministic test-time path: resize to base, center crop depth and plane."""
    resized = resize_volume(v, policy.base_shape)
    depth, height, width = resized.shape
    d_crop, res = policy.depth_crop, policy.eval_resolution
    d0 = (depth - d_crop) // 2
    y0 = (height - res) // 2
    x0 = (width - res) // 2
    vox = resized.voxels[d0 : d0 + d_crop, y0 : y0 + res, x0 : x0 + res]
    return CTVolume(np.ascontiguousarray(vox), v.scan_id)


def train_transform(
    v: CTVolume, policy: AugmentationPolicy, rng: np.random.Generator
) -> CTVolume:
    """Training-time path: resize to base shape, then stochastic augmentation."""
    return augment(resize_volume(v, policy.base_shape), policy, rng)
