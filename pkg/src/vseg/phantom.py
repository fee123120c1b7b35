"""Synthetic isointense phantoms standing in for the restricted challenge data.

A smoothed random field is cut at fixed quantiles into background, CSF, GM
and WM regions, so every class keeps a guaranteed share of the grid and the
tissue interfaces are curved. The T1-like channel makes GM and WM nearly
isointense; the T2-like channel separates them clearly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import Subject, NUM_CLASSES
from .volume import Volume


@dataclass
class PhantomConfig:
    dims: tuple = (64, 64, 64)
    # per-class means (BG, CSF, GM, WM) per modality; GM vs WM gap is the knob
    t1_means: tuple = (10.0, 45.0, 100.0, 106.0)
    t2_means: tuple = (15.0, 160.0, 105.0, 55.0)
    noise_std: float = 25.0
    smoothness: float = 7.0  # gaussian sigma (voxels) of the label field
    class_fractions: tuple = (0.30, 0.20, 0.25, 0.25)
    spacing: tuple = (1.0, 1.0, 1.0)
    min_class_fraction: float = 0.02

    def __post_init__(self):
        if len(self.t1_means) != NUM_CLASSES or len(self.t2_means) != NUM_CLASSES:
            raise ValueError("phantoms use 4 class means per modality")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not np.all(np.isfinite(self.t1_means)) or not np.all(np.isfinite(self.t2_means)):
            raise ValueError("class means must be finite")
        if len(self.class_fractions) != NUM_CLASSES or abs(sum(self.class_fractions) - 1) > 1e-9:
            raise ValueError("class_fractions must be 4 values summing to 1")

    @property
    def isointense_gap(self):
        """|GM - WM| mean separation per modality (small for T1, large for T2)."""
        return {"t1": abs(self.t1_means[2] - self.t1_means[3]),
                "t2": abs(self.t2_means[2] - self.t2_means[3])}


def _label_field(config, rng):
    noise = rng.standard_normal(config.dims)
    smooth = gaussian_filter(noise, sigma=config.smoothness)
    cuts = np.quantile(smooth, np.cumsum(config.class_fractions)[:-1])
    return np.digitize(smooth, cuts).astype(np.uint8)


def generate_phantom(config, seed, subject_id=None):
    """Deterministic synthetic subject; regenerates on class collapse."""
    for attempt in range(10):
        rng = np.random.default_rng([int(seed), attempt])
        labels = _label_field(config, rng)
        counts = np.bincount(labels.reshape(-1), minlength=NUM_CLASSES)
        if counts.min() >= config.min_class_fraction * labels.size:
            break
    else:
        raise RuntimeError(
            f"phantom generation failed: a class stayed below "
            f"{config.min_class_fraction:.0%} after 10 attempts (seed {seed})")

    images = {}
    for key, means in (("t1", config.t1_means), ("t2", config.t2_means)):
        mean_map = np.asarray(means, dtype=np.float32)[labels]
        img = mean_map + rng.normal(0.0, config.noise_std, config.dims)
        images[key] = img.astype(np.float32)

    mask = (labels > 0).astype(np.uint8)
    sid = subject_id if subject_id is not None else f"phantom_{seed:04d}"
    return Subject(
        id=sid,
        t1=Volume(images["t1"], spacing=config.spacing),
        t2=Volume(images["t2"], spacing=config.spacing),
        labels=Volume(labels, spacing=config.spacing),
        mask=Volume(mask, spacing=config.spacing),
    )


def nearest_mean_labels(t2_data, t2_means):
    """Per-voxel nearest-mean classification on the T2-like channel alone.

    The sanity floor: exact on noise-free phantoms, degraded under noise.
    """
    means = np.asarray(t2_means, dtype=np.float32)
    dist = np.abs(t2_data.astype(np.float32)[..., None] - means.reshape(1, 1, 1, -1))
    return np.argmin(dist, axis=-1).astype(np.uint8)
