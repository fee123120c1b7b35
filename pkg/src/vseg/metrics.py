"""Segmentation accuracy metrics: overlap and boundary distances.

DSC measures volume overlap; the modified Hausdorff distance takes the 95th
percentile (nearest-rank) of directed boundary distances with an outer max
over both directions; the average surface distance is directed, reference to
automatic. Distances are Euclidean in mm, respecting anisotropic spacing.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .data import TISSUE_CLASSES, CLASS_NAMES


class MetricError(ValueError):
    pass


def dsc(ref, auto):
    """Dice overlap 2|A∩B| / (|A|+|B|); both-empty counts as perfect (1.0)."""
    ref = np.asarray(ref, bool)
    auto = np.asarray(auto, bool)
    if ref.shape != auto.shape:
        raise MetricError(f"dsc: mask dims differ {ref.shape} vs {auto.shape}")
    total = int(ref.sum()) + int(auto.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((ref & auto).sum()) / total


def boundary_voxels(mask):
    """Coordinates (N,3) of mask voxels with a 6-neighbor outside the mask.

    Grid edges count as outside, so a mask touching the border contributes
    its face there.
    """
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise MetricError("boundary_voxels: empty mask has no boundary")
    interior = np.ones_like(mask)
    for ax in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        shifted_lo = np.zeros_like(mask)
        shifted_hi = np.zeros_like(mask)
        shifted_lo[tuple(lo)] = mask[tuple(hi)]   # neighbor at +ax
        shifted_hi[tuple(hi)] = mask[tuple(lo)]   # neighbor at -ax
        interior &= shifted_lo & shifted_hi
    return np.argwhere(mask & ~interior)


def _directed_min_distances(src, dst, spacing):
    sp = np.asarray(spacing, np.float64)
    tree = cKDTree(dst.astype(np.float64) * sp)
    d, _ = tree.query(src.astype(np.float64) * sp, k=1)
    return d


def _nearest_rank_p95(values):
    asc = np.sort(values)
    return float(asc[math.ceil(0.95 * len(asc)) - 1])


def mhd95(ref_boundary, auto_boundary, spacing=(1.0, 1.0, 1.0), mode="per_direction"):
    """95th-percentile Hausdorff in mm over boundary voxel sets.

    per_direction (default): percentile of each directed distance list, outer
    max retained. pooled: both directed lists concatenated before a single
    percentile.
    """
    ref_boundary = np.asarray(ref_boundary)
    auto_boundary = np.asarray(auto_boundary)
    if len(ref_boundary) == 0 or len(auto_boundary) == 0:
        raise MetricError("mhd95: boundary sets must be nonempty")
    fwd = _directed_min_distances(ref_boundary, auto_boundary, spacing)
    bwd = _directed_min_distances(auto_boundary, ref_boundary, spacing)
    if mode == "per_direction":
        return max(_nearest_rank_p95(fwd), _nearest_rank_p95(bwd))
    if mode == "pooled":
        return _nearest_rank_p95(np.concatenate([fwd, bwd]))
    raise MetricError(f"mhd95: unknown mode {mode!r}")


def asd(ref_boundary, auto_boundary, spacing=(1.0, 1.0, 1.0)):
    """Directed mean distance (mm) from reference boundary to automatic boundary."""
    ref_boundary = np.asarray(ref_boundary)
    auto_boundary = np.asarray(auto_boundary)
    if len(ref_boundary) == 0 or len(auto_boundary) == 0:
        raise MetricError("asd: boundary sets must be nonempty")
    return float(_directed_min_distances(ref_boundary, auto_boundary, spacing).mean())


@dataclass
class ClassMetrics:
    class_id: int
    class_name: str
    dsc: float
    mhd: float | None
    asd: float | None
    flags: str = ""


@dataclass
class MetricsReport:
    classes: list

    def to_json(self, path=None):
        doc = {"classes": [{
            "class": c.class_name, "dsc": c.dsc, "mhd": c.mhd, "asd": c.asd,
            **({"flags": c.flags} if c.flags else {}),
        } for c in self.classes]}
        text = json.dumps(doc, indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "dsc", "mhd", "asd"])
            for c in self.classes:
                writer.writerow([
                    c.class_name, f"{c.dsc:.4f}",
                    "" if c.mhd is None else f"{c.mhd:.4f}",
                    "" if c.asd is None else f"{c.asd:.4f}"])

    def mean_dsc(self):
        return float(np.mean([c.dsc for c in self.classes]))


def evaluate(pred_labels, truth_labels, spacing=(1.0, 1.0, 1.0), classes=TISSUE_CLASSES,
             mhd_mode="per_direction"):
    """Per-class one-vs-rest report, ordered CSF, GM, WM.

    A class absent from both volumes scores dsc 1 with distances flagged
    undefined; absent from exactly one side flags the distances as well
    (never infinity).
    """
    pred_labels = np.asarray(pred_labels)
    truth_labels = np.asarray(truth_labels)
    if pred_labels.shape != truth_labels.shape:
        raise MetricError(
            f"evaluate: prediction dims {pred_labels.shape} != truth dims {truth_labels.shape}")
    out = []
    for cls in classes:
        ref = truth_labels == cls
        auto = pred_labels == cls
        overlap = dsc(ref, auto)
        if ref.any() and auto.any():
            rb = boundary_voxels(ref)
            ab = boundary_voxels(auto)
            out.append(ClassMetrics(cls, CLASS_NAMES[cls], overlap,
                                    mhd95(rb, ab, spacing, mhd_mode), asd(rb, ab, spacing)))
        else:
            flag = "absent-both" if not ref.any() and not auto.any() else (
                "absent-prediction" if not auto.any() else "absent-truth")
            out.append(ClassMetrics(cls, CLASS_NAMES[cls], overlap, None, None, flags=flag))
    return MetricsReport(out)
