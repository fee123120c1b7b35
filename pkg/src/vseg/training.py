"""Segment sampling, the training schedule, and dense tiled inference.

Training draws 27^3 dual-modality segments whose centered 9^3 label windows
lie inside the volume (input context past the border is zero-padded, matching
the zero background after intensity normalization). Dense inference tiles a
volume on a 9-stride grid so the 9^3 output windows partition it exactly.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Subject
from .network import forward_segment
from .volume import Volume

log = logging.getLogger(__name__)

TILE_IN = 27
TILE_OUT = 9
CONTEXT = (TILE_IN - TILE_OUT) // 2  # input halo past the output window


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    subepochs_per_epoch: int = 20
    samples_per_subepoch: int = 1000
    batch_size: int = 20
    lr0: float = 0.001
    momentum: float = 0.6
    rho: float = 0.9
    eps: float = 1e-6
    lr_halve_every: int = 5
    lr_halve_start: int = 10
    segment_side: int = 27
    seed: int = 0
    foreground_center_fraction: float = 0.5
    val_samples: int = 200

    def __post_init__(self):
        for name in ("epochs", "subepochs_per_epoch", "samples_per_subepoch", "batch_size",
                     "lr_halve_every", "lr_halve_start", "segment_side", "val_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.lr0 < 0 or not (0 <= self.foreground_center_fraction <= 1):
            raise ValueError("TrainConfig: lr0 >= 0 and foreground_center_fraction in [0,1]")
        if self.segment_side - 18 < 1:
            raise ValueError(f"segment_side {self.segment_side} leaves no output window")

    @property
    def output_side(self):
        return self.segment_side - 18


@dataclass
class SegmentSample:
    subject_id: str
    corner: tuple  # input-window origin in volume coordinates (may be negative)
    input: np.ndarray  # (modalities, side, side, side) float32
    target: np.ndarray  # (out, out, out) integer labels


@dataclass
class TrainHistory:
    subepoch_losses: list = field(default_factory=list)  # (epoch, subepoch, loss)
    val_losses: list = field(default_factory=list)  # (epoch, loss)

    def final_train_loss(self):
        return self.subepoch_losses[-1][2]

    def to_csv(self, path):
        val_by_epoch = dict((e, v) for e, v in self.val_losses)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "subepoch", "train_loss", "val_loss"])
            for epoch, subepoch, loss in self.subepoch_losses:
                is_last = not any(e == epoch and s > subepoch for e, s, _ in self.subepoch_losses)
                val = val_by_epoch.get(epoch, "") if is_last else ""
                writer.writerow([epoch, subepoch, f"{loss:.6f}", f"{val:.6f}" if val != "" else ""])


def normalize_intensities(subject):
    """Zero-mean unit-variance per modality over masked voxels; background -> 0."""
    mask = subject.mask.data > 0
    if not mask.any():
        raise TrainingError(f"subject {subject.id}: empty mask")
    out = {}
    for key in ("t1", "t2"):
        vol = getattr(subject, key)
        vals = vol.data[mask].astype(np.float64)
        std = vals.std()
        if std == 0:
            raise TrainingError(f"subject {subject.id}: zero intensity variance under mask ({key})")
        norm = (vol.data.astype(np.float32) - np.float32(vals.mean())) / np.float32(std)
        norm[~mask] = 0.0
        out[key] = Volume(norm, spacing=vol.spacing, raw_header=vol.raw_header)
    return Subject(id=subject.id, t1=out["t1"], t2=out["t2"],
                   labels=subject.labels, mask=subject.mask)


def extract_window(data, corner, size, dtype=np.float32):
    """Copy a cubic window, zero-filling where it leaves the volume."""
    out = np.zeros((size, size, size), dtype=dtype)
    src = []
    dst = []
    for ax in range(3):
        lo = corner[ax]
        hi = lo + size
        src.append(slice(max(lo, 0), min(hi, data.shape[ax])))
        dst.append(slice(max(-lo, 0), size - max(hi - data.shape[ax], 0)))
    if all(s.stop > s.start for s in src):
        out[tuple(dst)] = data[tuple(src)]
    return out


class _SamplerIndex:
    """Cached center-candidate coordinates for one subject."""

    def __init__(self, subject):
        self.subject = subject
        mask = subject.mask.data > 0
        self.mask_coords = np.argwhere(mask)
        fg = mask & (subject.labels.data > 0)
        self.fg_coords = np.argwhere(fg)

    @property
    def usable(self):
        return len(self.mask_coords) > 0


def build_sampler_indexes(subjects):
    indexes = []
    for s in subjects:
        idx = _SamplerIndex(s)
        if not idx.usable:
            log.warning("subject %s has an empty mask; skipped from sampling", s.id)
            continue
        indexes.append(idx)
    if not indexes:
        raise TrainingError("no subjects with non-empty masks to sample from")
    return indexes


def sample_segments(subjects, n, rng, config):
    """Draw n training segments: uniform subject, biased center choice.

    With probability foreground_center_fraction the 9^3 target window centers
    on a uniformly chosen non-background voxel, otherwise on a masked voxel;
    centers are clamped so the target window stays inside the volume.
    """
    if n < 1:
        raise ValueError("sample_segments: n must be >= 1")
    indexes = subjects if subjects and isinstance(subjects[0], _SamplerIndex) \
        else build_sampler_indexes(subjects)
    side = config.segment_side
    out = config.output_side
    half_lo = (out - 1) // 2
    samples = []
    for _ in range(n):
        idx = indexes[rng.integers(len(indexes))]
        pick_fg = rng.random() < config.foreground_center_fraction
        coords = idx.fg_coords if pick_fg and len(idx.fg_coords) else idx.mask_coords
        center = coords[rng.integers(len(coords))]
        dims = idx.subject.dims
        center = np.minimum(np.maximum(center, half_lo), np.array(dims) - (out - half_lo))
        t_corner = center - half_lo
        in_corner = t_corner - CONTEXT
        windows = [extract_window(getattr(idx.subject, k).data, in_corner, side)
                   for k in ("t1", "t2")]
        target = idx.subject.labels.data[tuple(slice(c, c + out) for c in t_corner)]
        samples.append(SegmentSample(
            subject_id=idx.subject.id,
            corner=tuple(int(c) for c in in_corner),
            input=np.stack(windows),
            target=target.astype(np.int64)))
    return samples


def lr_at_epoch(epoch, config):
    """lr0 until the halving start epoch, then halved every lr_halve_every epochs."""
    if epoch < 1:
        raise ValueError("epochs are 1-indexed")
    if epoch < config.lr_halve_start:
        return config.lr0
    halvings = 1 + (epoch - config.lr_halve_start) // config.lr_halve_every
    return config.lr0 / (2.0 ** halvings)


def batch_arrays(samples, dtype=np.float32):
    x = np.stack([s.input for s in samples]).astype(dtype, copy=False)
    y = np.stack([s.target for s in samples])
    return x, y


def batch_loss(net, x, y, mode):
    """Forward + cost on one batch; gradients flow when a tape is active."""
    probs = forward_segment(net, ad.Tensor(x), mode=mode)
    return ad.cross_entropy_loss(probs, y)


def train(net, train_subjects, val_subjects, config):
    """Run the subepoch schedule; returns the per-subepoch/epoch loss history."""
    train_ids = {s.id for s in train_subjects}
    if train_ids & {s.id for s in val_subjects}:
        raise TrainingError("train and validation subject sets overlap")

    rng = np.random.default_rng(config.seed)
    train_idx = build_sampler_indexes([normalize_intensities(s) for s in train_subjects])
    val_batches = []
    if val_subjects:
        val_idx = build_sampler_indexes([normalize_intensities(s) for s in val_subjects])
        val_rng = np.random.default_rng([config.seed, 0x5EED])
        val_set = sample_segments(val_idx, config.val_samples, val_rng, config)
        val_batches = [batch_arrays(val_set[i:i + config.batch_size])
                       for i in range(0, len(val_set), config.batch_size)]

    params = net.parameters()
    history = TrainHistory()
    for epoch in range(1, config.epochs + 1):
        lr = lr_at_epoch(epoch, config)
        for subepoch in range(1, config.subepochs_per_epoch + 1):
            samples = sample_segments(train_idx, config.samples_per_subepoch, rng, config)
            losses = []
            for b, start in enumerate(range(0, len(samples), config.batch_size)):
                x, y = batch_arrays(samples[start:start + config.batch_size])
                with ad.Tape():
                    loss = batch_loss(net, x, y, mode="train")
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss {value} at epoch {epoch}, subepoch {subepoch}, batch {b}")
                ad.backward(loss)
                ad.rmsprop_step(params, lr=lr, momentum=config.momentum,
                                rho=config.rho, eps=config.eps)
                ad.zero_grads(params)
                losses.append(value)
            mean_loss = float(np.mean(losses))
            history.subepoch_losses.append((epoch, subepoch, mean_loss))
            log.info("epoch %d subepoch %d: train loss %.4f (lr %.2e)",
                     epoch, subepoch, mean_loss, lr)
        if val_batches:
            vals = [batch_loss(net, x, y, mode="infer").item() for x, y in val_batches]
            history.val_losses.append((epoch, float(np.mean(vals))))
            log.info("epoch %d: val loss %.4f", epoch, history.val_losses[-1][1])
    net.seed = config.seed
    return history


def dense_inference(net, subject, assume_normalized=False, tile_batch=24):
    """Whole-volume class probabilities and labels by exact 9^3 tiling.

    The volume is zero-padded by the context margin, tiled by 27^3 input
    windows on a 9-stride grid, and each tile's 9^3 output (clipped at the
    far edges) lands on disjoint voxels. Out-of-mask voxels are forced to
    background in the label map.
    """
    dims = subject.dims
    if min(dims) < TILE_OUT:
        raise TrainingError(f"volume {dims} smaller than the {TILE_OUT}^3 output tile")
    subj = subject if assume_normalized else normalize_intensities(subject)
    ntiles = [int(np.ceil(d / TILE_OUT)) for d in dims]
    pad_hi = [CONTEXT + nt * TILE_OUT - d for nt, d in zip(ntiles, dims)]
    stacked = np.stack([subj.t1.data, subj.t2.data]).astype(np.float32)
    padded = np.pad(stacked, [(0, 0)] + [(CONTEXT, ph) for ph in pad_hi])

    corners = [(ix * TILE_OUT, iy * TILE_OUT, iz * TILE_OUT)
               for ix in range(ntiles[0]) for iy in range(ntiles[1]) for iz in range(ntiles[2])]
    probs = np.zeros((net.config.num_classes,) + dims, dtype=np.float32)
    for start in range(0, len(corners), tile_batch):
        chunk = corners[start:start + tile_batch]
        batch = np.stack([
            padded[:, cx:cx + TILE_IN, cy:cy + TILE_IN, cz:cz + TILE_IN]
            for cx, cy, cz in chunk])
        out = forward_segment(net, ad.Tensor(batch), mode="infer").data
        for i, (cx, cy, cz) in enumerate(chunk):
            ex, ey, ez = (min(cx + TILE_OUT, dims[0]), min(cy + TILE_OUT, dims[1]),
                          min(cz + TILE_OUT, dims[2]))
            probs[:, cx:ex, cy:ey, cz:ez] = out[i, :, :ex - cx, :ey - cy, :ez - cz]

    labels = np.argmax(probs, axis=0).astype(np.uint8)
    labels[subject.mask.data == 0] = 0
    return probs, Volume(labels, spacing=subject.spacing)
