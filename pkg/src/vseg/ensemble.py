"""Ensembles: random-subset training, majority voting, agreement maps,
confidence analysis and correction suggestions.

K networks trained on different subject subsets vote per voxel; the winner's
vote share is the agreement (confidence) map. Voxels at or below the
agreement threshold form the low-confidence region whose 6-connected
components are ranked and exported for human review.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .data import CLASS_NAMES, NUM_CLASSES, TISSUE_CLASSES
from .network import NetworkConfig, build_network
from .training import TrainConfig, dense_inference, train

DEFAULT_THRESHOLD = 0.6
DEFAULT_MIN_SIZE = 5


class EnsembleError(ValueError):
    pass


@dataclass
class EnsembleConfig:
    k: int = 10
    train_per_model: int = 8
    val_per_model: int = 2
    base: TrainConfig = field(default_factory=TrainConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    master_seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise EnsembleError(f"an ensemble needs K >= 2 models, got {self.k}")
        if self.train_per_model < 1 or self.val_per_model < 0:
            raise EnsembleError("per-model train/val counts out of range")


@dataclass
class AgreementMap:
    """Per-voxel fraction of models voting for the fused label, plus raw votes."""

    agreement: np.ndarray  # float32, values in {1/K, ..., 1}
    votes: np.ndarray  # (C, *dims) int16 per-class vote counts
    k: int

    def __post_init__(self):
        sums = self.votes.sum(axis=0)
        if not np.all(sums == self.k):
            raise EnsembleError("per-voxel class votes must sum to K everywhere")

    @property
    def winner_votes(self):
        return np.rint(self.agreement * self.k).astype(np.int16)


@dataclass
class ConfidencePartition:
    low: np.ndarray  # boolean, within mask
    high: np.ndarray
    threshold: float


@dataclass
class Suggestion:
    rank: int
    mean_agreement: float
    size: int
    bbox: tuple  # (x0, y0, z0, x1, y1, z1) inclusive voxel bounds
    dominant_class: int
    voxels: np.ndarray  # (N, 3) int coordinates


@dataclass
class CorrelationRow:
    class_id: int
    class_name: str
    high_corr: float | None
    low_corr: float | None
    high_pct: float
    low_pct: float


@dataclass
class CorrelationReport:
    rows: list

    def by_name(self, name):
        return next(r for r in self.rows if r.class_name == name)


def train_ensemble(subjects, config):
    """Train K models on random subject subsets; child seed = master + index."""
    need = config.train_per_model + config.val_per_model
    if need > len(subjects):
        raise EnsembleError(
            f"need {need} subjects per model, pool has {len(subjects)}")
    seeds = [config.master_seed + k for k in range(config.k)]
    if len(set(seeds)) != len(seeds):
        raise EnsembleError("duplicate child seeds")

    nets = []
    manifest = {"master_seed": config.master_seed, "k": config.k, "models": []}
    for k, child_seed in enumerate(seeds):
        rng = np.random.default_rng(child_seed)
        order = rng.permutation(len(subjects))
        train_set = [subjects[i] for i in order[:config.train_per_model]]
        val_set = [subjects[i] for i in
                   order[config.train_per_model:config.train_per_model + config.val_per_model]]
        net = build_network(config.network, np.random.default_rng(child_seed))
        cfg_fields = {f: getattr(config.base, f) for f in config.base.__dataclass_fields__}
        cfg_fields["seed"] = child_seed
        train(net, train_set, val_set, TrainConfig(**cfg_fields))
        nets.append(net)
        manifest["models"].append({
            "index": k,
            "seed": child_seed,
            "train_ids": [s.id for s in train_set],
            "val_ids": [s.id for s in val_set],
        })
    return nets, manifest


def majority_vote(label_volumes, prob_volumes):
    """Fuse K label maps: most votes wins, ties broken by mean softmax
    probability across models, then by lowest class index."""
    k = len(label_volumes)
    if k < 1 or len(prob_volumes) != k:
        raise EnsembleError("majority_vote needs matched label and probability stacks")
    dims = label_volumes[0].shape
    for lv in label_volumes:
        if lv.shape != dims:
            raise EnsembleError(f"label volume dims differ: {lv.shape} vs {dims}")
    c = prob_volumes[0].shape[0]
    for pv in prob_volumes:
        if pv.shape != (c,) + dims:
            raise EnsembleError(f"probability volume dims differ: {pv.shape} vs {(c,) + dims}")

    votes = np.zeros((c,) + dims, np.int16)
    for lv in label_volumes:
        for cls in range(c):
            votes[cls] += lv == cls
    mean_probs = np.mean(np.stack(prob_volumes).astype(np.float64), axis=0)
    # vote differences are >= 1, probability means < 1: a 0.5 weight can only
    # break exact vote ties, and argmax prefers the lowest class index
    score = votes + 0.5 * mean_probs
    fused = np.argmax(score, axis=0).astype(np.uint8)
    winner_votes = np.take_along_axis(votes, fused[None].astype(np.int64), axis=0)[0]
    agreement = (winner_votes.astype(np.float32)) / np.float32(k)
    return fused, AgreementMap(agreement=agreement, votes=votes, k=k)


def _low_mask(agreement, threshold, k=None):
    if k is not None:
        max_low_votes = int(np.floor(threshold * k + 1e-9))
        return np.rint(agreement * k).astype(np.int64) <= max_low_votes
    return agreement <= threshold + 1e-6


def partition_confidence(agreement, threshold=DEFAULT_THRESHOLD, mask=None):
    """Split masked voxels at the agreement threshold (<= threshold is low)."""
    if not 0 < threshold < 1:
        raise EnsembleError(f"threshold must lie in (0,1), got {threshold}")
    if isinstance(agreement, AgreementMap):
        low = _low_mask(agreement.agreement, threshold, k=agreement.k)
    else:
        low = _low_mask(np.asarray(agreement), threshold)
    if mask is None:
        mask = np.ones(low.shape, bool)
    else:
        mask = np.asarray(mask) > 0
    return ConfidencePartition(low=low & mask, high=~low & mask, threshold=threshold)


def _pearson(x, y):
    if len(x) < 2:
        return None
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    sx = x.std()
    sy = y.std()
    if sx == 0.0 or sy == 0.0:
        return None  # undefined, not zero
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))


def confidence_error_correlation(fused, truth, partition, classes=TISSUE_CLASSES):
    """Pearson correlation of one-vs-rest prediction/truth indicators per
    region, with region voxel percentages of the masked volume."""
    fused = np.asarray(fused)
    truth = np.asarray(truth)
    n_low = int(partition.low.sum())
    n_high = int(partition.high.sum())
    total = max(n_low + n_high, 1)
    rows = []
    for cls in classes:
        corr = {}
        for name, region in (("high", partition.high), ("low", partition.low)):
            corr[name] = _pearson((fused[region] == cls), (truth[region] == cls))
        rows.append(CorrelationRow(
            class_id=cls, class_name=CLASS_NAMES[cls],
            high_corr=corr["high"], low_corr=corr["low"],
            high_pct=100.0 * n_high / total, low_pct=100.0 * n_low / total))
    return CorrelationReport(rows)


def confidence_histograms(agreement, fused, truth, mask=None, classes=TISSUE_CLASSES, k=None):
    """Per-class agreement histograms of correct vs incorrect voxels.

    Bins sit at the K possible vote fractions {1/K, ..., 1}; masses per class
    partition that class's truth voxels. Accepts an AgreementMap or a plain
    agreement array plus k.
    """
    if isinstance(agreement, AgreementMap):
        k = agreement.k
        votes = agreement.winner_votes
    else:
        if k is None:
            raise EnsembleError("confidence_histograms needs k with a raw agreement array")
        votes = np.rint(np.asarray(agreement, np.float64) * k).astype(np.int16)
    fused = np.asarray(fused)
    truth = np.asarray(truth)
    mask = np.ones(truth.shape, bool) if mask is None else np.asarray(mask) > 0
    correct = fused == truth
    out = {"k": k, "bin_values": [(i + 1) / k for i in range(k)], "classes": {}}
    for cls in classes:
        sel = mask & (truth == cls)
        hist_c = np.bincount(votes[sel & correct], minlength=k + 1)[1:]
        hist_i = np.bincount(votes[sel & ~correct], minlength=k + 1)[1:]
        out["classes"][CLASS_NAMES[cls]] = {
            "correct": hist_c.tolist(),
            "incorrect": hist_i.tolist(),
        }
    return out


def connected_components_6(mask):
    """6-connected components of a boolean volume, as (N,3) coordinate arrays."""
    mask = np.asarray(mask, bool)
    seen = np.zeros(mask.shape, bool)
    comps = []
    steps = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))
    dims = mask.shape
    for seed in np.argwhere(mask):
        seed = tuple(seed)
        if seen[seed]:
            continue
        seen[seed] = True
        queue = deque([seed])
        comp = [seed]
        while queue:
            cx, cy, cz = queue.popleft()
            for dx, dy, dz in steps:
                nb = (cx + dx, cy + dy, cz + dz)
                if (0 <= nb[0] < dims[0] and 0 <= nb[1] < dims[1] and 0 <= nb[2] < dims[2]
                        and mask[nb] and not seen[nb]):
                    seen[nb] = True
                    comp.append(nb)
                    queue.append(nb)
        comps.append(np.array(comp, dtype=np.int64))
    return comps


def suggest_corrections(agreement, fused, threshold=DEFAULT_THRESHOLD,
                        min_size=DEFAULT_MIN_SIZE, mask=None):
    """Ranked low-confidence components (>= min_size voxels) for human review.

    Ranking: ascending mean agreement, then descending size; ties fall back
    to bounding-box order for determinism.
    """
    part = partition_confidence(agreement, threshold, mask)
    agr = agreement.agreement if isinstance(agreement, AgreementMap) else np.asarray(agreement)
    fused = np.asarray(fused)
    entries = []
    for comp in connected_components_6(part.low):
        if len(comp) < min_size:
            continue
        idx = tuple(comp.T)
        mean_agr = float(agr[idx].mean())
        dom = int(np.bincount(fused[idx], minlength=NUM_CLASSES).argmax())
        bbox = tuple(int(v) for v in np.concatenate([comp.min(axis=0), comp.max(axis=0)]))
        entries.append((mean_agr, -len(comp), bbox, comp, dom))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    return [
        Suggestion(rank=i + 1, mean_agreement=mean_agr, size=len(comp),
                   bbox=bbox, dominant_class=dom, voxels=comp)
        for i, (mean_agr, _, bbox, comp, dom) in enumerate(entries)
    ]


def suggestions_to_json(suggestions, volume_id, k, threshold, path=None):
    doc = {
        "volume_id": volume_id,
        "K": k,
        "threshold": threshold,
        "suggestions": [{
            "rank": s.rank,
            "mean_agreement": round(s.mean_agreement, 6),
            "size": s.size,
            "bbox": list(s.bbox),
            "dominant_class": s.dominant_class,
            "voxels": s.voxels.tolist(),
        } for s in suggestions],
    }
    text = json.dumps(doc, indent=1)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return doc


def segment_subject(nets, subject):
    """Dense inference with every model, then majority fusion.

    Returns (fused labels, agreement map, per-class mean probabilities,
    per-model label volumes).
    """
    labels = []
    probs = []
    for net in nets:
        p, lab = dense_inference(net, subject)
        probs.append(p)
        labels.append(lab.data)
    fused, agreement = majority_vote(labels, probs)
    # members were masked by dense_inference, so out-of-mask votes are
    # unanimous background and the fused map needs no extra masking
    mean_probs = np.mean(np.stack(probs), axis=0).astype(np.float32)
    return fused, agreement, mean_probs, labels
