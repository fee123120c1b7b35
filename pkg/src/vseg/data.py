"""Subjects (paired modality volumes + labels + mask) and dataset manifests."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .volume import Volume, read_volume, write_volume

MANIFEST_SCHEMA_VERSION = 1

NUM_CLASSES = 4
CLASS_NAMES = ("BG", "CSF", "GM", "WM")
TISSUE_CLASSES = (1, 2, 3)  # CSF, GM, WM


class ManifestError(ValueError):
    pass


@dataclass
class Subject:
    id: str
    t1: Volume
    t2: Volume
    labels: Volume
    mask: Volume

    def __post_init__(self):
        dims = self.t1.dims
        for name in ("t2", "labels", "mask"):
            vol = getattr(self, name)
            if vol.dims != dims:
                raise ManifestError(
                    f"subject {self.id}: {name} dims {vol.dims} != t1 dims {dims}")

    @property
    def dims(self):
        return self.t1.dims

    @property
    def spacing(self):
        return self.t1.spacing


def save_subject(subject, directory, fmt="nii"):
    """Write the four volumes under directory; returns a manifest entry."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = {"nii": ".nii", "native": ".vjson"}[fmt]
    entry = {"id": subject.id}
    for key in ("t1", "t2", "labels", "mask"):
        rel = f"{subject.id}_{key}{ext}"
        write_volume(getattr(subject, key), directory / rel)
        entry[key] = rel
    return entry


def load_subject(entry, base_dir):
    base = Path(base_dir)
    vols = {}
    for key in ("t1", "t2", "labels", "mask"):
        p = base / entry[key]
        if not p.exists():
            raise FileNotFoundError(p)
        vols[key] = read_volume(p)
    return Subject(id=entry["id"], **vols)


def write_manifest(path, entries):
    doc = {"schema_version": MANIFEST_SCHEMA_VERSION, "subjects": list(entries)}
    Path(path).write_text(json.dumps(doc, indent=1))


def read_manifest(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    doc = json.loads(path.read_text())
    if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise ManifestError(
            f"{path}: manifest schema_version {doc.get('schema_version')} "
            f"!= {MANIFEST_SCHEMA_VERSION}")
    subjects = doc.get("subjects")
    if not isinstance(subjects, list):
        raise ManifestError(f"{path}: manifest must contain a 'subjects' list")
    for s in subjects:
        missing = [k for k in ("id", "t1", "t2", "labels", "mask") if k not in s]
        if missing:
            raise ManifestError(f"{path}: subject entry missing keys {missing}")
    return subjects


def load_split(manifest_path, split):
    """Load all subjects whose 'split' field matches (None = all)."""
    base = Path(manifest_path).parent
    out = []
    for entry in read_manifest(manifest_path):
        if split is None or entry.get("split") == split:
            out.append(load_subject(entry, base))
    return out
