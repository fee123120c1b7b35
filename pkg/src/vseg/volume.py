"""Volume container and file I/O (native header+raw format, NIfTI-1 dispatch).

Arrays are indexed [x, y, z]; spacing is mm per axis. Supported element types
are uint8, int16 and float32.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SUPPORTED_DTYPES = {"uint8": np.uint8, "int16": np.int16, "float32": np.float32}

NATIVE_FORMAT = "vseg-volume"
NATIVE_VERSION = 1


class VolumeFormatError(ValueError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    raw_header: bytes | None = field(default=None, repr=False)  # NIfTI pass-through

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise VolumeFormatError(f"volumes are 3D, got shape {self.data.shape}")
        if self.data.dtype.name not in SUPPORTED_DTYPES:
            raise VolumeFormatError(
                f"unsupported element type {self.data.dtype.name}; "
                f"supported: {sorted(SUPPORTED_DTYPES)}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeFormatError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def dims(self):
        return self.data.shape

    def astuple(self):
        return self.data, self.spacing


def _native_paths(path):
    path = Path(path)
    if path.suffix == ".vjson":
        return path, path.with_suffix(".vraw")
    raise VolumeFormatError(f"native volumes use a .vjson header, got {path.name}")


def write_native(vol, path):
    header_path, payload_path = _native_paths(path)
    header = {
        "format": NATIVE_FORMAT,
        "version": NATIVE_VERSION,
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "dtype": vol.data.dtype.name,
        "payload": payload_path.name,
    }
    header_path.write_text(json.dumps(header, indent=1))
    le = vol.data.astype(vol.data.dtype.newbyteorder("<"), copy=False)
    payload_path.write_bytes(np.ascontiguousarray(le).tobytes())


def read_native(path):
    header_path, _ = _native_paths(path)
    if not header_path.exists():
        raise FileNotFoundError(header_path)
    header = json.loads(header_path.read_text())
    if header.get("format") != NATIVE_FORMAT:
        raise VolumeFormatError(f"{header_path}: not a {NATIVE_FORMAT} header")
    if header.get("version") != NATIVE_VERSION:
        raise VolumeFormatError(f"{header_path}: unsupported version {header.get('version')}")
    dtype_name = header["dtype"]
    if dtype_name not in SUPPORTED_DTYPES:
        raise VolumeFormatError(f"{header_path}: unsupported dtype {dtype_name}")
    dims = tuple(header["dims"])
    payload_path = header_path.parent / header["payload"]
    raw = payload_path.read_bytes()
    dt = np.dtype(SUPPORTED_DTYPES[dtype_name]).newbyteorder("<")
    expected = int(np.prod(dims)) * dt.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{payload_path}: truncated payload, expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dtype_name)
    return Volume(data, spacing=tuple(header["spacing"]))


def read_volume(path):
    """Read .nii (NIfTI-1 subset) or .vjson (native) volumes."""
    path = Path(path)
    if path.suffix == ".nii":
        from . import nifti
        return nifti.read_nifti(path)
    if path.suffix == ".vjson":
        return read_native(path)
    if path.suffix == ".gz":
        raise VolumeFormatError(f"{path.name}: compressed volumes are not supported")
    raise VolumeFormatError(f"{path.name}: unrecognized volume extension")


def write_volume(vol, path):
    path = Path(path)
    if path.suffix == ".nii":
        from . import nifti
        return nifti.write_nifti(vol, path)
    if path.suffix == ".vjson":
        return write_native(vol, path)
    raise VolumeFormatError(f"{path.name}: unrecognized volume extension")
