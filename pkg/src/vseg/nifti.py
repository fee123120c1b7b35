"""Uncompressed single-file NIfTI-1 reader/writer (datatypes 2, 4, 16).

Header offsets follow the public NIfTI-1 layout; orientation fields are
passed through untouched on round trips. Voxels are stored x-fastest, so the
in-memory [x, y, z] array maps to the file via an axis transpose.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .volume import Volume, VolumeFormatError

HEADER_SIZE = 348
MAGIC_OFFSET = 344
MAGIC_SINGLE = b"n+1\x00"
VOX_OFFSET = 352.0

DTYPE_CODES = {2: np.uint8, 4: np.int16, 16: np.float32}
CODE_FOR_DTYPE = {"uint8": 2, "int16": 4, "float32": 16}
BITPIX = {2: 8, 4: 16, 16: 32}
DTYPE_NAMES = {2: "uint8", 4: "int16", 8: "int32", 16: "float32", 64: "float64",
               256: "int8", 512: "uint16", 768: "uint32"}


def read_nifti(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raise VolumeFormatError(f"{path.name}: gzip-compressed NIfTI is not supported")
    if len(raw) < HEADER_SIZE:
        raise VolumeFormatError(f"{path.name}: file shorter than the 348-byte NIfTI-1 header")
    header = raw[:HEADER_SIZE]

    (sizeof_hdr,) = struct.unpack_from("<i", header, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", header, 0)[0] == HEADER_SIZE:
            raise VolumeFormatError(f"{path.name}: big-endian NIfTI is not supported")
        raise VolumeFormatError(f"{path.name}: sizeof_hdr={sizeof_hdr}, not a NIfTI-1 file")
    magic = header[MAGIC_OFFSET:MAGIC_OFFSET + 4]
    if magic != MAGIC_SINGLE:
        raise VolumeFormatError(
            f"{path.name}: magic {magic!r} at offset {MAGIC_OFFSET} is not {MAGIC_SINGLE!r}")

    dim = struct.unpack_from("<8h", header, 40)
    if not 1 <= dim[0] <= 3:
        raise VolumeFormatError(f"{path.name}: {dim[0]}-dimensional images are not supported")
    dims = tuple(max(1, d) for d in dim[1:4])
    (datatype,) = struct.unpack_from("<h", header, 70)
    if datatype not in DTYPE_CODES:
        name = DTYPE_NAMES.get(datatype, "unknown")
        raise VolumeFormatError(
            f"{path.name}: NIfTI datatype code {datatype} ({name}) not supported; "
            f"supported codes: 2 (uint8), 4 (int16), 16 (float32)")
    pixdim = struct.unpack_from("<8f", header, 76)
    spacing = tuple(p if p > 0 else 1.0 for p in pixdim[1:4])
    (vox_offset,) = struct.unpack_from("<f", header, 108)
    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else int(VOX_OFFSET)

    dt = np.dtype(DTYPE_CODES[datatype]).newbyteorder("<")
    expected = int(np.prod(dims)) * dt.itemsize
    payload = raw[offset:offset + expected]
    if len(payload) < expected:
        raise VolumeFormatError(
            f"{path.name}: truncated payload, expected {expected} bytes, got {len(payload)}")

    flat = np.frombuffer(payload, dtype=dt)
    native = np.dtype(DTYPE_CODES[datatype])
    data = flat.reshape(dims[::-1]).transpose(2, 1, 0).astype(native)  # x fastest on disk
    return Volume(data, spacing=spacing, raw_header=header)


def _fresh_header():
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    return header


def write_nifti(vol, path):
    path = Path(path)
    code = CODE_FOR_DTYPE[vol.data.dtype.name]
    header = bytearray(vol.raw_header) if vol.raw_header is not None else _fresh_header()
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    dims = vol.dims
    struct.pack_into("<8h", header, 40, 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, BITPIX[code])
    pixdim = (0.0, vol.spacing[0], vol.spacing[1], vol.spacing[2], 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<f", header, 108, VOX_OFFSET)
    header[MAGIC_OFFSET:MAGIC_OFFSET + 4] = MAGIC_SINGLE

    le = vol.data.astype(vol.data.dtype.newbyteorder("<"), copy=False)
    payload = np.ascontiguousarray(le.transpose(2, 1, 0)).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00" * (int(VOX_OFFSET) - HEADER_SIZE))
        fh.write(payload)
