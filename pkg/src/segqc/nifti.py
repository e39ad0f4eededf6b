"""Hand-rolled NIfTI-1 single-file reader and writer.

Only the little-endian single-file form (magic ``n+1\\0``) is supported, with
datatype codes {2: uint8, 4: int16, 512: uint16, 16: float32, 64: float64}.
File voxel order is x-fastest; in memory we keep z-major (nz, ny, nx), which
is the same linear sequence, so no transposition copy is needed. Orientation
fields (quatern/srow) are ignored on read and written as identity-ish zeros;
only pixdim is consumed.
"""

from __future__ import annotations

import gzip
import struct

import numpy as np

from .errors import NiftiParseError, NiftiWriteError
from .volume import Mask, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

# NIfTI-1 datatype code -> numpy dtype (little-endian)
_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    512: np.dtype("<u2"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}
_CODES = {v: k for k, v in _DTYPES.items()}

MASK_THRESHOLD = 0.5


def _maybe_gunzip(raw: bytes) -> bytes:
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def parse_nifti(raw: bytes, as_mask: bool = False) -> Volume | Mask:
    """Parse a NIfTI-1 payload (optionally gzipped) into a Volume or Mask.

    Values are mapped through scl_slope * v + scl_inter (slope 0 acts as 1).
    In mask mode the scaled values are binarized with threshold > 0.5.
    """
    buf = _maybe_gunzip(raw)
    if len(buf) < HEADER_SIZE:
        raise NiftiParseError("sizeof_hdr", f"payload holds {len(buf)} bytes, header needs {HEADER_SIZE}")

    (sizeof_hdr,) = struct.unpack_from("<i", buf, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiParseError("sizeof_hdr", f"expected {HEADER_SIZE} (little-endian NIfTI-1), got {sizeof_hdr}")

    magic = buf[344:348]
    if magic != MAGIC_SINGLE:
        if magic == MAGIC_PAIR:
            raise NiftiParseError("magic", "unsupported magic 'ni1' (two-file form)")
        raise NiftiParseError("magic", f"expected 'n+1', got {magic!r}")

    dim = struct.unpack_from("<8h", buf, 40)
    if dim[0] != 3:
        raise NiftiParseError("dim", f"dim[0] must be 3, got {dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise NiftiParseError("dim", f"dims must be >= 1, got ({nx}, {ny}, {nz})")

    (datatype,) = struct.unpack_from("<h", buf, 70)
    if datatype not in _DTYPES:
        raise NiftiParseError("datatype", f"unsupported datatype code {datatype}")
    dtype = _DTYPES[datatype]

    pixdim = struct.unpack_from("<8f", buf, 76)
    # Nonpositive pixdim entries (written by some tools) fall back to 1 mm.
    dx, dy, dz = (p if p > 0 else 1.0 for p in pixdim[1:4])

    (vox_offset_f,) = struct.unpack_from("<f", buf, 108)
    vox_offset = int(vox_offset_f)
    if vox_offset < VOX_OFFSET:
        raise NiftiParseError("vox_offset", f"must be >= {VOX_OFFSET}, got {vox_offset_f}")

    slope, inter = struct.unpack_from("<2f", buf, 112)
    if slope == 0 or not np.isfinite(slope):
        slope = 1.0
    if not np.isfinite(inter):
        inter = 0.0

    n_vox = nx * ny * nz
    need = n_vox * dtype.itemsize
    if len(buf) - vox_offset < need:
        raise NiftiParseError(
            "data", f"truncated data section: need {need} bytes at offset {vox_offset}, have {len(buf) - vox_offset}"
        )
    raw_vox = np.frombuffer(buf, dtype=dtype, count=n_vox, offset=vox_offset)
    # File order is x-fastest with z slowest, which is exactly C order (nz, ny, nx).
    values = raw_vox.astype(np.float64).reshape(nz, ny, nx) * slope + inter

    spacing = (float(dz), float(dy), float(dx))
    if as_mask:
        return Mask((values > MASK_THRESHOLD).astype(np.uint8), spacing)
    return Volume(values, spacing)


def _pick_dtype(v: Volume | Mask) -> np.dtype:
    if isinstance(v, Mask):
        return _DTYPES[2]
    data = v.data
    if np.all(data == np.round(data)) and data.min() >= -32768 and data.max() <= 32767:
        return _DTYPES[4]
    return _DTYPES[16]


def write_nifti(v: Volume | Mask) -> bytes:
    """Serialize a Volume or Mask as an uncompressed NIfTI-1 byte string.

    Masks are written as uint8; volumes as int16 when the data is integral
    in range (lossless round trip), otherwise float32.
    """
    nz, ny, nx = v.dims
    if max(nx, ny, nz) > 32767:
        raise NiftiWriteError(f"dims {v.dims} exceed the format's 16-bit dimension fields")
    dtype = _pick_dtype(v)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _CODES[dtype])
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)  # bitpix
    dz, dy, dx = v.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, dx, dy, dz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    hdr[148 : 148 + 5] = b"segqc"  # descrip
    hdr[344:348] = MAGIC_SINGLE

    payload = np.ascontiguousarray(v.data.astype(dtype.base)).tobytes()
    extender = b"\x00\x00\x00\x00"
    return bytes(hdr) + extender + payload


def load(path, as_mask: bool = False) -> Volume | Mask:
    with open(path, "rb") as f:
        return parse_nifti(f.read(), as_mask=as_mask)


def save(path, v: Volume | Mask) -> None:
    """Write to disk; paths ending in .gz are gzip-compressed reproducibly (mtime 0)."""
    raw = write_nifti(v)
    if str(path).endswith(".gz"):
        raw = gzip.compress(raw, mtime=0)
    with open(path, "wb") as f:
        f.write(raw)
