"""NIfTI-1 ingestion and the "ADCT" tensor container.

Volume3D is the unit of imaging work: a (depth, height, width) float32 scalar
field of ADC intensities in 1e-6 mm^2/s, with per-axis voxel spacing in mm and
a 4x4 voxel-index -> scanner-mm affine kept as metadata.

The ADCT container is the portable binary carrier for network weights, cached
embeddings, masks and other named float32 tensors. Layout (all integers
little-endian):

    magic   4 bytes  b"ADCT"
    version u32      1
    count   u32      number of records
    per record:
        name_len u32, name (UTF-8, non-empty, unique)
        dtype    u32      0 = float32
        rank     u32      >= 1
        dims     rank*u64 all >= 1
        payload  prod(dims) * 4 bytes, row-major float32

Only NIfTI-1 single-file streams are accepted (magic "n+1\\0", optionally
gzip-compressed); detached .hdr/.img pairs and NIfTI-2 are rejected.
"""

from __future__ import annotations

import gzip
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import PipelineError

CONTAINER_MAGIC = b"ADCT"
CONTAINER_VERSION = 1
DTYPE_F32 = 0

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC_SINGLE = b"n+1\x00"
NIFTI_MAGIC_PAIR = b"ni1\x00"
GZIP_PREFIX = b"\x1f\x8b"

# datatype code -> numpy dtype (little-endian)
_NIFTI_DTYPES = {4: "<i2", 16: "<f4", 64: "<f8"}


class VolumeIOError(PipelineError):
    pass


class BadMagic(VolumeIOError):
    pass


class BadHeader(VolumeIOError):
    pass


class UnsupportedDatatype(VolumeIOError):
    def __init__(self, code):
        super().__init__(f"unsupported NIfTI datatype code {code}")
        self.code = code


class DimMismatch(VolumeIOError):
    pass


class NonFiniteAfterScaling(VolumeIOError):
    pass


class Truncated(VolumeIOError):
    pass


class DuplicateName(VolumeIOError):
    pass


class UnknownDtype(VolumeIOError):
    def __init__(self, code):
        super().__init__(f"unknown container dtype code {code}")
        self.code = code


class InvalidRecord(VolumeIOError):
    pass


@dataclass
class Volume3D:
    """3D scalar field with voxel spacing (mm) and an index->mm affine."""

    shape: tuple[int, int, int]  # (depth, height, width)
    spacing: tuple[float, float, float]  # (sz, sy, sx) mm per voxel
    data: np.ndarray  # float32, C-order, shape == self.shape
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.shape) != 3 or any(s <= 0 for s in self.shape):
            raise BadHeader(f"volume shape must be 3 positive dims, got {self.shape}")
        if any(not np.isfinite(s) or s <= 0 for s in self.spacing):
            raise BadHeader(f"voxel spacing must be positive and finite, got {self.spacing}")
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.size != self.shape[0] * self.shape[1] * self.shape[2]:
            raise DimMismatch(f"data has {data.size} values, shape {self.shape} implies "
                              f"{self.shape[0] * self.shape[1] * self.shape[2]}")
        self.data = data.reshape(self.shape)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteAfterScaling("volume contains non-finite voxels")
        self.affine = np.asarray(self.affine, dtype=np.float64).reshape(4, 4)

    @property
    def voxel_volume_mm3(self) -> float:
        sz, sy, sx = self.spacing
        return sz * sy * sx


@dataclass(frozen=True)
class TensorRecord:
    name: str
    shape: tuple[int, ...]
    values: np.ndarray  # float32, flattened row-major

    @staticmethod
    def from_array(name: str, arr: np.ndarray) -> "TensorRecord":
        arr = np.asarray(arr, dtype=np.float32)
        return TensorRecord(name, tuple(int(d) for d in arr.shape), np.ascontiguousarray(arr).reshape(-1))

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.shape)


def _gunzip(data: bytes) -> bytes:
    try:
        return gzip.decompress(data)
    except (OSError, EOFError, zlib.error) as exc:
        raise BadMagic(f"gzip-prefixed stream failed to decompress: {exc}") from None


def read_nifti(data: bytes) -> Volume3D:
    """Parse a NIfTI-1 single-file stream (optionally gzipped) into a Volume3D.

    depth/height/width map to dim[3]/dim[2]/dim[1]; the payload's
    fastest-varying axis (x) lands on the last array axis.
    """
    if data[:2] == GZIP_PREFIX:
        data = _gunzip(data)
    if len(data) < NIFTI_HEADER_SIZE:
        raise BadMagic(f"stream shorter than the {NIFTI_HEADER_SIZE}-byte NIfTI-1 header")

    magic = data[344:348]
    if magic == NIFTI_MAGIC_PAIR:
        raise BadMagic("detached header/image pairs (magic 'ni1') are not supported")
    if magic != NIFTI_MAGIC_SINGLE:
        raise BadMagic(f"not a NIfTI-1 stream (magic {magic!r})")

    sizeof_hdr = struct.unpack_from("<i", data, 0)[0]
    byte_order = "<"
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        sizeof_hdr = struct.unpack_from(">i", data, 0)[0]
        if sizeof_hdr != NIFTI_HEADER_SIZE:
            raise BadMagic("sizeof_hdr is not 348 in either byte order")
        byte_order = ">"

    dim = struct.unpack_from(byte_order + "8h", data, 40)
    datatype = struct.unpack_from(byte_order + "h", data, 70)[0]
    pixdim = struct.unpack_from(byte_order + "8f", data, 76)
    vox_offset = struct.unpack_from(byte_order + "f", data, 108)[0]
    scl_slope = struct.unpack_from(byte_order + "f", data, 112)[0]
    scl_inter = struct.unpack_from(byte_order + "f", data, 116)[0]
    sform_code = struct.unpack_from(byte_order + "h", data, 254)[0]
    srows = struct.unpack_from(byte_order + "12f", data, 280)

    if dim[0] == 4:
        if dim[4] != 1:
            raise DimMismatch(f"4-D volumes supported only with a singleton 4th axis, got dim[4]={dim[4]}")
    elif dim[0] != 3:
        raise DimMismatch(f"expected a 3-D volume (dim[0] in {{3,4}}), got dim[0]={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if nx <= 0 or ny <= 0 or nz <= 0:
        raise DimMismatch(f"non-positive axis length in dim[1..3]=({nx},{ny},{nz})")

    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatype(datatype)
    dtype = np.dtype(_NIFTI_DTYPES[datatype])
    if byte_order == ">":
        dtype = dtype.newbyteorder(">")

    sx, sy, sz = pixdim[1], pixdim[2], pixdim[3]
    for s in (sx, sy, sz):
        if not np.isfinite(s) or s <= 0:
            raise BadHeader(f"pixdim[1..3] must be positive and finite, got ({sx},{sy},{sz})")

    if not np.isfinite(vox_offset) or vox_offset < 352:
        raise BadHeader(f"vox_offset must be >= 352 for embedded data, got {vox_offset}")
    offset = int(vox_offset)

    nvox = nx * ny * nz
    nbytes = nvox * dtype.itemsize
    if offset + nbytes > len(data):
        raise DimMismatch(
            f"payload needs {nbytes} bytes at offset {offset} but stream has {len(data)}"
        )
    raw = np.frombuffer(data, dtype=dtype, count=nvox, offset=offset)
    values = raw.astype(np.float32).reshape(nz, ny, nx)
    if scl_slope != 0.0:
        with np.errstate(over="ignore", invalid="ignore"):  # overflow surfaces as the typed error
            values = values * np.float32(scl_slope) + np.float32(scl_inter)
    if not np.all(np.isfinite(values)):
        raise NonFiniteAfterScaling("non-finite voxel values after slope/intercept scaling")

    if sform_code > 0:
        affine = np.array(
            [srows[0:4], srows[4:8], srows[8:12], [0.0, 0.0, 0.0, 1.0]], dtype=np.float64
        )
    else:
        affine = np.diag([sx, sy, sz, 1.0])

    return Volume3D(shape=(nz, ny, nx), spacing=(sz, sy, sx), data=values, affine=affine)


def write_container(records: list[TensorRecord]) -> bytes:
    seen = set()
    out = bytearray()
    out += CONTAINER_MAGIC
    out += struct.pack("<II", CONTAINER_VERSION, len(records))
    for rec in records:
        if rec.name in seen:
            raise DuplicateName(f"duplicate tensor name {rec.name!r}")
        if not rec.name:
            raise InvalidRecord("tensor names must be non-empty")
        if not rec.shape or any(d <= 0 for d in rec.shape):
            raise InvalidRecord(f"tensor {rec.name!r} has invalid shape {rec.shape}")
        seen.add(rec.name)
        values = np.ascontiguousarray(rec.values, dtype="<f4").reshape(-1)
        expect = int(np.prod(rec.shape, dtype=np.int64))
        if values.size != expect:
            raise InvalidRecord(
                f"tensor {rec.name!r}: payload has {values.size} values, shape implies {expect}"
            )
        name_bytes = rec.name.encode("utf-8")
        out += struct.pack("<I", len(name_bytes))
        out += name_bytes
        out += struct.pack("<II", DTYPE_F32, len(rec.shape))
        out += struct.pack(f"<{len(rec.shape)}Q", *rec.shape)
        out += values.tobytes()
    return bytes(out)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise Truncated(f"container truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def read_container(data: bytes) -> list[TensorRecord]:
    cur = _Cursor(data)
    if cur.take(4) != CONTAINER_MAGIC:
        raise BadMagic("not an ADCT container")
    version = cur.u32()
    if version != CONTAINER_VERSION:
        raise BadMagic(f"unsupported ADCT container version {version}")
    count = cur.u32()
    records = []
    seen = set()
    for _ in range(count):
        name_len = cur.u32()
        try:
            name = cur.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InvalidRecord(f"tensor name is not valid UTF-8: {exc}") from None
        if not name:
            raise InvalidRecord("tensor names must be non-empty")
        if name in seen:
            raise DuplicateName(f"duplicate tensor name {name!r}")
        seen.add(name)
        dtype_code = cur.u32()
        if dtype_code != DTYPE_F32:
            raise UnknownDtype(dtype_code)
        rank = cur.u32()
        if rank == 0:
            raise InvalidRecord(f"tensor {name!r} has rank 0")
        dims = tuple(cur.u64() for _ in range(rank))
        if any(d == 0 for d in dims):
            raise InvalidRecord(f"tensor {name!r} has a zero-length axis {dims}")
        nvals = 1
        for d in dims:
            nvals *= d
        payload = cur.take(nvals * 4)
        values = np.frombuffer(payload, dtype="<f4").copy()
        records.append(TensorRecord(name, dims, values))
    if cur.pos != len(data):
        raise InvalidRecord(f"{len(data) - cur.pos} trailing bytes after the last record")
    return records
