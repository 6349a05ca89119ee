"""
NIfTI-1 reader / writer (uncompressed single-file subset) and CSV output

Supported:
- single-file .nii ("n+1" magic), little- or big-endian headers (detected
  from sizeof_hdr); "ni1" headers parse but the two-file layout is rejected
- datatypes 2 (uint8), 4 (int16), 16 (float32)
- 3D data (trailing dims of size 1 are tolerated)

Voxel order on disk is the NIfTI order (first axis fastest), which maps
file axis 1 to array axis 0. Writes go to a temp file that is renamed over
the target, so a failed write never leaves a partial file.
"""
import csv
import io
import logging
import os
import tempfile
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from simreg.models.volumes import DisplacementField, LabelMap, Volume

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
VOX_OFFSET = 352
GZIP_MAGIC = b"\x1f\x8b"

HEADER_DTD = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
HEADER_DTYPE = np.dtype(HEADER_DTD)

# datatype code -> (numpy type, bitpix)
DATATYPES = {
    2: (np.uint8, 8),
    4: (np.int16, 16),
    16: (np.float32, 32),
}
XYZT_UNITS_MM = 2


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI input"""


# ============= HEADER =============

def detect_endianness(raw: bytes) -> str:
    """'<' or '>' from the sizeof_hdr field"""
    if len(raw) < HEADER_SIZE:
        raise NiftiError("truncated header")
    if int(np.frombuffer(raw[:4], dtype="<i4")[0]) == HEADER_SIZE:
        return "<"
    if int(np.frombuffer(raw[:4], dtype=">i4")[0]) == HEADER_SIZE:
        return ">"
    raise NiftiError("bad header size (sizeof_hdr must be 348)")


def parse_header(raw: bytes) -> np.ndarray:
    """Parsed header record in native field values; accepts n+1 and ni1 magic"""
    if raw[:2] == GZIP_MAGIC:
        raise NiftiError("compressed files are not supported")
    endian = detect_endianness(raw)
    header = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(endian))[0]
    if header["magic"] not in (b"n+1", b"ni1"):
        raise NiftiError(f"bad magic {bytes(header['magic'])!r}")
    return header


def build_header(dims: Sequence[int], spacing: Sequence[float], datatype: int) -> np.ndarray:
    """Little-endian single-file header, scl_slope 1, scl_inter 0"""
    header = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    header["sizeof_hdr"] = HEADER_SIZE
    header["dim"] = [3, *dims, 1, 1, 1, 1]
    header["datatype"] = datatype
    header["bitpix"] = DATATYPES[datatype][1]
    header["pixdim"] = [1.0, *spacing, 1.0, 1.0, 1.0, 1.0]
    header["vox_offset"] = VOX_OFFSET
    header["scl_slope"] = 1.0
    header["scl_inter"] = 0.0
    header["xyzt_units"] = XYZT_UNITS_MM
    header["magic"] = b"n+1"
    return header


# ============= READING =============

def _decode(raw: bytes) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    header = parse_header(raw)
    if header["magic"] == b"ni1":
        raise NiftiError("two-file NIfTI (.hdr/.img) is not supported")

    dim = [int(d) for d in header["dim"]]
    ndim = dim[0]
    if not 3 <= ndim <= 7 or any(d != 1 for d in dim[4:ndim + 1]):
        raise NiftiError(f"only 3D volumes are supported, got dim {dim[:ndim + 1]}")
    dims = tuple(dim[1:4])
    if min(dims) < 1:
        raise NiftiError(f"invalid dims {dims}")

    code = int(header["datatype"])
    if code not in DATATYPES:
        raise NiftiError(f"unsupported datatype {code}")
    endian = detect_endianness(raw)
    dtype = np.dtype(DATATYPES[code][0]).newbyteorder(endian)

    offset = int(header["vox_offset"])
    if offset < VOX_OFFSET:
        raise NiftiError(f"bad vox_offset {offset} (must be >= {VOX_OFFSET})")
    count = int(np.prod(dims))
    end = offset + count * dtype.itemsize
    if len(raw) < end:
        raise NiftiError("truncated payload")
    data = np.frombuffer(raw[offset:end], dtype=dtype).reshape(dims, order="F").astype(np.float64)

    slope, inter = float(header["scl_slope"]), float(header["scl_inter"])
    if slope != 0.0 and (slope != 1.0 or inter != 0.0):
        data = data * slope + inter

    spacing = []
    for s in header["pixdim"][1:4]:
        s = abs(float(s))
        if s == 0.0 or not np.isfinite(s):
            logger.warning(f"⚠️  Invalid pixdim {s}, using 1.0 mm")
            s = 1.0
        spacing.append(s)
    return data, tuple(spacing)


def read_nifti_bytes(raw: bytes, as_labels: bool = False, num_classes: Optional[int] = None):
    """
    Decode an in-memory .nii file.

    Returns:
        Volume, or LabelMap when as_labels (num_classes defaults to max + 1)
    """
    data, spacing = _decode(raw)
    if not as_labels:
        return Volume(data, spacing)
    if not np.all(data == np.round(data)) or data.min() < 0:
        raise NiftiError("label volumes must hold non-negative integers")
    labels = data.astype(np.int64)
    return LabelMap(labels, num_classes if num_classes is not None else int(labels.max()) + 1)


def read_nifti(path, as_labels: bool = False, num_classes: Optional[int] = None):
    path = Path(path)
    if path.suffix == ".hdr":
        raise NiftiError("two-file NIfTI (.hdr/.img) is not supported")
    return read_nifti_bytes(path.read_bytes(), as_labels=as_labels, num_classes=num_classes)


# ============= WRITING =============

def atomic_write_bytes(target, payload: bytes) -> Path:
    """Write to a temp file in the target directory, then rename over target"""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return target


def encode_nifti(obj, spacing: Optional[Sequence[float]] = None) -> bytes:
    """Serialize a Volume (float32) or LabelMap (uint8) to .nii bytes"""
    if isinstance(obj, LabelMap):
        if obj.num_classes > 256:
            raise ValueError(f"label maps with more than 256 classes cannot be stored as uint8 ({obj.num_classes})")
        data = obj.labels.astype(np.uint8)
        code = 2
        spacing = spacing or (1.0, 1.0, 1.0)
    elif isinstance(obj, Volume):
        data = obj.data.astype("<f4")
        code = 16
        spacing = spacing or obj.spacing
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as NIfTI")

    header = build_header(data.shape, spacing, code)
    extension = b"\x00" * (VOX_OFFSET - HEADER_SIZE)
    return header.tobytes() + extension + data.tobytes(order="F")


def write_nifti(obj, path, spacing: Optional[Sequence[float]] = None) -> Path:
    """Write a Volume or LabelMap to an uncompressed .nii file"""
    path = atomic_write_bytes(path, encode_nifti(obj, spacing))
    logger.debug(f"Wrote {path}")
    return path


def field_paths(stem) -> Tuple[Path, Path, Path]:
    stem = Path(stem)
    return tuple(stem.with_name(f"{stem.name}.{axis}.nii") for axis in "xyz")


def write_field(field: DisplacementField, stem, spacing: Sequence[float] = (1.0, 1.0, 1.0)):
    """One float32 file per component: <stem>.x.nii, <stem>.y.nii, <stem>.z.nii"""
    paths = field_paths(stem)
    for component, path in zip(field.vectors, paths):
        write_nifti(Volume(component, spacing), path)
    return paths


def read_field(stem) -> DisplacementField:
    components = [read_nifti(path).data for path in field_paths(stem)]
    return DisplacementField(np.stack(components))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Atomic CSV write with a fixed column count"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        row = list(row)
        if len(row) != len(header):
            raise ValueError(f"CSV row has {len(row)} columns, header has {len(header)}")
        writer.writerow(row)
    return atomic_write_bytes(path, buffer.getvalue().encode("utf-8"))
