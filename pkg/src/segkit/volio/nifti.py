"""Minimal NIfTI-1 reader and writer.

Handles the single-file variant (.nii and .nii.gz) with a 348-byte header.
Only the fields this framework needs are interpreted: dim, datatype, bitpix,
pixdim, vox_offset and the scaling slope/intercept. Data is returned
channel-first: (C, D, H, W) for 4D files, (1, D, H, W) for 3D and (1, H, W)
for 2D. Writing always emits little-endian data with slope 1 / intercept 0,
and gzip members are created with mtime=0 so identical volumes produce
byte-identical .nii.gz files.
"""

import gzip
import struct

import numpy as np

from ..errors import CorruptHeaderError, UnsupportedFormatError

HEADER_SIZE = 348
VOX_OFFSET = 352

_CODE_TO_DTYPE = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
}
_DTYPE_TO_CODE = {np.dtype(v).name: k for k, v in _CODE_TO_DTYPE.items()}


def _read_bytes(path):
    if str(path).endswith(".gz"):
        with gzip.open(path, "rb") as f:
            return f.read()
    with open(path, "rb") as f:
        return f.read()


def read_nifti(path):
    """Decode a .nii/.nii.gz file.

    Returns:
        (data, spacing): channel-first float/int array and per-spatial-axis
        spacing in mm, ordered to match the array axes (slowest first).
    """
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise CorruptHeaderError(f"{path}: file shorter than a NIfTI-1 header")
    if struct.unpack_from("<i", raw, 0)[0] == HEADER_SIZE:
        bo = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        bo = ">"
    else:
        raise CorruptHeaderError(f"{path}: sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise CorruptHeaderError(f"{path}: bad magic {magic!r}")
    if magic == b"ni1\x00":
        raise UnsupportedFormatError(f"{path}: two-file NIfTI pairs are not supported")

    dim = struct.unpack_from(bo + "8h", raw, 40)
    datatype = struct.unpack_from(bo + "h", raw, 70)[0]
    pixdim = struct.unpack_from(bo + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(bo + "f", raw, 108)[0])
    slope = struct.unpack_from(bo + "f", raw, 112)[0]
    inter = struct.unpack_from(bo + "f", raw, 116)[0]

    ndim = dim[0]
    if ndim < 2 or ndim > 7:
        raise CorruptHeaderError(f"{path}: dim[0]={ndim} out of range")
    shape = [max(1, d) for d in dim[1 : 1 + ndim]]
    if ndim > 4:
        if any(s != 1 for s in shape[4:]):
            raise UnsupportedFormatError(f"{path}: more than 4 non-singleton dims")
        shape = shape[:4]
        ndim = 4
    if datatype not in _CODE_TO_DTYPE:
        raise CorruptHeaderError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_CODE_TO_DTYPE[datatype]).newbyteorder(bo)

    count = int(np.prod(shape))
    if vox_offset < HEADER_SIZE or len(raw) < vox_offset + count * dtype.itemsize:
        raise CorruptHeaderError(f"{path}: data section truncated")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    # Disk layout is Fortran order (x fastest); a C-order reshape with the
    # axis list reversed gives (t, z, y, x) directly.
    arr = flat.reshape(shape[::-1]).astype(dtype.newbyteorder("="), copy=True)
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr.astype(np.float32) * slope + inter

    sp = [p if p > 0 else 1.0 for p in pixdim[1 : 1 + min(ndim, 3)]]
    if ndim == 2:
        data = arr[None]                       # (1, H, W)
        spacing = (float(sp[1]), float(sp[0]))
    elif ndim == 3:
        data = arr[None]                       # (1, D, H, W)
        spacing = (float(sp[2]), float(sp[1]), float(sp[0]))
    else:
        data = arr                             # (C, D, H, W)
        spacing = (float(sp[2]), float(sp[1]), float(sp[0]))
    return data, spacing


def write_nifti(path, data, spacing):
    """Encode a channel-first array to .nii or .nii.gz.

    Args:
        data: (C, D, H, W) array, or (1, H, W) for a 2D image.
        spacing: per-spatial-axis size in mm, slowest axis first.
    """
    data = np.asarray(data)
    if data.ndim == 4:
        c = data.shape[0]
        if c == 1:
            ndim, shape = 3, data.shape[1:]
        else:
            ndim, shape = 4, data.shape
        sz, sy, sx = (float(s) for s in spacing)
    elif data.ndim == 3:
        if data.shape[0] != 1:
            raise UnsupportedFormatError(
                "multi-channel 2D volumes cannot be written as NIfTI; use PNG or HDF5"
            )
        ndim, shape = 2, data.shape[1:]
        sy, sx = (float(s) for s in spacing)
        sz = 1.0
    else:
        raise UnsupportedFormatError(f"cannot write array of rank {data.ndim} as NIfTI")

    if data.dtype == np.bool_:
        data = data.astype(np.uint8)
    code = _DTYPE_TO_CODE.get(data.dtype.name)
    if code is None:
        data = data.astype(np.float32)
        code = _DTYPE_TO_CODE[data.dtype.name]
    data = data.astype(data.dtype.newbyteorder("<"), copy=False)

    dim = [1] * 8
    dim[0] = ndim
    # shape is (slowest .. fastest); dim[1] must be the fastest axis (x).
    for i, extent in enumerate(reversed(shape)):
        dim[1 + i] = extent
    pixdim = [0.0] * 8
    pixdim[1], pixdim[2], pixdim[3] = sx, sy, sz

    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)      # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)      # scl_inter
    struct.pack_into("<b", hdr, 123, 10)       # xyzt_units: mm | sec
    struct.pack_into("<h", hdr, 254, 1)        # sform_code
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, 0.0)
    hdr[344:348] = b"n+1\x00"

    payload = bytes(hdr) + data.tobytes(order="C")
    if str(path).endswith(".gz"):
        # filename="" and mtime=0 keep the gzip member byte-deterministic
        with open(path, "wb") as f:
            with gzip.GzipFile(filename="", fileobj=f, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(payload)
