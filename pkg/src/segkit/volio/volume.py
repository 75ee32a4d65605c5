"""Volume and Sample types plus format-dispatched load/save.

Supported formats: NIfTI (.nii, .nii.gz), 2D images (.png, .jpg, .jpeg,
.bmp) and HDF5 containers (.h5, .hdf5). Arrays are always channel-first:
(C, D, H, W) for 3D volumes, (C, H, W) for 2D images.
"""

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from ..errors import (
    CorruptHeaderError,
    MalformedIndexError,
    MissingFileError,
    OutOfBoundsError,
    UnsupportedFormatError,
)
from . import nifti

NIFTI_EXTS = (".nii", ".nii.gz")
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")
HDF5_EXTS = (".h5", ".hdf5")


@dataclass(frozen=True)
class Volume:
    """A channel-first image or label array with physical spacing.

    data is (C, D, H, W) or (C, H, W); spacing has one entry per spatial
    axis (slowest first), each > 0. Label volumes hold integer class ids.
    """

    data: np.ndarray
    spacing: tuple = ()
    is_label: bool = False

    def __post_init__(self):
        if self.data.ndim not in (3, 4):
            raise ValueError(f"volume rank must be 3 or 4, got {self.data.ndim}")
        spacing = tuple(float(s) for s in self.spacing) if self.spacing else (1.0,) * (self.data.ndim - 1)
        if len(spacing) != self.data.ndim - 1:
            raise ValueError("spacing needs one entry per spatial axis")
        if any(s <= 0 for s in spacing):
            raise ValueError("spacing entries must be > 0")
        object.__setattr__(self, "spacing", spacing)
        if self.is_label and not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError("label volumes must have an integer dtype")

    @property
    def spatial_shape(self):
        return self.data.shape[1:]

    @property
    def num_channels(self):
        return self.data.shape[0]

    def astype(self, dtype):
        return replace(self, data=self.data.astype(dtype))


@dataclass
class Sample:
    """One case: an image volume, an optional label volume and a case id."""

    image: Volume
    label: Volume = None
    id: str = ""

    def __post_init__(self):
        if self.label is not None and self.label.spatial_shape != self.image.spatial_shape:
            raise ValueError(
                f"label shape {self.label.spatial_shape} does not match "
                f"image shape {self.image.spatial_shape} for case '{self.id}'"
            )


def _extension(path):
    p = str(path).lower()
    if p.endswith(".nii.gz"):
        return ".nii.gz"
    return os.path.splitext(p)[1]


def _read_image2d(path):
    from PIL import Image

    with Image.open(path) as img:
        if img.mode == "P":
            img = img.convert("RGB")
        elif img.mode == "RGBA":
            img = img.convert("RGB")
        elif img.mode == "LA":
            img = img.convert("L")
        arr = np.array(img)
    if arr.ndim == 2:
        data = arr[None]
    else:
        data = np.transpose(arr, (2, 0, 1))
    return data, (1.0, 1.0)


def _write_image2d(path, data, ext):
    from PIL import Image

    if data.ndim != 3:
        raise UnsupportedFormatError(f"{ext} can only store 2D volumes (C, H, W)")
    if not np.issubdtype(data.dtype, np.integer) and data.dtype != np.bool_:
        raise UnsupportedFormatError(
            f"{ext} needs integer intensities; convert the volume first"
        )
    c = data.shape[0]
    if c == 1:
        plane = data[0]
        if plane.dtype == np.bool_:
            plane = plane.astype(np.uint8)
        if plane.dtype == np.uint16:
            if ext != ".png":
                raise UnsupportedFormatError(f"16-bit output requires .png, not {ext}")
            img = Image.fromarray(plane, mode="I;16")
        else:
            if plane.min() < 0 or plane.max() > 255:
                raise UnsupportedFormatError("single-channel image values must fit uint8 or uint16")
            img = Image.fromarray(plane.astype(np.uint8), mode="L")
    elif c == 3:
        rgb = np.transpose(data, (1, 2, 0))
        if rgb.min() < 0 or rgb.max() > 255:
            raise UnsupportedFormatError("RGB image values must fit uint8")
        img = Image.fromarray(rgb.astype(np.uint8), mode="RGB")
    else:
        raise UnsupportedFormatError(f"{ext} supports 1 or 3 channels, got {c}")
    img.save(path)


def _read_hdf5(path):
    import h5py

    with h5py.File(path, "r") as f:
        if "image" not in f:
            raise CorruptHeaderError(f"{path}: no 'image' dataset")
        ds = f["image"]
        data = ds[()]
        spacing = tuple(float(s) for s in ds.attrs.get("spacing", ()))
    if not spacing:
        spacing = (1.0,) * (data.ndim - 1)
    return data, spacing


def _write_hdf5(path, data, spacing):
    import h5py

    with h5py.File(path, "w") as f:
        ds = f.create_dataset("image", data=data, chunks=True)
        ds.attrs["spacing"] = np.asarray(spacing, dtype=np.float64)


def load_volume(path, is_label=False):
    """Load a volume from disk.

    3D medical volumes come back as (C, D, H, W) with header spacing, 2D
    images as (C, H, W) with unit spacing.
    """
    if not os.path.isfile(path):
        raise MissingFileError(f"no such file: {path}")
    ext = _extension(path)
    if ext in NIFTI_EXTS:
        data, spacing = nifti.read_nifti(path)
    elif ext in IMAGE_EXTS:
        data, spacing = _read_image2d(path)
    elif ext in HDF5_EXTS:
        data, spacing = _read_hdf5(path)
    else:
        raise UnsupportedFormatError(f"unsupported volume extension: {path}")
    data.flags.writeable = False
    return Volume(data=data, spacing=spacing, is_label=is_label)


def save_volume(v, path, reference_meta=None):
    """Save a volume; the format follows the file extension.

    Args:
        v: Volume (or bare channel-first array).
        path: output file; parent directories are created.
        reference_meta: optional Volume (or spacing tuple) whose spacing
            overrides v's, mirroring save-with-source-header workflows.
    """
    if not isinstance(v, Volume):
        v = Volume(data=np.asarray(v))
    spacing = v.spacing
    if reference_meta is not None:
        spacing = reference_meta.spacing if isinstance(reference_meta, Volume) else tuple(reference_meta)
    parent = os.path.dirname(os.path.abspath(str(path)))
    os.makedirs(parent, exist_ok=True)
    ext = _extension(path)
    if ext in NIFTI_EXTS:
        nifti.write_nifti(path, v.data, spacing)
    elif ext in IMAGE_EXTS:
        _write_image2d(path, v.data, ext)
    elif ext in HDF5_EXTS:
        _write_hdf5(path, v.data, spacing)
    else:
        raise UnsupportedFormatError(f"unsupported volume extension: {path}")


def parse_index(csv_path):
    """Parse an index CSV with header image[,label].

    Returns a list of (image_path, label_path_or_None) preserving row order.
    """
    if not os.path.isfile(csv_path):
        raise MissingFileError(f"no such index file: {csv_path}")
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedIndexError(f"{csv_path}: empty file") from None
        header = [h.strip().lower() for h in header]
        if "image" not in header:
            raise MalformedIndexError(f"{csv_path}: header has no 'image' column")
        img_col = header.index("image")
        lbl_col = header.index("label") if "label" in header else None
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) > len(header) or len(row) <= img_col:
                raise MalformedIndexError(f"{csv_path}: line {lineno} has {len(row)} cells")
            image = row[img_col].strip()
            if not image:
                raise MalformedIndexError(f"{csv_path}: line {lineno} has an empty image cell")
            label = None
            if lbl_col is not None and lbl_col < len(row):
                label = row[lbl_col].strip() or None
            records.append((image, label))
    return records


def read_subvolume(path, start, size):
    """Read a region of a stored volume.

    start and size have one entry per array axis (channel included) and
    must select a region inside the stored extent. For HDF5 files only the
    requested chunk range is read.
    """
    start = tuple(int(s) for s in start)
    size = tuple(int(s) for s in size)
    if len(start) != len(size):
        raise ValueError("start and size must have equal length")
    ext = _extension(path)
    if ext in HDF5_EXTS:
        import h5py

        if not os.path.isfile(path):
            raise MissingFileError(f"no such file: {path}")
        with h5py.File(path, "r") as f:
            ds = f["image"]
            shape = ds.shape
            _check_region(shape, start, size, path)
            sel = tuple(slice(b, b + n) for b, n in zip(start, size))
            data = ds[sel]
            spacing = tuple(float(s) for s in ds.attrs.get("spacing", ()))
        if not spacing:
            spacing = (1.0,) * (data.ndim - 1)
        return Volume(data=data, spacing=spacing)
    full = load_volume(path)
    _check_region(full.data.shape, start, size, path)
    sel = tuple(slice(b, b + n) for b, n in zip(start, size))
    return Volume(data=full.data[sel].copy(), spacing=full.spacing, is_label=full.is_label)


def _check_region(shape, start, size, path):
    if len(start) != len(shape):
        raise OutOfBoundsError(
            f"{path}: region rank {len(start)} does not match volume rank {len(shape)}"
        )
    for b, n, extent in zip(start, size, shape):
        if b < 0 or n < 1 or b + n > extent:
            raise OutOfBoundsError(
                f"{path}: region start={start} size={size} exceeds extent {tuple(shape)}"
            )
