"""Synthetic desk-scale datasets and annotation corruption.

gen_synthetic_dataset draws ellipse (2D) or ellipsoid (3D) phantoms with
separable per-class intensity bands and enough shape variety that
supervision quality shows up in the scores. degrade_labels and
extract_scribbles corrupt dense labels into the noisy and sparse
annotation regimes. Everything is deterministic under its seed.
"""

import csv
import os

import numpy as np

from .volio.volume import Volume, save_volume

FG_FRACTION_RANGE = (0.02, 0.5)
_MAX_RESAMPLE = 60


def _ellipse_mask(shape, center, axes, angle, rng):
    """Boolean rotated-ellipse/ellipsoid mask; rotation in the last two axes."""
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    rel = [g - c for g, c in zip(grids, center)]
    cos, sin = np.cos(angle), np.sin(angle)
    u = cos * rel[-2] + sin * rel[-1]
    v = -sin * rel[-2] + cos * rel[-1]
    rel[-2], rel[-1] = u, v
    q = sum((r / a) ** 2 for r, a in zip(rel, axes))
    return q <= 1.0


def _draw_case(shape, n_classes, rng):
    """One (image, label) pair with foreground fraction inside bounds.

    Difficulty comes from shape variety (one to three blobs per present
    class, sizes down to 7% of the extent, centers near the borders);
    the per-class intensity bands stay separable so that supervision
    quality, not irreducible pixel ambiguity, dominates the scores.
    """
    total = float(np.prod(shape))
    for _ in range(_MAX_RESAMPLE):
        label = np.zeros(shape, dtype=np.uint8)
        blobs = []
        n_present = int(rng.integers(1, n_classes))
        classes = rng.choice(np.arange(1, n_classes), size=n_present, replace=False)
        for cls in classes:
            for _blob in range(int(rng.integers(1, 4))):
                axes = [rng.uniform(0.07, 0.22) * s for s in shape]
                center = [rng.uniform(0.18, 0.82) * s for s in shape]
                angle = rng.uniform(0.0, np.pi)
                mask = _ellipse_mask(shape, center, axes, angle, rng)
                label[mask] = cls
                blobs.append((cls, mask))
        frac = float((label > 0).sum()) / total
        if FG_FRACTION_RANGE[0] <= frac <= FG_FRACTION_RANGE[1]:
            break
    else:
        raise RuntimeError("could not draw a case within the foreground bounds")

    # disjoint per-class intensity bands; each blob draws its own level so
    # classes vary internally but never overlap across classes
    image = np.full(shape, rng.uniform(0.10, 0.22), dtype=np.float64)
    for cls, mask in blobs:
        lo = 0.34 + 0.22 * (cls - 1)
        image[mask & (label == cls)] = rng.uniform(lo, lo + 0.14)
    image = image + rng.normal(0.0, 0.05, shape)
    image = np.clip(image, 0.0, 1.0)
    return np.round(image * 255.0).astype(np.uint8), label


def gen_synthetic_dataset(n_cases, size, n_classes, seed, out_dir):
    """Write a deterministic phantom dataset plus train/valid/test CSVs.

    size is a scalar or tuple: two extents give PNG pairs, three give
    compressed volume files. Cases are split 70/10/20 after shuffling.
    Returns {"train": path, "valid": path, "test": path}.
    """
    if n_classes < 2:
        raise ValueError("need at least one foreground class")
    shape = (size, size) if np.isscalar(size) else tuple(int(s) for s in size)
    if len(shape) not in (2, 3):
        raise ValueError(f"size must be 2D or 3D, got {shape}")
    ext = ".png" if len(shape) == 2 else ".nii.gz"
    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)

    rows = []
    for i in range(n_cases):
        image, label = _draw_case(shape, n_classes, rng)
        name = f"case_{i:04d}{ext}"
        save_volume(Volume(image[None]), os.path.join(out_dir, "images", name))
        save_volume(
            Volume(label[None], is_label=True), os.path.join(out_dir, "labels", name)
        )
        rows.append((f"images/{name}", f"labels/{name}"))

    order = rng.permutation(n_cases)
    n_train = int(round(n_cases * 0.7))
    n_valid = int(round(n_cases * 0.1))
    splits = {
        "train": order[:n_train],
        "valid": order[n_train : n_train + n_valid],
        "test": order[n_train + n_valid :],
    }
    paths = {}
    for split, idx in splits.items():
        path = os.path.join(out_dir, f"{split}.csv")
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["image", "label"])
            for j in sorted(idx):
                writer.writerow(rows[j])
        paths[split] = path
    return paths


def _disk_footprint(radius, ndim):
    grids = np.meshgrid(*[np.arange(-radius, radius + 1)] * ndim, indexing="ij")
    return sum(g**2 for g in grids) <= radius**2


def degrade_labels(label, mode, magnitude, seed=0):
    """Corrupt a dense label map: dilate, erode, or edge_distort.

    dilate/erode apply the grey morphological op with a disk of
    radius=magnitude. edge_distort warps the map by a smooth random
    displacement field whose largest vector has length=magnitude.
    magnitude 0 is the identity for every mode.
    """
    from scipy import ndimage

    label = np.asarray(label)
    if not np.issubdtype(label.dtype, np.integer):
        raise ValueError(f"label map must be integer, got {label.dtype}")
    if mode not in ("dilate", "erode", "edge_distort"):
        raise ValueError(f"unknown mode '{mode}'; known: dilate, erode, edge_distort")
    magnitude = int(magnitude) if mode != "edge_distort" else float(magnitude)
    if magnitude < 0:
        raise ValueError("magnitude must be >= 0")
    if magnitude == 0:
        return label.copy()

    if mode in ("dilate", "erode"):
        footprint = _disk_footprint(int(magnitude), label.ndim)
        op = ndimage.grey_dilation if mode == "dilate" else ndimage.grey_erosion
        return op(label, footprint=footprint).astype(label.dtype)

    rng = np.random.default_rng(seed)
    field = np.stack([
        ndimage.gaussian_filter(rng.normal(0.0, 1.0, label.shape), sigma=4.0)
        for _ in range(label.ndim)
    ])
    norm = np.sqrt((field**2).sum(axis=0)).max()
    if norm > 0:
        field = field / norm * magnitude
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in label.shape], indexing="ij")
    coords = [g + f for g, f in zip(grids, field)]
    return ndimage.map_coordinates(label, coords, order=0, mode="nearest").astype(label.dtype)


def _skeleton_walk(skeleton, target, rng):
    """Depth-first walk over skeleton pixels, stopping at `target` pixels."""
    pixels = [tuple(p) for p in np.argwhere(skeleton)]
    if not pixels:
        return []
    pixel_set = set(pixels)
    start = pixels[int(rng.integers(len(pixels)))]
    seen = {start}
    stack = [start]
    visited = []
    offsets = [
        (dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)
    ]
    while stack and len(visited) < target:
        node = stack.pop()
        visited.append(node)
        neighbors = [
            (node[0] + dy, node[1] + dx)
            for dy, dx in offsets
            if (node[0] + dy, node[1] + dx) in pixel_set
        ]
        rng.shuffle(neighbors)
        for nb in neighbors:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return visited


def extract_scribbles(label, seed=0, ignore_value=None, fraction_range=(0.1, 0.3)):
    """Reduce a dense 2D label map to curve-shaped scribbles.

    For every class present (background included) a connected walk over
    10-30% of the class skeleton is kept; classes too thin to skeletonize
    keep a single pixel. All other pixels are set to ignore_value
    (default: max id + 1). Retained pixels always match the dense label.
    """
    from skimage.morphology import skeletonize

    label = np.asarray(label)
    if label.ndim != 2:
        raise ValueError(f"scribble extraction is 2D only, got rank {label.ndim}")
    if not np.issubdtype(label.dtype, np.integer):
        raise ValueError(f"label map must be integer, got {label.dtype}")
    if ignore_value is None:
        ignore_value = int(label.max()) + 1
    rng = np.random.default_rng(seed)

    out = np.full_like(label, ignore_value)
    for cls in np.unique(label):
        mask = label == cls
        skeleton = skeletonize(mask)
        frac = rng.uniform(*fraction_range)
        n_skel = int(skeleton.sum())
        kept = _skeleton_walk(skeleton, max(1, int(round(frac * n_skel))), rng)
        if not kept:
            flat = np.argwhere(mask)
            kept = [tuple(flat[int(rng.integers(len(flat)))])]
        for y, x in kept:
            out[y, x] = cls
    return out
