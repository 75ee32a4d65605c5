"""Segmentation evaluation: overlap metrics, surface distances, CSV reports.

Boundary voxels are foreground voxels with a face-adjacent background
neighbor or lying on the volume edge. Distances are measured between the
two boundary point sets in physical units (voxel indices scaled by
spacing). Empty masks make surface distances undefined; evaluate_cases
reports them as missing values rather than sentinel numbers.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import EmptyMaskError, MissingFileError, ShapeError
from .volio.volume import IMAGE_EXTS, NIFTI_EXTS, load_volume

OVERLAP_METRICS = ("dice", "iou", "sensitivity", "specificity", "accuracy", "precision")
SURFACE_METRICS = ("assd", "hd", "hd95")


@dataclass
class MetricReport:
    """Per-case rows plus mean/std summary rows of (case, class, metric, value)."""

    rows: list = field(default_factory=list)
    summary: list = field(default_factory=list)


def overlap_metrics(pred_mask, gt_mask):
    """Confusion-count metrics for one binary mask pair.

    Both masks empty counts as a perfect match (dice = iou = 1); any other
    zero-denominator ratio is vacuously 1 when there was nothing to find
    and 0 when positives were required but missed.
    """
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = float(np.count_nonzero(pred & gt))
    fp = float(np.count_nonzero(pred & ~gt))
    fn = float(np.count_nonzero(~pred & gt))
    tn = float(np.count_nonzero(~pred & ~gt))

    def ratio(num, den):
        return num / den if den > 0 else 1.0

    return {
        "dice": ratio(2 * tp, 2 * tp + fp + fn),
        "iou": ratio(tp, tp + fp + fn),
        "sensitivity": ratio(tp, tp + fn),
        "specificity": ratio(tn, tn + fp),
        "accuracy": (tp + tn) / max(tp + tn + fp + fn, 1.0),
        "precision": ratio(tp, tp + fp),
    }


def boundary_voxels(mask):
    """Foreground voxels with a face-adjacent background voxel or on the edge."""
    mask = np.asarray(mask).astype(bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~eroded


def surface_distances(pred_mask, gt_mask, spacing=None):
    """ASSD / HD / HD95 between two nonempty masks under physical spacing.

    HD is the max of the two directed maxima; HD95 the 95th percentile
    (linear interpolation) and ASSD the mean of the pooled directed
    distance set.
    """
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        raise EmptyMaskError("surface distances need nonempty prediction and ground truth")
    if spacing is None:
        spacing = (1.0,) * pred.ndim
    spacing = np.asarray(spacing, dtype=np.float64)

    pred_pts = np.argwhere(boundary_voxels(pred)) * spacing
    gt_pts = np.argwhere(boundary_voxels(gt)) * spacing
    d_pg = cKDTree(gt_pts).query(pred_pts)[0]
    d_gp = cKDTree(pred_pts).query(gt_pts)[0]
    pooled = np.concatenate([d_pg, d_gp])
    return {
        "assd": float(pooled.mean()),
        "hd": float(max(d_pg.max(), d_gp.max())),
        "hd95": float(np.percentile(pooled, 95)),
    }


def _list_label_files(directory):
    exts = NIFTI_EXTS + IMAGE_EXTS + (".h5", ".hdf5")
    names = [
        n for n in sorted(os.listdir(directory))
        if n.lower().endswith(exts) and os.path.isfile(os.path.join(directory, n))
    ]
    return names


def _case_id(filename):
    name = filename
    for ext in (".nii.gz", ".nii", ".png", ".jpg", ".jpeg", ".bmp", ".h5", ".hdf5"):
        if name.lower().endswith(ext):
            return name[: -len(ext)]
    return os.path.splitext(name)[0]


def evaluate_cases(pred_dir, gt_dir, classes, metric_names, cases=None):
    """Evaluate every ground-truth case against its same-named prediction.

    Returns a MetricReport with one row per case x class x metric in
    deterministic (case, class, metric) order, followed by mean/std
    summary rows computed over the cases with defined values. `cases`
    optionally restricts evaluation to the given ground-truth filenames
    (e.g. a test split living in a directory of all labels).
    """
    if not os.path.isdir(gt_dir):
        raise MissingFileError(f"no such directory: {gt_dir}")
    if not os.path.isdir(pred_dir):
        raise MissingFileError(f"no such directory: {pred_dir}")
    for m in metric_names:
        if m not in OVERLAP_METRICS + SURFACE_METRICS:
            raise ValueError(f"unknown metric '{m}'")
    gt_files = _list_label_files(gt_dir)
    if cases is not None:
        wanted = set(cases)
        missing = wanted - set(gt_files)
        if missing:
            raise MissingFileError(f"cases not found in {gt_dir}: {sorted(missing)}")
        gt_files = [f for f in gt_files if f in wanted]
    if not gt_files:
        raise MissingFileError(f"no label volumes found in {gt_dir}")

    report = MetricReport()
    values = {}
    for fname in gt_files:
        gt_path = os.path.join(gt_dir, fname)
        pred_path = os.path.join(pred_dir, fname)
        if not os.path.isfile(pred_path):
            raise MissingFileError(f"missing prediction for case {fname}")
        gt_vol = load_volume(gt_path, is_label=True)
        pred_vol = load_volume(pred_path, is_label=True)
        gt = gt_vol.data[0] if gt_vol.data.shape[0] == 1 else gt_vol.data
        pred = pred_vol.data[0] if pred_vol.data.shape[0] == 1 else pred_vol.data
        if gt.shape != pred.shape:
            raise ShapeError(f"{fname}: prediction shape {pred.shape} vs label {gt.shape}")
        case = _case_id(fname)
        for cls in classes:
            pm, gm = pred == cls, gt == cls
            overlaps = overlap_metrics(pm, gm)
            surfaces = None
            for metric in metric_names:
                if metric in OVERLAP_METRICS:
                    value = overlaps[metric]
                else:
                    if surfaces is None:
                        try:
                            surfaces = surface_distances(pm, gm, gt_vol.spacing)
                        except EmptyMaskError:
                            surfaces = {m: None for m in SURFACE_METRICS}
                    value = surfaces[metric]
                report.rows.append((case, cls, metric, value))
                values.setdefault((cls, metric), []).append(value)

    for cls in classes:
        for metric in metric_names:
            defined = [v for v in values.get((cls, metric), []) if v is not None]
            mean = float(np.mean(defined)) if defined else None
            std = float(np.std(defined)) if defined else None
            report.summary.append(("mean", cls, metric, mean))
            report.summary.append(("std", cls, metric, std))
    return report


def write_csv(report, path):
    """Write a MetricReport as CSV with header case,class,metric,value.

    Values are formatted to 4 decimal places; missing values are empty cells.
    """
    parent = os.path.dirname(os.path.abspath(str(path)))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["case", "class", "metric", "value"])
        for case, cls, metric, value in list(report.rows) + list(report.summary):
            writer.writerow([case, cls, metric, "" if value is None else f"{value:.4f}"])
