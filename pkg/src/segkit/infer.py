"""Whole-volume inference: sliding windows, TTA, ensembling, post-processing.

All entry points take a Volume (or a channel-first array) and return a
(K, *spatial) float32 probability map in the original image space.
Overlapping windows are fused by uniform averaging; volumes smaller than
the window (or not divisible by the network's downsampling factor) are
padded symmetrically with the per-channel minimum and cropped back.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ShapeError
from .volio.volume import Volume

INVERTIBLE_TTA = ("flip_w", "flip_h", "flip_d")


@dataclass
class InferSpec:
    """Inference settings: window/stride, TTA kinds and checkpoint list."""

    window: tuple = None          # None: whole volume in one pass
    stride: tuple = None          # default: window / 2
    tta_transforms: tuple = ()
    checkpoints: tuple = ()

    def __post_init__(self):
        if self.window is not None:
            self.window = tuple(int(w) for w in self.window)
            if any(w < 1 for w in self.window):
                raise ValueError("window extents must be >= 1")
            if self.stride is None:
                self.stride = tuple(max(1, w // 2) for w in self.window)
            self.stride = tuple(int(s) for s in self.stride)
            if len(self.stride) != len(self.window):
                raise ValueError("stride rank must match window rank")
            if any(s < 1 or s > w for s, w in zip(self.stride, self.window)):
                raise ValueError("stride must be in [1, window] per axis")
        self.tta_transforms = tuple(self.tta_transforms)
        for kind in self.tta_transforms:
            if kind != "identity" and kind not in INVERTIBLE_TTA:
                raise ValueError(
                    f"TTA kind '{kind}' is not invertible; allowed: {INVERTIBLE_TTA}"
                )
        self.checkpoints = tuple(self.checkpoints)


def _as_array(volume):
    if isinstance(volume, Volume):
        return np.asarray(volume.data, dtype=np.float32)
    arr = np.asarray(volume, dtype=np.float32)
    if arr.ndim < 3:
        raise ShapeError("expected a channel-first volume (C, *spatial)")
    return arr


def _net_multiple(net):
    spec = getattr(net, "spec", None)
    return getattr(spec, "spatial_multiple", 1) if spec is not None else 1


def _pad_spatial(x, target):
    """Symmetric pad to `target` spatial extents with per-channel minimum."""
    spatial = x.shape[1:]
    before = [(t - s) // 2 if t > s else 0 for s, t in zip(spatial, target)]
    after = [t - s - b if t > s else 0 for s, t, b in zip(spatial, target, before)]
    if not any(before) and not any(after):
        return x, None
    padded = np.stack([
        np.pad(c, list(zip(before, after)), mode="constant", constant_values=float(c.min()))
        for c in x
    ])
    return padded, (tuple(before), tuple(spatial))


def _crop_back(arr, pad_info):
    if pad_info is None:
        return arr
    before, orig = pad_info
    sel = (slice(None),) + tuple(slice(b, b + s) for b, s in zip(before, orig))
    return arr[sel]


def _window_starts(extent, window, stride):
    if window >= extent:
        return [0]
    starts = list(range(0, extent - window + 1, stride))
    if starts[-1] != extent - window:
        starts.append(extent - window)
    return starts


def _forward_probs(net, x_np):
    """One padded forward pass; multi-output networks contribute output 0."""
    module = isinstance(net, torch.nn.Module)
    if module:
        was_training = net.training
        net.eval()
    try:
        with torch.no_grad():
            out = net(torch.from_numpy(x_np[None]))
            if isinstance(out, (tuple, list)):
                out = out[0]
            probs = torch.softmax(out, dim=1)[0].numpy()
    finally:
        if module:
            net.train(was_training)
    return probs


def sliding_window_infer(net, volume, spec=None):
    """Tile the volume with the configured window and average the overlaps.

    Every voxel is covered at least once; window positions step by
    `stride` and the final position per axis is clamped to the volume
    edge. Returns (K, *spatial) probabilities in the original space.
    """
    spec = spec or InferSpec()
    x = _as_array(volume)
    spatial = x.shape[1:]
    multiple = _net_multiple(net)

    if spec.window is None:
        target = tuple(-(-s // multiple) * multiple for s in spatial)
        padded, pad_info = _pad_spatial(x, target)
        probs = _forward_probs(net, padded)
        return np.ascontiguousarray(_crop_back(probs, pad_info), dtype=np.float32)

    window = spec.window
    if len(window) != len(spatial):
        raise ShapeError(f"window rank {len(window)} does not match volume rank {len(spatial)}")
    if any(w % multiple for w in window):
        raise ShapeError(f"window {window} must be divisible by the network multiple {multiple}")
    target = tuple(max(s, w) for s, w in zip(spatial, window))
    padded, pad_info = _pad_spatial(x, target)
    pspatial = padded.shape[1:]

    starts = [_window_starts(e, w, s) for e, w, s in zip(pspatial, window, spec.stride)]
    grids = np.meshgrid(*[np.arange(len(s)) for s in starts], indexing="ij")
    prob_sum = None
    count = np.zeros(pspatial, dtype=np.float32)
    for flat in zip(*(g.ravel() for g in grids)):
        origin = tuple(starts[ax][i] for ax, i in enumerate(flat))
        sel = (slice(None),) + tuple(slice(o, o + w) for o, w in zip(origin, window))
        win_probs = _forward_probs(net, np.ascontiguousarray(padded[sel]))
        if prob_sum is None:
            prob_sum = np.zeros((win_probs.shape[0],) + pspatial, dtype=np.float32)
        prob_sum[sel] += win_probs
        count[sel[1:]] += 1.0
    probs = prob_sum / count[None]
    return np.ascontiguousarray(_crop_back(probs, pad_info), dtype=np.float32)


_FLIP_OFFSET = {"flip_w": 1, "flip_h": 2, "flip_d": 3}


def _flip_axis(kind, ndim_spatial):
    ax = ndim_spatial - _FLIP_OFFSET[kind]
    if ax < 0:
        raise ValueError(f"TTA kind '{kind}' needs a {_FLIP_OFFSET[kind]}D volume")
    return ax


def tta_infer(net, volume, spec=None):
    """Average sliding-window predictions over flip-augmented views.

    Each configured transform is applied to the input, inferred, inverted
    back and averaged together with the identity pass.
    """
    spec = spec or InferSpec()
    x = _as_array(volume)
    n_spatial = x.ndim - 1
    total = sliding_window_infer(net, x, spec)
    passes = 1
    for kind in spec.tta_transforms:
        if kind == "identity":
            view = x
        else:
            view = np.flip(x, axis=_flip_axis(kind, n_spatial) + 1).copy()
        probs = sliding_window_infer(net, view, spec)
        if kind != "identity":
            probs = np.flip(probs, axis=_flip_axis(kind, n_spatial) + 1).copy()
        total = total + probs
        passes += 1
    return (total / passes).astype(np.float32)


def ensemble_infer(members, volume, spec=None, base_net=None):
    """Mean probability map over ensemble members.

    Members are modules/callables, or checkpoint paths loaded into copies
    of `base_net`. Each member runs the full TTA + sliding-window path.
    """
    from . import nets as _nets

    members = list(members)
    if not members:
        raise ValueError("ensemble needs at least one member")
    total = None
    for member in members:
        if isinstance(member, (str, bytes)) or hasattr(member, "__fspath__"):
            if base_net is None:
                raise ValueError("checkpoint members require base_net")
            net = _nets.clone_network(base_net)
            _nets.load_checkpoint(member, net=net)
        else:
            net = member
        probs = tta_infer(net, volume, spec)
        total = probs if total is None else total + probs
    return (total / len(members)).astype(np.float32)


def largest_component_postprocess(label_map, per_class=True):
    """Keep only the largest face-connected component per foreground class.

    With per_class=False a single largest component of the union foreground
    is kept. Ties go to the component labeled first in scan order. Never
    increases foreground and leaves background-only maps unchanged.
    """
    from scipy import ndimage

    label_map = np.asarray(label_map)
    out = label_map.copy()
    structure = ndimage.generate_binary_structure(label_map.ndim, 1)

    def keep_largest(mask):
        labeled, n = ndimage.label(mask, structure=structure)
        if n <= 1:
            return mask
        sizes = np.bincount(labeled.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1      # argmax takes the first max: scan order
        return labeled == keep

    if per_class:
        for cls in np.unique(label_map):
            if cls == 0:
                continue
            mask = label_map == cls
            out[mask & ~keep_largest(mask)] = 0
    else:
        fg = label_map > 0
        if fg.any():
            out[fg & ~keep_largest(fg)] = 0
    return out
