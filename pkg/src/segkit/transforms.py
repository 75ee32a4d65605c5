"""Intensity and spatial transforms.

Spatial transforms operate on Samples (image + label moved identically,
linear vs. nearest interpolation) and record the realized parameters in a
SpatialParams so predictions can be mapped back with spatial_invert. Pipeline
wrapper classes at the bottom adapt the functional ops to the
(sample, rng) -> sample interface used by IndexedDataset; config builds
them by name through build_pipeline().
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .volio.volume import Sample, Volume

EPS_STD = 1e-8


# ---------------------------------------------------------------------------
# intensity ops

def _per_channel(v, fn):
    data = np.stack([fn(c) for c in v.data.astype(np.float32)])
    return replace(v, data=data)


def normalize_mean_std(v, mask=None):
    """Normalize each channel to zero mean, unit std over mask (or everywhere).

    Constant channels map to all zeros.
    """
    def fn(c):
        vals = c[mask] if mask is not None else c
        std = vals.std()
        if std < EPS_STD:
            return np.zeros_like(c)
        return (c - vals.mean()) / std

    return _per_channel(v, fn)


def normalize_min_max(v, mask=None):
    """Rescale each channel to [0, 1]; constant channels map to all zeros."""
    def fn(c):
        vals = c[mask] if mask is not None else c
        lo, hi = vals.min(), vals.max()
        if hi - lo < EPS_STD:
            return np.zeros_like(c)
        return np.clip((c - lo) / (hi - lo), 0.0, 1.0)

    return _per_channel(v, fn)


def intensity_augment(v, gamma_range=(0.7, 1.5), noise_std=0.05, rng=None, seed=None):
    """Random gamma on min-max-rescaled intensities plus additive Gaussian noise.

    The channel is mapped to [0, 1], raised to a gamma drawn uniformly from
    gamma_range, mapped back to its original range, then noise_std Gaussian
    noise is added. Deterministic for a fixed rng/seed.
    """
    lo_g, hi_g = gamma_range
    if not (0 < lo_g <= hi_g):
        raise ValueError(f"invalid gamma_range {gamma_range}")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if rng is None:
        rng = np.random.default_rng(seed)
    gamma = rng.uniform(lo_g, hi_g)

    def fn(c):
        lo, hi = c.min(), c.max()
        if hi - lo < EPS_STD:
            out = c.copy()
        else:
            out = ((c - lo) / (hi - lo)) ** gamma * (hi - lo) + lo
        if noise_std > 0:
            out = out + rng.normal(0.0, noise_std, size=c.shape)
        return out.astype(np.float32)

    return _per_channel(v, fn)


# ---------------------------------------------------------------------------
# spatial ops

@dataclass
class SpatialParams:
    """Realized parameters of one spatial transform; enough to invert it.

    kind is one of crop / flip / rotate / rescale / pad. Axis indices are
    spatial (0 = slowest spatial axis); the channel axis is never touched.
    orig_size is recorded by spatial_apply and required for inversion.
    """

    kind: str
    offsets: tuple = None        # crop
    size: tuple = None           # crop
    axes: tuple = None           # flip
    angle: float = None          # rotate, degrees
    plane: tuple = None          # rotate, pair of spatial axes
    factors: tuple = None        # rescale, per spatial axis
    pad_before: tuple = None
    pad_after: tuple = None
    orig_size: tuple = None


def random_crop_params(spatial_shape, out_size, rng):
    out_size = tuple(int(s) for s in out_size)
    if len(out_size) != len(spatial_shape):
        raise ValueError("crop size rank does not match volume")
    if any(o > s for o, s in zip(out_size, spatial_shape)):
        raise ValueError(
            f"crop {out_size} larger than volume {tuple(spatial_shape)}; pad first"
        )
    offsets = tuple(int(rng.integers(0, s - o + 1)) for s, o in zip(spatial_shape, out_size))
    return SpatialParams(kind="crop", offsets=offsets, size=out_size)


def random_flip_params(n_spatial, rng, axes=None):
    pool = tuple(range(n_spatial)) if axes is None else tuple(axes)
    flipped = tuple(a for a in pool if rng.random() < 0.5)
    return SpatialParams(kind="flip", axes=flipped)


def random_rotate_params(rng, angle_range=(-15.0, 15.0), plane=None, n_spatial=2):
    if plane is None:
        plane = (n_spatial - 2, n_spatial - 1)
    angle = float(rng.uniform(angle_range[0], angle_range[1]))
    return SpatialParams(kind="rotate", angle=angle, plane=tuple(plane))


def random_rescale_params(rng, factor_range=(0.9, 1.1), n_spatial=2):
    f = float(rng.uniform(factor_range[0], factor_range[1]))
    if f <= 0:
        raise ValueError("rescale factor must be > 0")
    return SpatialParams(kind="rescale", factors=(f,) * n_spatial)


def pad_params(pad_before, pad_after):
    return SpatialParams(kind="pad", pad_before=tuple(pad_before), pad_after=tuple(pad_after))


def _label_fill(data):
    # padding labels with an id absent from the input would violate the
    # nearest-neighbor id-subset property, so use the smallest id present
    return int(data.min())


def _apply_array(data, p, is_label):
    order = 0 if is_label else 1
    if p.kind == "crop":
        sel = (slice(None),) + tuple(
            slice(o, o + s) for o, s in zip(p.offsets, p.size)
        )
        return data[sel].copy()
    if p.kind == "flip":
        if not p.axes:
            return data.copy()
        return np.flip(data, axis=tuple(a + 1 for a in p.axes)).copy()
    if p.kind == "rotate":
        axes = (p.plane[0] + 1, p.plane[1] + 1)
        if is_label:
            return ndimage.rotate(data, p.angle, axes=axes, reshape=False, order=0, mode="nearest")
        out = np.empty_like(data, dtype=np.float32)
        for c in range(data.shape[0]):
            out[c] = ndimage.rotate(
                data[c].astype(np.float32), p.angle, axes=(p.plane[0], p.plane[1]),
                reshape=False, order=1, mode="constant", cval=float(data[c].min()),
            )
        return out
    if p.kind == "rescale":
        factors = (1.0,) + tuple(p.factors)
        return ndimage.zoom(
            data if is_label else data.astype(np.float32),
            factors, order=order, mode="nearest",
        )
    if p.kind == "pad":
        width = ((0, 0),) + tuple(zip(p.pad_before, p.pad_after))
        if is_label:
            return np.pad(data, width, mode="constant", constant_values=_label_fill(data))
        out = np.stack([
            np.pad(c, width[1:], mode="constant", constant_values=float(c.min()))
            for c in data.astype(np.float32)
        ])
        return out
    raise ValueError(f"unknown spatial kind '{p.kind}'")


def spatial_apply(sample, p):
    """Apply one spatial transform to image and label identically.

    Returns (transformed sample, realized params); the returned params have
    orig_size recorded for spatial_invert.
    """
    spatial = sample.image.spatial_shape
    realized = replace(p, orig_size=tuple(spatial))
    image = replace(sample.image, data=_apply_array(sample.image.data, realized, False))
    if p.kind == "rescale":
        new_spacing = tuple(s / f for s, f in zip(sample.image.spacing, p.factors))
        image = replace(image, spacing=new_spacing)
    label = sample.label
    if label is not None:
        lab = _apply_array(label.data, realized, np.issubdtype(label.data.dtype, np.integer))
        label = replace(label, data=lab, spacing=image.spacing)
    return Sample(image=image, label=label, id=sample.id), realized


def spatial_invert(v, p):
    """Map a volume back through a recorded spatial transform.

    Exact for flip and pad; crops are restored into a fill canvas; rotate
    and rescale invert within interpolation tolerance.
    """
    if p.orig_size is None:
        raise ValueError("params lack inversion data; pass the result of spatial_apply")
    data = v.data
    is_label = np.issubdtype(data.dtype, np.integer) and v.is_label
    if p.kind == "flip":
        inv = replace(p, orig_size=None)
        return replace(v, data=_apply_array(data, inv, is_label))
    if p.kind == "pad":
        sel = (slice(None),) + tuple(
            slice(b, b + o) for b, o in zip(p.pad_before, p.orig_size)
        )
        return replace(v, data=data[sel].copy())
    if p.kind == "crop":
        shape = (data.shape[0],) + tuple(p.orig_size)
        if is_label:
            canvas = np.full(shape, _label_fill(data), dtype=data.dtype)
        else:
            canvas = np.stack([
                np.full(p.orig_size, float(c.min()), dtype=np.float32) for c in data
            ])
        sel = (slice(None),) + tuple(slice(o, o + s) for o, s in zip(p.offsets, p.size))
        canvas[sel] = data
        return replace(v, data=canvas)
    if p.kind == "rotate":
        inv = SpatialParams(kind="rotate", angle=-p.angle, plane=p.plane)
        return replace(v, data=_apply_array(data, inv, is_label))
    if p.kind == "rescale":
        cur = data.shape[1:]
        factors = tuple(o / c for o, c in zip(p.orig_size, cur))
        inv = SpatialParams(kind="rescale", factors=factors)
        out = _apply_array(data, inv, is_label)
        if out.shape[1:] != tuple(p.orig_size):
            raise ValueError(f"inverse rescale produced {out.shape[1:]}, wanted {p.orig_size}")
        return replace(v, data=out)
    raise ValueError(f"unknown spatial kind '{p.kind}'")


# ---------------------------------------------------------------------------
# pipeline wrappers

class NormalizeMinMax:
    randomized = False

    def __call__(self, sample, rng):
        return Sample(image=normalize_min_max(sample.image), label=sample.label, id=sample.id)


class NormalizeMeanStd:
    randomized = False

    def __call__(self, sample, rng):
        return Sample(image=normalize_mean_std(sample.image), label=sample.label, id=sample.id)


class IntensityAugment:
    randomized = True

    def __init__(self, gamma_range=(0.7, 1.5), noise_std=0.05):
        self.gamma_range = tuple(gamma_range)
        self.noise_std = noise_std

    def __call__(self, sample, rng):
        image = intensity_augment(sample.image, self.gamma_range, self.noise_std, rng=rng)
        return Sample(image=image, label=sample.label, id=sample.id)


class RandomFlip:
    randomized = True

    def __init__(self, axes=None):
        self.axes = tuple(axes) if axes is not None else None

    def __call__(self, sample, rng):
        n = len(sample.image.spatial_shape)
        p = random_flip_params(n, rng, axes=self.axes)
        out, _ = spatial_apply(sample, p)
        return out


class RandomCrop:
    randomized = True

    def __init__(self, size):
        self.size = tuple(size)

    def __call__(self, sample, rng):
        p = random_crop_params(sample.image.spatial_shape, self.size, rng)
        out, _ = spatial_apply(sample, p)
        return out


class RandomRotate:
    randomized = True

    def __init__(self, angle_range=(-15.0, 15.0)):
        self.angle_range = tuple(angle_range)

    def __call__(self, sample, rng):
        n = len(sample.image.spatial_shape)
        p = random_rotate_params(rng, self.angle_range, n_spatial=n)
        out, _ = spatial_apply(sample, p)
        return out


class RandomRescale:
    randomized = True

    def __init__(self, factor_range=(0.9, 1.1)):
        self.factor_range = tuple(factor_range)

    def __call__(self, sample, rng):
        n = len(sample.image.spatial_shape)
        p = random_rescale_params(rng, self.factor_range, n_spatial=n)
        out, _ = spatial_apply(sample, p)
        return out


class PadTo:
    randomized = False

    def __init__(self, size):
        self.size = tuple(size)

    def __call__(self, sample, rng):
        spatial = sample.image.spatial_shape
        before, after = [], []
        for cur, want in zip(spatial, self.size):
            extra = max(0, want - cur)
            before.append(extra // 2)
            after.append(extra - extra // 2)
        if not any(before) and not any(after):
            return sample
        out, _ = spatial_apply(sample, pad_params(before, after))
        return out


TRANSFORM_REGISTRY = {
    "normalize_minmax": NormalizeMinMax,
    "normalize_meanstd": NormalizeMeanStd,
    "intensity_augment": IntensityAugment,
    "random_flip": RandomFlip,
    "random_crop": RandomCrop,
    "random_rotate": RandomRotate,
    "random_rescale": RandomRescale,
    "pad_to": PadTo,
}


def build_pipeline(names, params=None):
    """Instantiate transforms by name.

    params maps constructor keyword -> value; each transform picks the
    keys it understands (crop_size, flip_axes, rotate_angle_range,
    rescale_range, gamma_range, noise_std, pad_to_size).
    """
    params = params or {}
    pipeline = []
    for name in names:
        if name not in TRANSFORM_REGISTRY:
            raise ConfigError(
                f"unknown transform '{name}'; known: {sorted(TRANSFORM_REGISTRY)}"
            )
        if name == "intensity_augment":
            kw = {}
            if params.get("gamma_range") is not None:
                kw["gamma_range"] = params["gamma_range"]
            if params.get("noise_std") is not None:
                kw["noise_std"] = params["noise_std"]
            pipeline.append(IntensityAugment(**kw))
        elif name == "random_flip":
            pipeline.append(RandomFlip(axes=params.get("flip_axes")))
        elif name == "random_crop":
            if params.get("crop_size") is None:
                raise ConfigError("[dataset] crop_size is required for random_crop")
            pipeline.append(RandomCrop(params["crop_size"]))
        elif name == "random_rotate":
            kw = {}
            if params.get("rotate_angle_range") is not None:
                kw["angle_range"] = params["rotate_angle_range"]
            pipeline.append(RandomRotate(**kw))
        elif name == "random_rescale":
            kw = {}
            if params.get("rescale_range") is not None:
                kw["factor_range"] = params["rescale_range"]
            pipeline.append(RandomRescale(**kw))
        elif name == "pad_to":
            if params.get("pad_to_size") is None:
                raise ConfigError("[dataset] pad_to_size is required for pad_to")
            pipeline.append(PadTo(params["pad_to_size"]))
        else:
            pipeline.append(TRANSFORM_REGISTRY[name]())
    return pipeline
