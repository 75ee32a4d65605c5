"""Datasets, cycling sample streams and labeled/unlabeled batch aggregation.

Training composes each batch from n_labeled samples drawn from a labeled
stream followed by n_unlabeled samples from an unlabeled stream. Streams
cycle forever over their source, reshuffling at the start of every cycle,
so epoch boundaries of the two pools are independent.
"""

import os
from dataclasses import dataclass

import numpy as np

from ..errors import EmptyStreamError, ShapeError
from .volume import Sample, load_volume, parse_index


@dataclass
class Batch:
    """A stacked minibatch with the labeled samples first.

    images is (B, C, *spatial) float32. labels covers only the labeled
    prefix: (n_labeled, *spatial) integer class ids, or a soft
    (n_labeled, K, *spatial) float map for relabeled training stages.
    """

    images: np.ndarray
    labels: np.ndarray
    n_labeled: int
    n_unlabeled: int

    def __post_init__(self):
        if self.n_labeled < 1 or self.n_unlabeled < 0:
            raise ValueError("need n_labeled >= 1 and n_unlabeled >= 0")
        if self.images.shape[0] != self.n_labeled + self.n_unlabeled:
            raise ValueError(
                f"batch of {self.images.shape[0]} does not match "
                f"{self.n_labeled}+{self.n_unlabeled}"
            )
        if self.labels is not None and self.labels.shape[0] != self.n_labeled:
            raise ValueError("labels must cover exactly the labeled prefix")


class CyclingStream:
    """Infinite sample iterator over an indexable source, reshuffled per cycle."""

    def __init__(self, source, seed=0, shuffle=True):
        if len(source) == 0:
            raise EmptyStreamError("cannot stream from an empty source")
        self.source = source
        self.shuffle = shuffle
        self.rng = np.random.default_rng(seed)
        self._order = []
        self._pos = 0

    def __iter__(self):
        return self

    def __next__(self):
        if self._pos >= len(self._order):
            n = len(self.source)
            self._order = self.rng.permutation(n) if self.shuffle else np.arange(n)
            self._pos = 0
        sample = self.source[int(self._order[self._pos])]
        self._pos += 1
        return sample


class IndexedDataset:
    """Samples loaded from an index CSV, with an optional transform pipeline.

    Transforms are callables (sample, rng) -> sample; objects with a
    truthy `randomized` attribute are treated as augmentation and skipped
    by raw_sample(), which is used for deterministic whole-case prediction
    during training (validation, relabeling).
    """

    def __init__(self, root_dir, records, transforms=(), cache=True, seed=0):
        self.root_dir = str(root_dir)
        self.records = list(records)
        self.transforms = list(transforms)
        self.cache = cache
        self.rng = np.random.default_rng(seed)
        self._cached = {}

    @classmethod
    def from_csv(cls, root_dir, csv_path, **kwargs):
        return cls(root_dir, parse_index(csv_path), **kwargs)

    def __len__(self):
        return len(self.records)

    def _load(self, i):
        if self.cache and i in self._cached:
            return self._cached[i]
        image_rel, label_rel = self.records[i]
        image = load_volume(os.path.join(self.root_dir, image_rel))
        label = None
        if label_rel is not None:
            label = load_volume(os.path.join(self.root_dir, label_rel), is_label=True)
        case_id = os.path.splitext(os.path.basename(image_rel))[0]
        sample = Sample(image=image, label=label, id=case_id)
        if self.cache:
            self._cached[i] = sample
        return sample

    def __getitem__(self, i):
        sample = self._load(i)
        for t in self.transforms:
            sample = t(sample, self.rng)
        return sample

    def raw_sample(self, i):
        """The sample with only deterministic (non-augmenting) transforms."""
        sample = self._load(i)
        for t in self.transforms:
            if not getattr(t, "randomized", False):
                sample = t(sample, self.rng)
        return sample


def _stack_images(samples):
    arrs = [np.asarray(s.image.data, dtype=np.float32) for s in samples]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ShapeError(
            f"cannot stack samples of differing shapes: {[a.shape for a in arrs]}"
        )
    return np.stack(arrs)


def aggregate_batch(labeled_stream, unlabeled_stream, n_labeled, n_unlabeled):
    """Compose a Batch of n_labeled + n_unlabeled samples.

    The labeled prefix keeps its labels (single-channel label volumes are
    squeezed to (spatial) id maps); unlabeled samples contribute images only.
    """
    if n_labeled < 1:
        raise ValueError("n_labeled must be >= 1")
    if n_unlabeled < 0:
        raise ValueError("n_unlabeled must be >= 0")
    if labeled_stream is None:
        raise EmptyStreamError("no labeled stream provided")
    if n_unlabeled > 0 and unlabeled_stream is None:
        raise EmptyStreamError("n_unlabeled > 0 but no unlabeled stream provided")

    try:
        labeled = [next(labeled_stream) for _ in range(n_labeled)]
    except StopIteration:
        raise EmptyStreamError("labeled stream is empty") from None
    for s in labeled:
        if s.label is None:
            raise ValueError(f"labeled stream yielded unlabeled sample '{s.id}'")
    unlabeled = []
    if n_unlabeled > 0:
        try:
            unlabeled = [next(unlabeled_stream) for _ in range(n_unlabeled)]
        except StopIteration:
            raise EmptyStreamError("unlabeled stream is empty") from None

    images = _stack_images(labeled + unlabeled)
    label_arrs = []
    for s in labeled:
        lab = np.asarray(s.label.data)
        if lab.shape[0] == 1 and np.issubdtype(lab.dtype, np.integer):
            lab = lab[0]
        label_arrs.append(lab)
    labels = np.stack(label_arrs)
    if np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64)
    return Batch(images=images, labels=labels, n_labeled=n_labeled, n_unlabeled=n_unlabeled)


class ArrayBatchSource:
    """Minibatches straight from in-memory arrays (used for relabeled stages).

    images is (N, C, *spatial); labels is (N, *spatial) ids or
    (N, K, *spatial) soft maps. Batches cycle with reshuffling.
    """

    def __init__(self, images, labels, batch_size, seed=0):
        if len(images) == 0:
            raise EmptyStreamError("no samples given")
        if len(images) != len(labels):
            raise ValueError("images and labels must have equal length")
        self.images = np.asarray(images, dtype=np.float32)
        self.labels = np.asarray(labels)
        self.batch_size = int(batch_size)
        self.rng = np.random.default_rng(seed)
        self._order = []
        self._pos = 0

    def next_batch(self):
        idx = []
        while len(idx) < self.batch_size:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(len(self.images))
                self._pos = 0
            idx.append(int(self._order[self._pos]))
            self._pos += 1
        return Batch(
            images=self.images[idx],
            labels=self.labels[idx],
            n_labeled=self.batch_size,
            n_unlabeled=0,
        )
