"""Volume I/O: codecs, index parsing, datasets and batch aggregation."""

from .volume import (
    Volume,
    Sample,
    load_volume,
    save_volume,
    parse_index,
    read_subvolume,
)
from .batches import (
    Batch,
    CyclingStream,
    IndexedDataset,
    ArrayBatchSource,
    aggregate_batch,
)

__all__ = [
    "Volume",
    "Sample",
    "load_volume",
    "save_volume",
    "parse_index",
    "read_subvolume",
    "Batch",
    "CyclingStream",
    "IndexedDataset",
    "ArrayBatchSource",
    "aggregate_batch",
]
