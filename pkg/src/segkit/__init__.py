"""segkit: medical image segmentation under full, partial, sparse and noisy supervision.

Submodules:
    volio       volume I/O, index CSVs, datasets, batch aggregation
    transforms  intensity and invertible spatial augmentation
    nets        encoder-decoder segmentation networks and checkpoints
    losses      supervised, partial-label, noise-robust and regularization losses
    agents      training loops for the supported supervision paradigms
    infer       sliding-window / TTA / ensemble inference and post-processing
    metrics     overlap and surface-distance evaluation with CSV reports
    config      INI experiment configuration
    synth       synthetic datasets, label degradation, scribble simulation
    cli         command-line entry points
"""

__version__ = "0.1.0"
