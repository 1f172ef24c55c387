"""ringfed: peer-to-peer ring training with continual learning.

A small numpy network engine, a composite segmentation loss, Synaptic
Intelligence bookkeeping, ring schedules (isolated, single-visit and
iterative continual learning, mixed-data training), a synthetic
multi-center lesion generator and lesion-level metrics.
"""
__version__ = "1.0.0"
