"""Class-balanced patch sampling with mirror padding and light augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .synthdata import LabeledVolume


@dataclass(frozen=True)
class PatchBatch:
    inputs: np.ndarray   # (n, 1, *patch)
    targets: np.ndarray  # (n, 1, *patch), 0/1 floats
    provenance: tuple[tuple[str, tuple[int, ...]], ...]  # (volume id, patch origin)
    foreground_centered: tuple[bool, ...] = ()

    def __len__(self):
        return len(self.inputs)


def _patch_shape(patch_size, nd):
    if isinstance(patch_size, int):
        return (patch_size,) * nd
    shape = tuple(int(p) for p in patch_size)
    if len(shape) != nd:
        raise ValueError(f"patch size {shape} does not match {nd}-D volume")
    return shape


def _augment(img, tgt, rng, intensity_range=(0.9, 1.1)):
    nd = img.ndim
    for ax in range(nd):
        if rng.random() < 0.5:
            img, tgt = np.flip(img, ax), np.flip(tgt, ax)
    if len(set(img.shape)) == 1:
        axes = tuple(rng.choice(nd, 2, replace=False)) if nd > 2 else (0, 1)
        k = int(rng.integers(4))
        img, tgt = np.rot90(img, k, axes), np.rot90(tgt, k, axes)
    img = img * rng.uniform(*intensity_range)
    return img, tgt


def sample_patches(volume: LabeledVolume, n: int, patch_size, rng: np.random.Generator,
                   fg_fraction: float = 0.5, augment: bool = False,
                   dtype=np.float32) -> PatchBatch:
    """Cut ``n`` patches; ``ceil(n * fg_fraction)`` are centred inside a lesion.

    Lesioned volumes: a lesion is chosen uniformly, then a voxel inside it.
    Remaining patches (all of them for lesion-free volumes) are centred on
    a uniformly random voxel.  Borders are mirror padded.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    extent = volume.image.shape
    nd = len(extent)
    shape = _patch_shape(patch_size, nd)
    if any(p > e for p, e in zip(shape, extent)):
        raise ValueError(f"patch {shape} larger than volume {extent}")
    lo = [p // 2 for p in shape]
    pad = [(l, p - l) for l, p in zip(lo, shape)]
    image = np.pad(volume.image, pad, mode="symmetric")
    mask = np.pad(volume.mask, pad, mode="symmetric")

    lesions = volume.lesion_voxels
    n_fg = math.ceil(n * fg_fraction) if lesions else 0
    inputs = np.empty((n, 1) + shape, dtype)
    targets = np.empty((n, 1) + shape, dtype)
    prov, fg_flags = [], []
    for i in range(n):
        if i < n_fg:
            vox = lesions[int(rng.integers(len(lesions)))]
            flat = int(vox[int(rng.integers(len(vox)))])
            centre = np.unravel_index(flat, extent)
        else:
            centre = tuple(int(rng.integers(e)) for e in extent)
        origin = tuple(int(c) - l for c, l in zip(centre, lo))
        # origin is in volume coordinates; the padded array is shifted by lo
        sl = tuple(slice(c, c + p) for c, p in zip(centre, shape))
        img, tgt = image[sl], mask[sl]
        if augment:
            img, tgt = _augment(img, tgt, rng)
        inputs[i, 0] = img
        targets[i, 0] = tgt
        prov.append((volume.volume_id, origin))
        fg_flags.append(i < n_fg)
    return PatchBatch(inputs, targets, tuple(prov), tuple(fg_flags))


def concat_batches(batches: Sequence[PatchBatch]) -> PatchBatch:
    return PatchBatch(np.concatenate([b.inputs for b in batches]),
                      np.concatenate([b.targets for b in batches]),
                      tuple(p for b in batches for p in b.provenance),
                      tuple(f for b in batches for f in b.foreground_centered))


def take(batch: PatchBatch, idx) -> PatchBatch:
    idx = np.asarray(idx)
    return PatchBatch(batch.inputs[idx], batch.targets[idx],
                      tuple(batch.provenance[i] for i in idx),
                      tuple(batch.foreground_centered[i] for i in idx))


def sample_from_volumes(volumes: Sequence[LabeledVolume], n: int, patch_size,
                        rng: np.random.Generator, fg_fraction: float = 0.5,
                        augment: bool = False, dtype=np.float32) -> PatchBatch:
    """Spread ``n`` patches as evenly as possible over ``volumes``, then shuffle."""
    k = len(volumes)
    counts = [n // k + (1 if i < n % k else 0) for i in range(k)]
    parts = [sample_patches(v, c, patch_size, rng, fg_fraction, augment, dtype)
             for v, c in zip(volumes, counts) if c > 0]
    batch = concat_batches(parts)
    return take(batch, rng.permutation(len(batch)))
