"""Synthetic multi-center lesion segmentation data.

Each volume is a smooth textured background with a Poisson number of bright
Gaussian blobs (the lesions, masked at half maximum) and elongated bright
tubes that are deliberately left out of the mask.  Small lesions are dimmer
than large ones, so they compete with the tubes.  A :class:`CenterShift`
changes intensities per center to mimic scanner differences.
"""
from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

FULL_CONNECTIVITY = {2: np.ones((3, 3), bool), 3: np.ones((3, 3, 3), bool)}
PLACEMENT_RETRIES = 20


@dataclass(frozen=True)
class TaskSpec:
    volume_extent: tuple[int, ...] = (64, 64)
    lesions_per_volume: float = 2.2
    small_lesion_fraction: float = 0.444
    small_radius: tuple[float, float] = (1.0, 2.0)
    large_radius: tuple[float, float] = (2.5, 5.0)
    small_contrast: tuple[float, float] = (0.05, 0.3)
    large_contrast: tuple[float, float] = (0.35, 0.6)
    background_level: float = 0.25
    texture_sigma: float = 8.0
    texture_amplitude: float = 0.06
    noise_sigma: float = 0.03
    distractors_per_volume: float = 0.5
    distractor_length: tuple[float, float] = (8.0, 20.0)
    distractor_width: float = 1.0
    distractor_contrast: tuple[float, float] = (0.1, 0.3)
    fixed_lesion_count: int | None = None
    normalize: bool = True  # per-volume robust standardization after the shift

    def __post_init__(self):
        object.__setattr__(self, "volume_extent", tuple(int(e) for e in self.volume_extent))
        if len(self.volume_extent) not in (2, 3):
            raise ValueError("volumes must be 2D or 3D")
        if not 0 <= self.small_lesion_fraction <= 1:
            raise ValueError("small_lesion_fraction must lie in [0, 1]")
        if self.lesions_per_volume < 0 or self.distractors_per_volume < 0:
            raise ValueError("expected counts must be non-negative")
        radii = self.small_radius + self.large_radius
        if min(radii) <= 0:
            raise ValueError("lesion radii must be positive")
        for lo, hi in (self.small_radius, self.large_radius):
            if lo > hi:
                raise ValueError("radius ranges must be (low, high)")
        if min(self.volume_extent) < 4 * max(radii):
            raise ValueError("volume extent must be at least 4x the largest lesion radius")

    @property
    def small_max_voxels(self) -> int:
        """Voxel count of the largest possible small lesion."""
        return _ball_size(self.small_radius[1], len(self.volume_extent))


def _ball_size(r, nd):
    c = int(np.ceil(r))
    grid = np.indices((2 * c + 1,) * nd) - c
    return int(np.sum(np.sum(grid ** 2, axis=0) <= r * r))


@dataclass(frozen=True)
class CenterShift:
    intensity_gain: float = 1.0
    intensity_bias: float = 0.0
    noise_sigma: float = 0.0
    contrast_gamma: float = 1.0

    def __post_init__(self):
        if self.intensity_gain <= 0 or self.contrast_gamma <= 0:
            raise ValueError("gain and gamma must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


IDENTITY_SHIFT = CenterShift()


def default_shifts(n: int) -> list[CenterShift]:
    """Evenly spaced shifts from the dim/flat end to the bright/steep end."""
    t = np.linspace(0.0, 1.0, n) if n > 1 else np.array([0.5])
    return [CenterShift(0.8 + 0.4 * s, -0.1 + 0.2 * s, 0.01 + 0.04 * s, 0.8 + 0.45 * s)
            for s in t]


@dataclass(frozen=True)
class Lesion:
    centroid: tuple[float, ...]
    radius: float
    id: int
    small: bool


@dataclass
class LabeledVolume:
    image: np.ndarray
    mask: np.ndarray
    lesion_registry: list[Lesion]
    volume_id: str = ""
    seed: int = 0
    center: int = 0

    @cached_property
    def labels(self) -> np.ndarray:
        """Component label map of the mask (0 = background)."""
        lab, _ = ndimage.label(self.mask, FULL_CONNECTIVITY[self.mask.ndim])
        return lab

    @cached_property
    def lesion_voxels(self) -> list[np.ndarray]:
        """Flat voxel indices of every mask component."""
        lab = self.labels.ravel()
        order = np.argsort(lab, kind="stable")
        bounds = np.searchsorted(lab[order], np.arange(1, lab.max() + 2))
        return [order[bounds[i]:bounds[i + 1]] for i in range(len(bounds) - 1)]


def _apply_shift(image, shift: CenterShift, rng):
    out = shift.intensity_gain * np.power(np.clip(image, 0, None), shift.contrast_gamma)
    out = out + shift.intensity_bias
    if shift.noise_sigma > 0:
        out = out + rng.normal(0.0, shift.noise_sigma, size=image.shape)
    return out


def robust_standardize(image):
    """Centre on the median and scale by the normal-consistent MAD.

    Background dominates both statistics, so lesion load barely moves them.
    """
    med = np.median(image)
    mad = 1.4826 * np.median(np.abs(image - med))
    return (image - med) / max(float(mad), 1e-12)


def _segment_distance(coords, a, b):
    ab = b - a
    rel = coords - a.reshape((-1,) + (1,) * (coords.ndim - 1))
    t = np.tensordot(ab, rel, axes=1) / max(float(ab @ ab), 1e-12)
    t = np.clip(t, 0, 1)
    closest = a.reshape((-1,) + (1,) * (coords.ndim - 1)) + ab.reshape(
        (-1,) + (1,) * (coords.ndim - 1)) * t
    return np.sqrt(np.sum((coords - closest) ** 2, axis=0))


def generate_volume(spec: TaskSpec, shift: CenterShift, rng: np.random.Generator,
                    volume_id: str = "", seed: int = 0, center: int = 0) -> LabeledVolume:
    extent = spec.volume_extent
    nd = len(extent)
    coords = np.indices(extent).astype(np.float64)

    texture = ndimage.gaussian_filter(rng.normal(size=extent), spec.texture_sigma)
    texture /= max(float(texture.std()), 1e-12)
    image = spec.background_level + spec.texture_amplitude * texture
    image += rng.normal(0.0, spec.noise_sigma, size=extent)

    if spec.fixed_lesion_count is not None:
        n_lesions = spec.fixed_lesion_count
    else:
        n_lesions = int(rng.poisson(spec.lesions_per_volume))
    mask = np.zeros(extent, bool)
    labels = np.zeros(extent, np.int32)
    drawn: list[Lesion] = []
    struct_el = FULL_CONNECTIVITY[nd]
    for _ in range(n_lesions):
        small = bool(rng.random() < spec.small_lesion_fraction)
        lo, hi = spec.small_radius if small else spec.large_radius
        radius = float(rng.uniform(lo, hi))
        clo, chi = spec.small_contrast if small else spec.large_contrast
        amp = float(rng.uniform(clo, chi))
        margin = int(np.ceil(radius)) + 1
        grown = ndimage.binary_dilation(mask, struct_el)
        for _attempt in range(PLACEMENT_RETRIES):
            where = np.array([rng.integers(margin, e - margin) for e in extent], float)
            d2 = np.sum((coords - where.reshape((-1,) + (1,) * nd)) ** 2, axis=0)
            ball = d2 <= radius * radius
            if not np.any(ball & grown):
                break
        sigma = radius / np.sqrt(2 * np.log(2))
        image += amp * np.exp(-d2 / (2 * sigma * sigma))
        lesion_id = len(drawn) + 1
        drawn.append(Lesion(tuple(where), radius, lesion_id, small))
        labels[ball & ~mask] = lesion_id
        mask |= ball

    n_distractors = int(rng.poisson(spec.distractors_per_volume))
    for _ in range(n_distractors):
        length = rng.uniform(*spec.distractor_length)
        direction = rng.normal(size=nd)
        direction /= np.linalg.norm(direction)
        a = np.array([rng.uniform(0, e) for e in extent])
        b = a + length * direction
        dist = _segment_distance(coords, a, b)
        amp = rng.uniform(*spec.distractor_contrast)
        image += amp * np.exp(-dist ** 2 / (2 * spec.distractor_width ** 2))

    image = _apply_shift(image, shift, rng)
    if spec.normalize:
        image = robust_standardize(image)
    image = image.astype(np.float32)
    registry = _register(mask, labels, drawn, nd)
    return LabeledVolume(image, mask, registry, volume_id, seed, center)


def _register(mask, labels, drawn, nd):
    """One registry entry per mask component; lesions that touched are merged."""
    comp, n = ndimage.label(mask, FULL_CONNECTIVITY[nd])
    if n == len(drawn):
        return drawn
    registry = []
    for k in range(1, n + 1):
        members = np.unique(labels[comp == k])
        members = [drawn[m - 1] for m in members if m > 0]
        vox = np.argwhere(comp == k)
        volume = len(vox)
        if nd == 2:
            radius = float(np.sqrt(volume / np.pi))
        else:
            radius = float((3 * volume / (4 * np.pi)) ** (1 / 3))
        registry.append(Lesion(tuple(vox.mean(axis=0)), radius, members[0].id,
                               all(m.small for m in members)))
    return registry


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class Center:
    id: int
    train_set: list[LabeledVolume]
    local_seed: int
    shift: CenterShift = IDENTITY_SHIFT


@dataclass
class Scenario:
    centers: list[Center]
    val_set: list[LabeledVolume]
    test_set: list[LabeledVolume]
    spec: TaskSpec = field(default_factory=TaskSpec)
    master_seed: int = 0

    def test_hash(self) -> str:
        return dataset_hash(self.test_set)


ROLE_TRAIN, ROLE_VAL, ROLE_TEST = 0, 1, 2


def volume_seed(master_seed: int, role: int, center: int, index: int) -> int:
    ss = np.random.SeedSequence([master_seed, role, center, index])
    return int(ss.generate_state(2, np.uint32).astype(np.uint64) @ np.array([1 << 32, 1], np.uint64))


def center_seed(master_seed: int, center: int) -> int:
    return int(np.random.SeedSequence([master_seed, 99, center]).generate_state(1)[0])


def build_scenario(spec: TaskSpec, n_centers: int, per_center: int | Sequence[int],
                   val_n: int, test_n: int, shifts: Sequence[CenterShift] | None = None,
                   master_seed: int = 0, eval_shift: str = "identity") -> Scenario:
    """Disjoint per-center training sets plus shared validation and test sets.

    ``eval_shift="identity"`` draws held-out volumes without any scanner
    shift; ``"centers"`` cycles them through the centers' shifts so the
    held-out sets look like a pool of every site.
    """
    if eval_shift not in ("identity", "centers"):
        raise ValueError(f"unknown eval_shift {eval_shift!r}")
    if n_centers < 1:
        raise ValueError("need at least one center")
    sizes = [per_center] * n_centers if np.isscalar(per_center) else list(per_center)
    if len(sizes) != n_centers:
        raise ValueError("per_center must give one size per center")
    shifts = default_shifts(n_centers) if shifts is None else list(shifts)
    if len(shifts) != n_centers:
        raise ValueError("need one shift per center")

    def make(role, center, index, shift, prefix):
        seed = volume_seed(master_seed, role, center, index)
        return generate_volume(spec, shift, np.random.default_rng(seed),
                               f"{prefix}-v{index:03d}", seed, center)

    centers = []
    for c in range(n_centers):
        cid = c + 1
        vols = [make(ROLE_TRAIN, cid, i, shifts[c], f"c{cid}") for i in range(sizes[c])]
        centers.append(Center(cid, vols, center_seed(master_seed, cid), shifts[c]))
    held = (lambda i: shifts[i % n_centers]) if eval_shift == "centers" else (lambda i: IDENTITY_SHIFT)
    val = [make(ROLE_VAL, 0, i, held(i), "val") for i in range(val_n)]
    test = [make(ROLE_TEST, 0, i, held(i), "test") for i in range(test_n)]
    return Scenario(centers, val, test, spec, master_seed)


def dataset_hash(volumes: Sequence[LabeledVolume]) -> str:
    h = hashlib.sha256()
    for v in volumes:
        h.update(np.ascontiguousarray(v.image, "<f4").tobytes())
        h.update(np.packbits(v.mask.ravel()).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# dataset dump

VOLUME_MAGIC = b"RFVL"


def write_volume(path, vol: LabeledVolume) -> None:
    """Header (magic, ndim u8, extents u32, lesion count u32), image as
    little-endian float32, mask as packed bits."""
    extent = vol.image.shape
    header = VOLUME_MAGIC + struct.pack("<B", len(extent))
    header += struct.pack(f"<{len(extent)}I", *extent)
    header += struct.pack("<I", len(vol.lesion_registry))
    payload = np.ascontiguousarray(vol.image, "<f4").tobytes()
    payload += np.packbits(vol.mask.ravel().astype(bool)).tobytes()
    Path(path).write_bytes(header + payload)


def read_volume(path) -> tuple[np.ndarray, np.ndarray, int]:
    """Returns (image, mask, lesion count)."""
    raw = Path(path).read_bytes()
    if raw[:4] != VOLUME_MAGIC:
        raise ValueError(f"{path}: not a volume file")
    nd = raw[4]
    extent = struct.unpack_from(f"<{nd}I", raw, 5)
    pos = 5 + 4 * nd
    (n_lesions,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    n = int(np.prod(extent))
    image = np.frombuffer(raw, "<f4", count=n, offset=pos).reshape(extent).astype(np.float32)
    pos += 4 * n
    bits = np.frombuffer(raw, np.uint8, offset=pos)
    mask = np.unpackbits(bits)[:n].astype(bool).reshape(extent)
    return image, mask, n_lesions


def dump_scenario(scenario: Scenario, out_dir) -> Path:
    """One file per volume plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    small_max = scenario.spec.small_max_voxels
    rows = []
    groups = [(c.id, c.train_set) for c in scenario.centers]
    groups += [("val", scenario.val_set), ("test", scenario.test_set)]
    for center, vols in groups:
        for v in vols:
            write_volume(out / f"{v.volume_id}.rfv", v)
            sizes = [len(ix) for ix in v.lesion_voxels]
            rows.append([v.volume_id, center, v.seed, len(v.lesion_registry),
                         sum(s <= small_max for s in sizes), int(v.mask.sum())])
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["volume_id", "center", "seed", "n_lesions", "n_small", "fg_voxels"])
        w.writerows(rows)
    return manifest
