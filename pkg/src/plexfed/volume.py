"""3D intensity volumes, binary masks, and the synthetic multi-domain phantom generator.

A phantom is a head-shaped ellipsoid of uniform tissue containing one
low-intensity "ventricle" ellipsoid per hemisphere; inside each ventricle an
irregular blob (grown voxel by voxel) plays the segmentation target. Domain
parameters (intensity transfer exponent, bias field, noise, blur, target
contrast) stand in for scanner/protocol variability across cohorts.
"""

import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

# Tissue model of the clean phantom, before any domain corruption.
AIR_VALUE = 0.05
TISSUE_VALUE = 0.55
VENTRICLE_VALUE = 0.20

MIN_DIM = 16

# FWHM of a Gaussian = 2*sqrt(2*ln 2) * sigma
_FWHM_TO_SIGMA = 2.354820045030949


class PhantomGeometryError(ValueError):
    """Requested phantom geometry does not fit the voxel grid."""


@dataclass(frozen=True)
class Volume:
    """A 3D scalar intensity grid with voxel spacing in mm.

    ``voxels`` is indexed [x, y, z] and stored float32 so that the on-disk
    representation round-trips bit-exact. ``seed`` is None for volumes that
    were not generated (e.g. read from ingested files without one).
    """

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]
    dataset_id: str
    subject_id: str
    seed: Optional[int] = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.voxels, dtype=np.float32)
        object.__setattr__(self, "voxels", v)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"voxels must be a non-empty 3D grid, got shape {v.shape}")
        sp = tuple(float(s) for s in self.spacing_mm)
        if len(sp) != 3 or any(s <= 0 for s in sp):
            raise ValueError(f"spacing_mm must be three positive reals, got {self.spacing_mm}")
        object.__setattr__(self, "spacing_mm", sp)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def same_grid(self, other) -> bool:
        return self.dims == other.dims and self.spacing_mm == other.spacing_mm


@dataclass(frozen=True)
class Mask:
    """A binary label grid aligned with a Volume (1 = target, 0 = background)."""

    labels: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        lab = np.ascontiguousarray(self.labels)
        if lab.dtype != np.uint8:
            lab = lab.astype(np.uint8)
        if lab.ndim != 3:
            raise ValueError(f"labels must be a 3D grid, got shape {lab.shape}")
        if lab.size and lab.max() > 1:
            raise ValueError("mask labels must be strictly binary")
        object.__setattr__(self, "labels", lab)
        sp = tuple(float(s) for s in self.spacing_mm)
        if len(sp) != 3 or any(s <= 0 for s in sp):
            raise ValueError(f"spacing_mm must be three positive reals, got {self.spacing_mm}")
        object.__setattr__(self, "spacing_mm", sp)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.labels))

    def same_grid(self, other) -> bool:
        return self.dims == other.dims and self.spacing_mm == other.spacing_mm


@dataclass(frozen=True)
class DomainSpec:
    """Parameters of one synthetic scanner/cohort domain.

    gamma       intensity transfer exponent (> 0); monotone remap of the clean image
    bias_amplitude   strength of a low-order multiplicative bias field (>= 0)
    noise_sigma      additive Gaussian noise std (>= 0)
    blur_fwhm_mm     Gaussian smoothing kernel FWHM in mm (>= 0)
    plexus_contrast  target-vs-ventricle intensity separation in (0, 1]
    plexus_voxels_range  inclusive (min, max) for the target's voxel count
    """

    domain_id: str
    gamma: float
    bias_amplitude: float
    noise_sigma: float
    blur_fwhm_mm: float
    plexus_contrast: float
    plexus_voxels_range: tuple[int, int]
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "plexus_voxels_range",
                           (int(self.plexus_voxels_range[0]), int(self.plexus_voxels_range[1])))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        self.validate()

    def validate(self):
        if not self.domain_id:
            raise ValueError("domain_id must be non-empty")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.bias_amplitude < 0 or self.noise_sigma < 0 or self.blur_fwhm_mm < 0:
            raise ValueError("bias_amplitude, noise_sigma and blur_fwhm_mm must be >= 0")
        if not (0 < self.plexus_contrast <= 1):
            raise ValueError("plexus_contrast must lie in (0, 1]")
        lo, hi = self.plexus_voxels_range
        nvox = int(np.prod(self.dims))
        if lo < 1 or lo > hi or hi > nvox:
            raise ValueError(f"plexus_voxels_range invalid: ({lo}, {hi}) for {nvox} voxels")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError("spacing components must be strictly positive")


def normalize_intensity(v: Volume) -> Volume:
    """Min-max rescale voxel intensities into [0, 1].

    A flat volume (max == min) maps to all zeros.
    """
    x = v.voxels
    lo = float(x.min())
    hi = float(x.max())
    if hi == lo:
        out = np.zeros_like(x)
    else:
        out = (x - np.float32(lo)) / np.float32(hi - lo)
    return Volume(out, v.spacing_mm, v.dataset_id, v.subject_id, v.seed)


def _ellipsoid(shape, center, semi):
    x, y, z = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    return ((x - center[0]) ** 2 / semi[0] ** 2
            + (y - center[1]) ** 2 / semi[1] ** 2
            + (z - center[2]) ** 2 / semi[2] ** 2) <= 1.0


_NEIGHBORS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def _grow_blob(rng: np.random.Generator, allowed: np.ndarray, target: int) -> np.ndarray:
    """Grow a 6-connected blob of exactly `target` voxels inside `allowed`."""
    capacity = int(np.count_nonzero(allowed))
    if capacity < target:
        raise PhantomGeometryError(
            f"ventricle interior holds {capacity} voxels, target blob needs {target}")
    idx = np.argwhere(allowed)
    start = tuple(idx[int(rng.integers(len(idx)))])
    blob = np.zeros(allowed.shape, dtype=bool)
    blob[start] = True
    grown = 1
    frontier = [start]
    shape = allowed.shape
    restarts = 0
    while grown < target:
        if not frontier:
            # Rare dead end (blob walled itself in): restart from a fresh seed.
            restarts += 1
            if restarts > 100:
                raise PhantomGeometryError(
                    f"could not grow a {target}-voxel blob inside the ventricle")
            restart = tuple(idx[int(rng.integers(len(idx)))])
            blob[:] = False
            blob[restart] = True
            grown = 1
            frontier = [restart]
            continue
        i = int(rng.integers(len(frontier)))
        vx = frontier.pop(i)
        order = rng.permutation(len(_NEIGHBORS))
        for j in order:
            d = _NEIGHBORS[j]
            nb = (vx[0] + d[0], vx[1] + d[1], vx[2] + d[2])
            if not (0 <= nb[0] < shape[0] and 0 <= nb[1] < shape[1] and 0 <= nb[2] < shape[2]):
                continue
            if allowed[nb] and not blob[nb] and grown < target:
                blob[nb] = True
                grown += 1
                frontier.append(nb)
    return blob


def generate_phantom(domain: DomainSpec, subject_seed: int) -> tuple[Volume, Mask]:
    """Generate one deterministic (Volume, Mask) pair for a domain.

    The returned intensities are NOT normalized; consumers call
    normalize_intensity before feature extraction. The blob's mean intensity
    exceeds the ventricle's by exactly plexus_contrast on the clean image
    (gamma = 1, no blur/bias/noise); domain corruptions are applied on top in
    the order gamma -> blur -> bias field -> noise.
    """
    domain.validate()
    nx, ny, nz = domain.dims
    if min(nx, ny, nz) < MIN_DIM:
        raise PhantomGeometryError(
            f"dims {domain.dims} too small; each axis must be >= {MIN_DIM}")

    rng = np.random.default_rng([int(subject_seed) & 0xFFFFFFFF,
                                 zlib.crc32(domain.domain_id.encode("utf-8"))])

    vol = np.full(domain.dims, TISSUE_VALUE, dtype=np.float64)
    head = _ellipsoid(domain.dims, (nx / 2, ny / 2, nz / 2),
                      (nx * 0.46, ny * 0.46, nz * 0.46))
    vol[~head] = AIR_VALUE

    lo, hi = domain.plexus_voxels_range
    total = int(rng.integers(lo, hi + 1))
    halves = (total - total // 2, total // 2)

    mask = np.zeros(domain.dims, dtype=bool)
    for cx_frac, half in zip((0.34, 0.66), halves):
        center = (cx_frac * nx + rng.uniform(-1, 1),
                  ny / 2 + rng.uniform(-1, 1),
                  nz / 2 + rng.uniform(-1, 1))
        semi = (nx * 0.13 * rng.uniform(0.9, 1.1),
                ny * 0.20 * rng.uniform(0.9, 1.1),
                nz * 0.15 * rng.uniform(0.9, 1.1))
        vent = _ellipsoid(domain.dims, center, semi)
        vol[vent] = VENTRICLE_VALUE
        if half == 0:
            continue
        # Keep the blob strictly interior so the ventricle contains it.
        interior = _ellipsoid(domain.dims, center,
                              (max(semi[0] - 1.2, 0.5), max(semi[1] - 1.2, 0.5),
                               max(semi[2] - 1.2, 0.5)))
        blob = _grow_blob(rng, interior, half)
        mask |= blob
        vol[blob] = VENTRICLE_VALUE + domain.plexus_contrast

    vol = np.clip(vol, 0.0, None) ** domain.gamma

    if domain.blur_fwhm_mm > 0:
        sigma_vox = [domain.blur_fwhm_mm / _FWHM_TO_SIGMA / s for s in domain.spacing_mm]
        vol = ndimage.gaussian_filter(vol, sigma_vox)

    if domain.bias_amplitude > 0:
        x, y, z = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in domain.dims),
                              indexing="ij")
        fx = rng.uniform(0.5, 1.5)
        fy = rng.uniform(0.5, 1.5)
        fz = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0, 2 * np.pi, 3)
        bias = (np.cos(np.pi * x / nx * fx + phase[0])
                * np.cos(np.pi * y / ny * fy + phase[1])
                * np.cos(np.pi * z / nz * fz + phase[2]))
        vol = vol * (1.0 + domain.bias_amplitude * bias)

    if domain.noise_sigma > 0:
        vol = vol + rng.normal(0.0, domain.noise_sigma, domain.dims)

    subject_id = f"{domain.domain_id}_s{int(subject_seed) & 0xFFFFFFFF:08x}"
    volume = Volume(vol.astype(np.float32), domain.spacing_mm, domain.domain_id,
                    subject_id, int(subject_seed))
    return volume, Mask(mask.astype(np.uint8), domain.spacing_mm)
