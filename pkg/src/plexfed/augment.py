"""Training-time augmentation menu for (Volume, Mask) pairs.

Each transform fires independently with its configured probability. Geometric
transforms (flip/rotation, elastic warp) are applied identically to the volume
and the mask; intensity transforms (shift, bias field, ringing, motion and
ghost blends) touch only the volume. The mask stays strictly binary.

Amplitude constants below are fixed, documented choices; only the fire
probabilities are externally meaningful.
"""

from functools import lru_cache

import numpy as np
from scipy import ndimage

from .volume import Mask, Volume


@lru_cache(maxsize=8)
def _index_grids(dims: tuple[int, int, int]) -> tuple[np.ndarray, ...]:
    return tuple(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims),
                             indexing="ij"))

# (name, probability) in application order.
TRANSFORM_PROBS: tuple[tuple[str, float], ...] = (
    ("flip_rotate", 0.15),
    ("intensity_shift", 0.15),
    ("bias_field", 0.15),
    ("gibbs_ringing", 0.15),
    ("motion", 0.30),
    ("elastic", 0.30),
    ("ghost", 0.30),
)

SHIFT_RANGE = 0.10          # additive intensity shift, uniform in +-SHIFT_RANGE
BIAS_AMPLITUDE = 0.20       # multiplicative low-order field strength
GIBBS_KEEP_RANGE = (0.55, 0.80)   # fraction of k-space retained per axis
MOTION_WEIGHT_RANGE = (0.15, 0.35)
MOTION_MAX_SHIFT = 2        # voxels
ELASTIC_AMPLITUDE_RANGE = (0.5, 1.5)  # voxels
ELASTIC_FREQ_RANGE = (0.5, 1.5)       # half-periods across the grid
GHOST_WEIGHT_RANGE = (0.10, 0.20)


def fire_plan(rng: np.random.Generator) -> dict[str, bool]:
    """Draw the independent fire decision for every transform, in menu order."""
    return {name: bool(rng.random() < p) for name, p in TRANSFORM_PROBS}


def _flip_rotate(rng, vol, lab):
    axis = int(rng.integers(3))
    vol = np.flip(vol, axis=axis)
    lab = np.flip(lab, axis=axis)
    planes = ((0, 1), (0, 2), (1, 2))
    plane = planes[int(rng.integers(3))]
    k = int(rng.integers(4))
    # 90-degree turns swap the plane's axes; keep them only on square planes
    # so dims never change. Otherwise fall back to a 180-degree turn.
    if k % 2 == 1 and vol.shape[plane[0]] != vol.shape[plane[1]]:
        k = 2
    if k:
        vol = np.rot90(vol, k=k, axes=plane)
        lab = np.rot90(lab, k=k, axes=plane)
    return vol, lab


def _intensity_shift(rng, vol):
    return vol + np.float32(rng.uniform(-SHIFT_RANGE, SHIFT_RANGE))


def _separable_cos_field(dims, freq, phase) -> np.ndarray:
    """Product of per-axis cosines, built from 1D factors (cheap at any size)."""
    factors = []
    for axis, n in enumerate(dims):
        c = np.cos(np.pi * np.arange(n, dtype=np.float64) / n * freq[axis] + phase[axis])
        shape = [1, 1, 1]
        shape[axis] = n
        factors.append(c.reshape(shape))
    return factors[0] * factors[1] * factors[2]


def _bias_field(rng, vol):
    freq = rng.uniform(0.5, 1.5, 3)
    phase = rng.uniform(0, 2 * np.pi, 3)
    field = _separable_cos_field(vol.shape, freq, phase)
    return (vol * (1.0 + BIAS_AMPLITUDE * field)).astype(np.float32)


def _gibbs_ringing(rng, vol):
    keep = rng.uniform(*GIBBS_KEEP_RANGE)
    spectrum = np.fft.fftn(vol.astype(np.float64))
    for axis, n in enumerate(vol.shape):
        freq = np.abs(np.fft.fftfreq(n))
        cut = np.ones(n, dtype=bool)
        cut[freq > 0.5 * keep] = False
        shape = [1, 1, 1]
        shape[axis] = n
        spectrum = spectrum * cut.reshape(shape)
    return np.fft.ifftn(spectrum).real.astype(np.float32)


def _shifted_blend(rng, vol, weight_range, shift):
    w = rng.uniform(*weight_range)
    shifted = np.roll(vol, shift, axis=(0, 1, 2))
    return ((1.0 - w) * vol + w * shifted).astype(np.float32)


def _motion(rng, vol):
    shift = tuple(int(s) for s in rng.integers(-MOTION_MAX_SHIFT, MOTION_MAX_SHIFT + 1, 3))
    return _shifted_blend(rng, vol, MOTION_WEIGHT_RANGE, shift)


def _ghost(rng, vol):
    axis = int(rng.integers(3))
    shift = [0, 0, 0]
    shift[axis] = vol.shape[axis] // 4
    return _shifted_blend(rng, vol, GHOST_WEIGHT_RANGE, tuple(shift))


def _elastic(rng, vol, lab):
    """Smooth random displacement: one low-order cosine field per component.

    The volume is warped with trilinear sampling, the mask with nearest
    neighbor (same displacement field, so the pairing is preserved and the
    mask stays binary).
    """
    dims = vol.shape
    grid = _index_grids(dims)
    coords = []
    for c in range(3):
        amp = rng.uniform(*ELASTIC_AMPLITUDE_RANGE)
        freq = rng.uniform(*ELASTIC_FREQ_RANGE, 3)
        phase = rng.uniform(0, 2 * np.pi, 3)
        coords.append(grid[c] + amp * _separable_cos_field(dims, freq, phase))
    warped_vol = ndimage.map_coordinates(vol.astype(np.float64), coords, order=1,
                                         mode="nearest").astype(np.float32)
    nearest = [np.clip(np.rint(c).astype(np.intp), 0, n - 1)
               for c, n in zip(coords, dims)]
    warped_lab = lab[tuple(nearest)]
    return warped_vol, warped_lab.astype(np.uint8)


def augment(v: Volume, m: Mask, rng_seed: int) -> tuple[Volume, Mask]:
    """Apply the seeded augmentation menu to a paired (Volume, Mask).

    Returns the inputs unchanged (same objects) when no transform fires.
    Deterministic for rng_seed: fire decisions are drawn first, then the
    parameters of fired transforms in menu order.
    """
    if v.dims != m.dims:
        raise ValueError(f"volume dims {v.dims} do not match mask dims {m.dims}")
    rng = np.random.default_rng(rng_seed)
    plan = fire_plan(rng)
    if not any(plan.values()):
        return v, m

    vol = v.voxels.copy()
    lab = m.labels.copy()

    if plan["flip_rotate"]:
        vol, lab = _flip_rotate(rng, vol, lab)
    if plan["intensity_shift"]:
        vol = _intensity_shift(rng, vol)
    if plan["bias_field"]:
        vol = _bias_field(rng, vol)
    if plan["gibbs_ringing"]:
        vol = _gibbs_ringing(rng, vol)
    if plan["motion"]:
        vol = _motion(rng, vol)
    if plan["elastic"]:
        vol, lab = _elastic(rng, vol, lab)
    if plan["ghost"]:
        vol = _ghost(rng, vol)

    out_v = Volume(np.ascontiguousarray(vol), v.spacing_mm, v.dataset_id, v.subject_id, v.seed)
    out_m = Mask(np.ascontiguousarray(lab), m.spacing_mm)
    return out_v, out_m
