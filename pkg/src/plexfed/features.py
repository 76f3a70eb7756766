"""Per-voxel feature extraction for the linear segmenter.

Feature menu (all computed on a normalized volume, values roughly in [0, 1]):
    intensity            the voxel value itself
    local_mean           mean over a cubic window of radius r, edge-clamped
    local_std            std over the same window (population convention)
    gradient_magnitude   central differences with edge clamping, voxel units
    norm_x/y/z           voxel index / (n - 1) per axis (0.0 on size-1 axes)

The five-config pool gives the ensemble slots distinct capacities: two rich
7-feature configs at radius 2, two 5-feature configs at radius 1, and one
lean 4-feature config.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .volume import Volume

FEATURE_NAMES = ("intensity", "local_mean", "local_std", "gradient_magnitude",
                 "norm_x", "norm_y", "norm_z")


@dataclass(frozen=True)
class FeatureConfig:
    config_id: str
    features: tuple[str, ...]
    radius: int = 1

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if not self.config_id:
            raise ValueError("config_id must be non-empty")
        if not self.features:
            raise ValueError("feature set must be non-empty")
        unknown = [f for f in self.features if f not in FEATURE_NAMES]
        if unknown:
            raise ValueError(f"unknown features {unknown}; choose from {FEATURE_NAMES}")
        if len(set(self.features)) != len(self.features):
            raise ValueError("feature list contains duplicates")
        if int(self.radius) < 1:
            raise ValueError("radius must be a positive integer")
        object.__setattr__(self, "radius", int(self.radius))

    @property
    def n_features(self) -> int:
        return len(self.features)


def default_config_pool() -> tuple[FeatureConfig, ...]:
    """The five candidate configs used as ensemble slots."""
    rich = FEATURE_NAMES
    mid = ("intensity", "local_mean", "local_std", "gradient_magnitude")
    return (
        FeatureConfig("rich_a", rich, radius=2),
        FeatureConfig("rich_b", rich, radius=2),
        FeatureConfig("mid_a", mid + ("norm_y",), radius=1),
        FeatureConfig("mid_b", mid + ("norm_z",), radius=1),
        FeatureConfig("lean", mid, radius=1),
    )


def _norm_coord(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    return np.arange(n, dtype=np.float64) / (n - 1)


@lru_cache(maxsize=16)
def _coord_column(dims: tuple[int, int, int], axis: int) -> np.ndarray:
    shape = [1, 1, 1]
    shape[axis] = dims[axis]
    grid = np.broadcast_to(_norm_coord(dims[axis]).reshape(shape), dims)
    return np.ascontiguousarray(grid).ravel()


def extract_features(v: Volume, cfg: FeatureConfig) -> np.ndarray:
    """Feature matrix of shape (n_voxels, n_features), C-order voxel raveling.

    Expects a normalized volume (see normalize_intensity); feature columns
    follow cfg.features order.
    """
    x = v.voxels.astype(np.float64)
    dims = x.shape
    n = x.size
    r = cfg.radius
    m = float((2 * r + 1) ** 3)

    columns = {}
    need_window = "local_mean" in cfg.features or "local_std" in cfg.features
    if need_window:
        s1 = kernels.box_sums(x, r)
        mean = s1 / m
        if "local_std" in cfg.features:
            s2 = kernels.box_sums(x * x, r)
            var = s2 / m - mean * mean
            columns["local_std"] = np.sqrt(np.maximum(var, 0.0))
        columns["local_mean"] = mean
    if "gradient_magnitude" in cfg.features:
        columns["gradient_magnitude"] = kernels.gradient_magnitude(x)
    if "intensity" in cfg.features:
        columns["intensity"] = x

    out = np.empty((n, cfg.n_features), dtype=np.float64)
    axis_of = {"norm_x": 0, "norm_y": 1, "norm_z": 2}
    for j, name in enumerate(cfg.features):
        if name in axis_of:
            out[:, j] = _coord_column(dims, axis_of[name])
        else:
            out[:, j] = columns[name].ravel()
    return out
