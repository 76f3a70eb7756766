"""Cohort-level quality screen for intensity volumes.

Each volume is summarized by a fixed 4-metric vector; metrics are z-scored
across the cohort and a subject is flagged iff any |z| exceeds the threshold.
A zero-variance metric yields z = 0 for everyone (identical cohorts produce
no spurious flags).
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .volume import Volume

METRIC_NAMES = ("mean_intensity", "std_intensity", "shell_snr", "gradient_energy")

SHELL_THICKNESS = 2  # voxels


class CohortTooSmallError(ValueError):
    """z-scores over fewer than 3 volumes are meaningless."""


@dataclass(frozen=True)
class QCReport:
    metrics: dict[str, np.ndarray]   # subject_id -> 4-vector, METRIC_NAMES order
    zscores: dict[str, np.ndarray]   # subject_id -> 4-vector
    flagged: tuple[str, ...]         # sorted subject ids with any |z| > threshold
    z_threshold: float

    def is_flagged(self, subject_id: str) -> bool:
        return subject_id in self.flagged


def _border_shell(shape, thickness: int) -> np.ndarray:
    shell = np.ones(shape, dtype=bool)
    t = thickness
    if all(n > 2 * t for n in shape):
        shell[t:-t, t:-t, t:-t] = False
    return shell


def volume_metrics(v: Volume) -> np.ndarray:
    """The 4-metric vector: mean, std, border-shell SNR proxy, gradient energy.

    The SNR proxy is shell mean / shell std over a 2-voxel border shell
    (0.0 when the shell is flat).
    """
    x = v.voxels.astype(np.float64)
    shell = _border_shell(x.shape, SHELL_THICKNESS)
    shell_vals = x[shell]
    shell_std = float(shell_vals.std())
    snr = float(shell_vals.mean() / shell_std) if shell_std > 0 else 0.0
    grad = kernels.gradient_magnitude(x)
    return np.array([float(x.mean()), float(x.std()), snr, float((grad ** 2).mean())])


def qc_screen(volumes: list[Volume], z_threshold: float = 3.0) -> QCReport:
    """Screen a cohort: flag subjects whose metrics deviate from the cohort.

    Flags are invariant to the order of the input list.
    """
    if len(volumes) < 3:
        raise CohortTooSmallError(f"qc_screen needs >= 3 volumes, got {len(volumes)}")

    order = sorted(range(len(volumes)), key=lambda i: volumes[i].subject_id)
    ids = [volumes[i].subject_id for i in order]
    table = np.stack([volume_metrics(volumes[i]) for i in order])

    mean = table.mean(axis=0)
    std = table.std(axis=0)
    z = np.zeros_like(table)
    nonzero = std > 0
    z[:, nonzero] = (table[:, nonzero] - mean[nonzero]) / std[nonzero]

    flagged = tuple(sorted(ids[i] for i in range(len(ids))
                           if np.any(np.abs(z[i]) > z_threshold)))
    return QCReport(
        metrics={sid: table[i] for i, sid in enumerate(ids)},
        zscores={sid: z[i] for i, sid in enumerate(ids)},
        flagged=flagged,
        z_threshold=float(z_threshold),
    )
