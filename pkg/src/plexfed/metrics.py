"""Evaluation mathematics: overlap scores, volumes, robust aggregates,
cross-domain sampling, and the predicted-vs-reference volume regression."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .volume import Mask


class MaskMismatchError(ValueError):
    """Masks disagree in dims or spacing."""


def dice_detail(pred: Mask, gt: Mask) -> tuple[float, bool]:
    """(Dice coefficient, empty-pair flag).

    Dice = 2|P & G| / (|P| + |G|) over foreground voxels. When both masks are
    empty the score is defined as 1.0 and the flag is set so reports can
    exclude such pairs.
    """
    if not pred.same_grid(gt):
        raise MaskMismatchError(
            f"mask grids disagree: {pred.dims}/{pred.spacing_mm} vs {gt.dims}/{gt.spacing_mm}")
    inter = int(np.count_nonzero(pred.labels & gt.labels))
    total = pred.foreground_count() + gt.foreground_count()
    if total == 0:
        return 1.0, True
    return 2.0 * inter / total, False


def dice(pred: Mask, gt: Mask) -> float:
    return dice_detail(pred, gt)[0]


def volume_mm3(m: Mask) -> float:
    """Foreground voxel count times the voxel volume in mm^3."""
    sx, sy, sz = m.spacing_mm
    return m.foreground_count() * sx * sy * sz


def _interpolated_quantile(sorted_vals: np.ndarray, p: float) -> float:
    """Linear interpolation between order statistics: h = (n-1)*p."""
    n = sorted_vals.size
    h = (n - 1) * p
    lo = int(np.floor(h))
    hi = min(lo + 1, n - 1)
    frac = h - lo
    return float(sorted_vals[lo] + frac * (sorted_vals[hi] - sorted_vals[lo]))


def median_iqr(values) -> tuple[float, float]:
    """(median, Q3 - Q1) with linear interpolation between order statistics."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("median_iqr of an empty list is undefined")
    s = np.sort(vals)
    med = _interpolated_quantile(s, 0.5)
    q1 = _interpolated_quantile(s, 0.25)
    q3 = _interpolated_quantile(s, 0.75)
    return med, q3 - q1


def general_sample(per_dataset: dict[str, list[tuple[str, float]]],
                   k: int = 10) -> dict[str, list[str]]:
    """Pick ~k subjects per dataset whose scores bracket the median evenly.

    Subjects are sorted by score ascending (ties broken by subject id) and the
    k evenly spaced quantiles q_i = 0.25 + 0.5*i/(k-1) are selected by nearest
    rank (half-up), stepping to the next unused rank (wrapping) on collision.
    Datasets with k or k-1 subjects contribute everything they have; smaller
    datasets are an error.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    chosen: dict[str, list[str]] = {}
    for dataset_id, subjects in per_dataset.items():
        n = len(subjects)
        if n < k - 1:
            raise ValueError(
                f"dataset {dataset_id!r} has {n} subjects; needs at least {k - 1}")
        ordered = sorted(subjects, key=lambda t: (t[1], t[0]))
        if n <= k:
            chosen[dataset_id] = [sid for sid, _ in ordered]
            continue
        ranks: list[int] = []
        for i in range(k):
            q = 0.25 + 0.5 * i / (k - 1) if k > 1 else 0.5
            r = int(np.floor((n - 1) * q + 0.5))
            while r in ranks:
                r = (r + 1) % n
            ranks.append(r)
        chosen[dataset_id] = [ordered[r][0] for r in ranks]
    return chosen


@dataclass(frozen=True)
class RegressionFit:
    slope: float
    intercept: float
    residual_variance: float
    eval_points: np.ndarray       # regressor values where the band is evaluated
    band_half_widths: np.ndarray  # 95% CI of the mean response at eval_points
    n: int


def ols_fit(pred_volumes, gt_volumes) -> RegressionFit:
    """Ordinary least squares of predicted volume on reference volume.

    The 95% band is the confidence interval of the mean response, using the
    t distribution with n-2 degrees of freedom; a perfect fit has zero band.
    """
    y = np.asarray(list(pred_volumes), dtype=np.float64)
    x = np.asarray(list(gt_volumes), dtype=np.float64)
    if y.shape != x.shape:
        raise ValueError("predicted and reference volume lists differ in length")
    n = x.size
    if n < 2:
        raise ValueError("regression needs at least 2 points")
    sxx = float(np.sum((x - x.mean()) ** 2))
    if sxx == 0.0:
        raise ValueError("reference volumes have zero variance")
    sxy = float(np.sum((x - x.mean()) * (y - y.mean())))
    slope = sxy / sxx
    intercept = float(y.mean() - slope * x.mean())
    residuals = y - (intercept + slope * x)
    rss = float(np.sum(residuals ** 2))
    s2 = rss / (n - 2) if n > 2 else 0.0
    if s2 <= 0.0:
        half = np.zeros_like(x)
        s2 = max(s2, 0.0)
    else:
        tq = float(stats.t.ppf(0.975, n - 2))
        half = tq * np.sqrt(s2 * (1.0 / n + (x - x.mean()) ** 2 / sxx))
    return RegressionFit(slope, intercept, s2, x.copy(), half, n)


# ---------------------------------------------------------------------------
# Report container
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SubjectRow:
    model_id: str
    dataset_id: str
    subject_id: str
    dice: float
    pred_vol_mm3: float
    gt_vol_mm3: float


@dataclass
class MetricsReport:
    """Per-subject rows plus Median[IQR] aggregates per (model, dataset)."""

    rows: list[SubjectRow] = field(default_factory=list)

    def add(self, row: SubjectRow) -> None:
        self.rows.append(row)

    def sorted_rows(self) -> list[SubjectRow]:
        return sorted(self.rows, key=lambda r: (r.model_id, r.dataset_id, r.subject_id))

    def cell(self, model_id: str, dataset_id: str) -> list[SubjectRow]:
        return [r for r in self.sorted_rows()
                if r.model_id == model_id and r.dataset_id == dataset_id]

    def aggregates(self) -> dict[tuple[str, str], tuple[float, float, int]]:
        cells: dict[tuple[str, str], list[float]] = {}
        for r in self.sorted_rows():
            cells.setdefault((r.model_id, r.dataset_id), []).append(r.dice)
        return {key: (*median_iqr(vals), len(vals)) for key, vals in cells.items()}

    def to_subject_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_id", "dataset_id", "subject_id", "dice",
                    "pred_vol_mm3", "gt_vol_mm3"])
        for r in self.sorted_rows():
            w.writerow([r.model_id, r.dataset_id, r.subject_id,
                        repr(r.dice), repr(r.pred_vol_mm3), repr(r.gt_vol_mm3)])
        return buf.getvalue()

    def to_aggregate_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_id", "dataset_id", "n", "median_dice", "iqr_dice"])
        for (model_id, dataset_id), (med, iqr, n) in sorted(self.aggregates().items()):
            w.writerow([model_id, dataset_id, n, repr(med), repr(iqr)])
        return buf.getvalue()

    @classmethod
    def from_subject_csv(cls, text: str) -> "MetricsReport":
        rows = []
        reader = csv.DictReader(io.StringIO(text))
        for rec in reader:
            rows.append(SubjectRow(rec["model_id"], rec["dataset_id"], rec["subject_id"],
                                   float(rec["dice"]), float(rec["pred_vol_mm3"]),
                                   float(rec["gt_vol_mm3"])))
        return cls(rows)
