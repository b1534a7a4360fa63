"""Image-quality and quantitative-map metrics, and their per-method report."""
from dataclasses import dataclass, field
from logging import getLogger
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage, stats

from .losses import GAUSSIAN_TAPS, K1, K2, gaussian_window
from .phantom import CSF, Phantom
from .shared import ShapeError, warning_suffix

LOGGER = getLogger(__name__)

#: PSNR reported for a perfect reconstruction
PSNR_CAP = 200.0
MIN_PAIRS = 8
TABLE_COLUMNS = ("psnr_0", "ssim_0", "t1_err", "t2_err")


def _check_pair(pred: np.ndarray, ref: np.ndarray):
    if np.shape(pred) != np.shape(ref):
        raise ShapeError(f"prediction {np.shape(pred)} vs reference {np.shape(ref)}")


def psnr(pred: np.ndarray, ref: np.ndarray, peak: Optional[float] = None) -> float:
    """``10 log10(peak^2 / MSE)`` on magnitudes; ``peak`` defaults to ``max |ref|``."""
    _check_pair(pred, ref)
    mag_p, mag_r = np.abs(pred), np.abs(ref)
    mse = float(np.mean((mag_p - mag_r) ** 2))
    if mse == 0:
        return PSNR_CAP
    if peak is None:
        peak = float(mag_r.max())
    return float(min(10 * np.log10(peak**2 / mse), PSNR_CAP)) if peak > 0 else 0.0


def _valid_filter(image: np.ndarray) -> np.ndarray:
    g = gaussian_window()
    out = ndimage.correlate1d(image, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    half = GAUSSIAN_TAPS // 2
    return out[half:-half, half:-half]


def ssim(
    pred: np.ndarray,
    ref: np.ndarray,
    data_range: Optional[float] = None,
    magnitude: bool = True,
) -> float:
    """Single-scale SSIM (11-tap Gaussian, sigma 1.5) averaged over the valid region."""
    _check_pair(pred, ref)
    x = np.abs(pred) if magnitude else np.asarray(pred, dtype=np.float64)
    y = np.abs(ref) if magnitude else np.asarray(ref, dtype=np.float64)
    if min(x.shape) < GAUSSIAN_TAPS:
        raise ValueError(f"slice {x.shape} is smaller than the {GAUSSIAN_TAPS}-tap window")
    if data_range is None:
        data_range = float(y.max() - y.min())
    if data_range <= 0:
        data_range = 1.0
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_x, mu_y = _valid_filter(x), _valid_filter(y)
    var_x = _valid_filter(x * x) - mu_x**2
    var_y = _valid_filter(y * y) - mu_y**2
    cov = _valid_filter(x * y) - mu_x * mu_y
    value = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )
    return float(value.mean())


def rel_param_error(est: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> Tuple[float, float]:
    """Mean and std (percent) of ``|gt - est| / gt`` over ``mask``."""
    _check_pair(est, gt)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("relative error over an empty mask")
    ref = np.asarray(gt, dtype=np.float64)[mask]
    if np.any(ref <= 0):
        raise ValueError("ground truth must be positive on the mask")
    err = np.abs(ref - np.asarray(est, dtype=np.float64)[mask]) / ref * 100
    return float(err.mean()), float(err.std())


def significance(first: Sequence[float], second: Sequence[float]) -> float:
    """Two-sided Wilcoxon signed-rank p-value of paired scores (1 when all tied)."""
    a = np.asarray(first, dtype=np.float64)
    b = np.asarray(second, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(
            f"paired scores must be equal-length vectors, got {a.shape}, {b.shape}"
        )
    if a.size < MIN_PAIRS:
        raise ValueError(f"need at least {MIN_PAIRS} paired observations, got {a.size}")
    if np.all(a == b):
        return 1.0
    return float(stats.wilcoxon(a, b, alternative="two-sided").pvalue)


def brain_slices(phantom: Phantom) -> List[int]:
    """Axial (last-axis) slices containing brain tissue."""
    mask = phantom.brain_mask()
    return [z for z in range(mask.shape[-1]) if mask[..., z].any()]


def quantitative_mask(phantom: Phantom) -> np.ndarray:
    """Brain voxels excluding CSF."""
    return phantom.brain_mask() & (phantom.labels != CSF)


def slice_scores(
    pred: np.ndarray, ref: np.ndarray, slices: Iterable[int]
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-slice PSNR and SSIM of one coefficient map, both with the volume peak."""
    peak = float(np.abs(ref).max())
    p, s = [], []
    for z in slices:
        p.append(psnr(pred[..., z], ref[..., z], peak=peak))
        s.append(ssim(pred[..., z], ref[..., z], data_range=peak if peak > 0 else None))
    return np.asarray(p), np.asarray(s)


def metric_table(frame: pd.DataFrame, columns: Sequence[str] = TABLE_COLUMNS) -> str:
    """Plain-text table of the headline columns, one row per method and R."""
    if frame.empty:
        return ""
    shown = ["method", "R"] + [c for c in columns if c in frame.columns]
    return frame[shown].to_string(index=False, float_format=lambda v: f"{v:.4g}")


@dataclass
class EvalReport:
    """Rows of per-method, per-acceleration metrics plus the per-slice scores behind
    them (for paired significance tests)."""

    rows: List[Dict[str, Any]] = field(default_factory=list)
    slices: Dict[Tuple[str, int], np.ndarray] = field(default_factory=dict)

    def add(
        self,
        method: str,
        R: int,
        pred: np.ndarray,
        ref: np.ndarray,
        phantom: Phantom,
        maps: Optional[Dict[str, np.ndarray]] = None,
        phantom_id: int = 0,
    ) -> Dict[str, Any]:
        pred, ref = np.asarray(pred), np.asarray(ref)
        _check_pair(pred, ref)
        chosen = brain_slices(phantom)
        row: Dict[str, Any] = {"method": method, "R": int(R), "phantom": int(phantom_id)}
        for c in range(ref.shape[0]):
            p, s = slice_scores(pred[c], ref[c], chosen)
            row[f"psnr_{c}"] = float(p.mean())
            row[f"psnr_{c}_std"] = float(p.std())
            row[f"ssim_{c}"] = float(s.mean())
            row[f"ssim_{c}_std"] = float(s.std())
            if c == 0:
                key = (method, int(R))
                previous = self.slices.get(key, np.zeros(0))
                self.slices[key] = np.concatenate([previous, p])
        if maps is not None:
            mask = quantitative_mask(phantom)
            for name, truth in (("t1", phantom.t1), ("t2", phantom.t2)):
                usable = mask & np.asarray(maps["matchable"], dtype=bool)
                if not usable.any():
                    LOGGER.warning(
                        f"no matchable voxels for {method} R={R} {warning_suffix('metrics')}"
                    )
                    continue
                mean, std = rel_param_error(maps[name], truth, usable)
                row[f"{name}_err"] = mean
                row[f"{name}_err_std"] = std
        self.rows.append(row)
        return row

    def to_frame(self) -> pd.DataFrame:
        """One row per (method, R), averaged over phantoms."""
        frame = pd.DataFrame(self.rows)
        if frame.empty:
            return frame
        metrics = [c for c in frame.columns if c not in ("method", "R", "phantom")]
        grouped = frame.groupby(["method", "R"], sort=True)[metrics].mean().reset_index()
        return grouped

    def paired_tests(self, reference: str) -> pd.DataFrame:
        """Wilcoxon p-values of every method against ``reference`` on slice PSNR."""
        rows = []
        for (method, R), scores in sorted(self.slices.items()):
            other = self.slices.get((reference, R))
            if method == reference or other is None or other.size != scores.size:
                continue
            if scores.size < MIN_PAIRS:
                continue
            rows.append(
                {
                    "method": method,
                    "reference": reference,
                    "R": R,
                    "p_value": significance(scores, other),
                }
            )
        return pd.DataFrame(rows)

    def text_table(self, columns: Sequence[str] = TABLE_COLUMNS) -> str:
        return metric_table(self.to_frame(), columns)
