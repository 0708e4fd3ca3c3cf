"""Evaluation: image quality, trajectory error after similarity alignment,
exposure-time correlation and tone-curve error."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy import stats
from scipy.optimize import brentq

from . import losses


class InsufficientOverlap(ValueError):
    pass


def _as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for ``[0, 1]`` images; ``inf`` when identical."""
    mse = float(((_as_tensor(a) - _as_tensor(b)) ** 2).mean())
    return math.inf if mse == 0.0 else -10.0 * math.log10(mse)


def ssim(a, b) -> float:
    return float(losses.ssim(_as_tensor(a), _as_tensor(b)))


# ---------------------------------------------------------------------------
# trajectory error

@dataclass
class AteReport:
    mean: float
    std: float
    rmse: float
    residuals: list[float]
    rotation: list[list[float]]
    translation: list[float]
    scale: float
    alignment: str = "sim3"

    def to_dict(self) -> dict:
        return asdict(self)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Least-squares ``s, R, t`` minimising ``sum |dst - (s R src + t)|^2``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    rot = u @ sign @ vt
    var = (xs ** 2).sum() / len(src)
    scale = float(np.trace(np.diag(d) @ sign) / var) if with_scale and var > 0 else 1.0
    trans = mu_d - scale * rot @ mu_s
    return scale, rot, trans


def match_times(est_times, ref_times, tol: float) -> list[tuple[int, int]]:
    """Pairs ``(i, j)`` whose timestamps are nearest within ``tol``."""
    ref_times = np.asarray(ref_times, dtype=np.float64)
    pairs = []
    for i, t in enumerate(np.asarray(est_times, dtype=np.float64)):
        j = int(np.argmin(np.abs(ref_times - t)))
        if abs(ref_times[j] - t) <= tol:
            pairs.append((i, j))
    return pairs


def ate(est_times, est_positions, ref_times, ref_positions, tol: float = math.inf,
        with_scale: bool = True) -> AteReport:
    """Absolute trajectory error of camera positions after similarity alignment."""
    pairs = match_times(est_times, ref_times, tol)
    if len(pairs) < 3:
        raise InsufficientOverlap(f"only {len(pairs)} matched poses; need at least 3")
    est = np.asarray(est_positions, dtype=np.float64)[[i for i, _ in pairs]]
    ref = np.asarray(ref_positions, dtype=np.float64)[[j for _, j in pairs]]
    s, r, t = umeyama(est, ref, with_scale)
    res = np.linalg.norm(ref - (s * est @ r.T + t), axis=1)
    return AteReport(float(res.mean()), float(res.std()), float(np.sqrt((res ** 2).mean())), res.tolist(),
                     r.tolist(), t.tolist(), s, "sim3" if with_scale else "se3")


# ---------------------------------------------------------------------------
# exposure correlation

@dataclass
class CorrelationReport:
    pearson: float
    spearman: float
    kendall_tau_b: float
    pearson_linear: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def exposure_correlation(estimated, reference) -> CorrelationReport:
    """Pearson on log-durations, Spearman and tie-corrected Kendall tau-b."""
    est = np.asarray(estimated, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape or est.ndim != 1 or len(est) < 2:
        raise ValueError("need two equal-length sequences of at least 2 values")
    if np.any(est <= 0) or np.any(ref <= 0):
        raise ValueError("exposure durations must be positive")
    if np.ptp(est) == 0 or np.ptp(ref) == 0:
        nan = math.nan
        return CorrelationReport(nan, nan, nan, nan, degenerate=True)
    return CorrelationReport(
        float(stats.pearsonr(np.log(est), np.log(ref))[0]),
        float(stats.spearmanr(est, ref)[0]),
        float(stats.kendalltau(est, ref, variant="b")[0]),
        float(stats.pearsonr(est, ref)[0]),
    )


# ---------------------------------------------------------------------------
# tone curve error

@dataclass
class CrfError:
    error: float
    shifts: list[float]
    per_channel: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _shift_for_mean(curve, z: np.ndarray, target_mean: float, span: float) -> float:
    """Shift ``d`` such that ``mean(curve(z + d)) == target_mean``."""
    def gap(d):
        return float(np.mean(curve(z + d))) - target_mean
    lo, hi = -span, span
    if gap(lo) > 0 or gap(hi) < 0:
        return lo if abs(gap(lo)) < abs(gap(hi)) else hi
    return brentq(gap, lo, hi, xtol=1e-12)


def crf_curve_error(curve, z_table, values, z_range=None, span: float = 10.0) -> CrfError:
    """Mean absolute gap between ``curve`` and a sampled reference tone curve.

    ``curve`` maps a ``(n, 3)`` array of log-exposures to ``(n, 3)`` values.
    Each channel's log-exposure axis is defined only up to a shift (exposure
    times, white balance and irradiance share a scale), so per channel one
    shift is chosen that makes the curve's mean over the populated range
    equal to the reference mean.
    """
    z_table = np.asarray(z_table, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if z_range is not None:
        keep = (z_table >= z_range[0]) & (z_table <= z_range[1])
        z_table, values = z_table[keep], values[keep]
    shifts, gaps = [], []
    for c in range(3):
        def channel(z, c=c):
            zz = np.zeros((len(z), 3)) + z[:, None]
            return curve(zz)[:, c]
        d = _shift_for_mean(channel, z_table, float(values[:, c].mean()), span)
        shifts.append(float(d))
        gaps.append(float(np.abs(channel(z_table + d) - values[:, c]).mean()))
    return CrfError(float(np.mean(gaps)), shifts, gaps)


def table_curve(z_table, values):
    """Linear interpolant of a sampled ``(n, 3)`` tone curve."""
    z_table = np.asarray(z_table, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)

    def curve(z):
        z = np.asarray(z, dtype=np.float64)
        return np.stack([np.interp(z[..., c], z_table, values[:, c]) for c in range(3)], -1)
    return curve
