"""Distortion, Bjontegaard delta-rate and encoder/decoder time ratios."""

import csv
import math
import warnings
from typing import NamedTuple, Sequence

import numpy as np

from .errors import PreconditionError

PEAK = 255.0


class RdPoint(NamedTuple):
    rate: float
    psnr: float


class TimingPair(NamedTuple):
    baseline_seconds: float
    modified_seconds: float


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise PreconditionError(f"frame shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(value: float) -> float:
    if value == 0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / value)


def psnr(a, b) -> float:
    """PSNR in dB for 8-bit samples; ``inf`` for identical inputs."""
    return psnr_from_mse(mse(a, b))


def _curve(points, name):
    points = [RdPoint(float(r), float(p)) for r, p in points]
    if len(points) < 4:
        raise PreconditionError(f"{name} curve needs at least 4 RD points, got {len(points)}")
    rates = np.array([p.rate for p in points])
    psnrs = np.array([p.psnr for p in points])
    if (rates <= 0).any():
        raise PreconditionError(f"{name} curve has non-positive rates")
    if not np.isfinite(psnrs).all():
        raise PreconditionError(f"{name} curve has non-finite PSNR values")
    if len(np.unique(psnrs)) != len(psnrs):
        raise PreconditionError(f"{name} curve has repeated PSNR values")
    order = np.argsort(rates)
    if not (np.diff(psnrs[order]) > 0).all():
        warnings.warn(f"{name} RD curve is not monotone; BD-rate may be unreliable")
    return np.log10(rates), psnrs


def bd_log_delta(anchor: Sequence, test: Sequence) -> float:
    """Mean log10-rate difference (test - anchor) over the shared PSNR range."""
    log_a, psnr_a = _curve(anchor, "anchor")
    log_t, psnr_t = _curve(test, "test")
    lo = max(psnr_a.min(), psnr_t.min())
    hi = min(psnr_a.max(), psnr_t.max())
    if not lo < hi:
        raise PreconditionError(f"PSNR ranges do not overlap ({lo:.4f} >= {hi:.4f})")
    # cubic log-rate as a function of PSNR, integrated in closed form
    int_a = np.polyint(np.polyfit(psnr_a, log_a, 3))
    int_t = np.polyint(np.polyfit(psnr_t, log_t, 3))
    area_a = np.polyval(int_a, hi) - np.polyval(int_a, lo)
    area_t = np.polyval(int_t, hi) - np.polyval(int_t, lo)
    return float((area_t - area_a) / (hi - lo))


def bd_rate(anchor: Sequence, test: Sequence) -> float:
    """Bjontegaard delta-rate in percent; negative means the test saves bits."""
    return 100.0 * (10.0 ** bd_log_delta(anchor, test) - 1.0)


def read_rd_csv(path):
    """``rate,psnr`` lines; a non-numeric first line is taken as a header."""
    points = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or not "".join(row).strip():
                continue
            try:
                points.append(RdPoint(float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                if i == 0:
                    continue
                raise PreconditionError(f"{path}:{i + 1}: expected 'rate,psnr', got {row!r}")
    return points


def _check_timing(t):
    t = TimingPair(*t)
    if t.baseline_seconds <= 0:
        raise PreconditionError(f"baseline time must be positive, got {t.baseline_seconds}")
    if t.modified_seconds <= 0:
        raise PreconditionError(f"modified time must be positive, got {t.modified_seconds}")
    return t


def timing_ratio(t) -> float:
    """Relative time increase (T' - T) / T."""
    t = _check_timing(t)
    return (t.modified_seconds - t.baseline_seconds) / t.baseline_seconds


def time_fraction(t) -> float:
    """T' / T, the form time tables usually print as a percentage."""
    t = _check_timing(t)
    return t.modified_seconds / t.baseline_seconds
