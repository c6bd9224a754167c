"""Bjøntegaard-delta comparison of rate-metric curves.

Both curves are interpolated with monotone piecewise-cubic (PCHIP) splines
of metric versus log(bpp) and integrated over their common log-rate range.
``bd_gap`` is the mean vertical gap (test minus anchor); ``bd_metric``
reports it as a percentage of the anchor's mean metric over that range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator

METRICS = ("psnr", "ms_ssim", "fid", "perceptual")


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float
    ms_ssim: float
    fid: float | None = None
    perceptual: float | None = None

    def __post_init__(self) -> None:
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")

    def value(self, metric: str) -> float:
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}")
        v = getattr(self, metric)
        if v is None:
            raise ValueError(f"point at {self.bpp:g} bpp has no {metric} value")
        return float(v)


@dataclass(frozen=True)
class RDCurve:
    label: str
    points: tuple[RDPoint, ...]

    def __init__(self, label: str, points):
        pts = tuple(sorted(points, key=lambda p: p.bpp))
        rates = [p.bpp for p in pts]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"curve {label!r} has repeated bpp values")
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "points", pts)

    def log_rates(self) -> np.ndarray:
        return np.log([p.bpp for p in self.points])

    def values(self, metric: str) -> np.ndarray:
        return np.array([p.value(metric) for p in self.points])


@dataclass(frozen=True)
class BDResult:
    bd_value: float  # percent
    metric: str
    anchor: str
    test: str
    log_rate_range: tuple[float, float]
    gap: float  # mean vertical gap, metric units


def _overlap(anchor: RDCurve, test: RDCurve) -> tuple[float, float]:
    for c in (anchor, test):
        if len(c.points) < 3:
            raise ValueError(f"curve {c.label!r} needs at least 3 points, has {len(c.points)}")
    ra, rt = anchor.log_rates(), test.log_rates()
    lo, hi = max(ra[0], rt[0]), min(ra[-1], rt[-1])
    if not lo < hi:
        raise ValueError(f"curves {anchor.label!r} and {test.label!r} share no rate range")
    return float(lo), float(hi)


def _mean_over(curve: RDCurve, metric: str, lo: float, hi: float) -> float:
    spline = PchipInterpolator(curve.log_rates(), curve.values(metric))
    return float(spline.integrate(lo, hi)) / (hi - lo)


def bd_gap(anchor: RDCurve, test: RDCurve, metric: str = "psnr") -> float:
    lo, hi = _overlap(anchor, test)
    return _mean_over(test, metric, lo, hi) - _mean_over(anchor, metric, lo, hi)


def bd_metric(anchor: RDCurve, test: RDCurve, metric: str = "psnr") -> BDResult:
    lo, hi = _overlap(anchor, test)
    base = _mean_over(anchor, metric, lo, hi)
    gap = _mean_over(test, metric, lo, hi) - base
    if base == 0:
        raise ZeroDivisionError(f"anchor mean {metric} is zero over the overlap; percentage undefined")
    pct = 100.0 * gap / abs(base)
    if not math.isfinite(pct):
        raise ValueError("BD value is not finite")
    return BDResult(pct, metric, anchor.label, test.label, (lo, hi), gap)
