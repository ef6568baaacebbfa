"""Monotone piecewise cubic Hermite interpolation (PCHIP).

Slopes follow Fritsch-Carlson: weighted harmonic mean of the adjacent
secants in the interior, a one-sided three-point formula at the ends, and
zero wherever the data has a local extremum or a flat step.  Monotone data
therefore gives a monotone interpolant with no overshoot.

Rate-quality curves are fitted as two interpolants against QP (QP to
log-rate and QP to VMAF); the Rate-VMAF curve is their composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence, Tuple

import numpy as np

from .core import EncodeRecord, InsufficientDataError, LadderkitError, Resolution, ValidationError


class DomainError(LadderkitError, ValueError):
    """Evaluation requested outside the knot span (no extrapolation)."""


def _edge_slope(h0: float, h1: float, d0: float, d1: float) -> float:
    m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1)
    if np.sign(m) != np.sign(d0):
        return 0.0
    if np.sign(d0) != np.sign(d1) and abs(m) > 3.0 * abs(d0):
        return 3.0 * d0
    return m


def pchip_slopes(x: Sequence[float], y: Sequence[float]) -> np.ndarray:
    """Fritsch-Carlson limited slopes at each knot.

    Raises:
        InsufficientDataError: fewer than two knots.
        ValidationError: abscissae not strictly increasing (includes duplicates).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("x and y must be 1-D arrays of equal length")
    n = x.size
    if n < 2:
        raise InsufficientDataError("PCHIP needs at least 2 knots")
    h = np.diff(x)
    if np.any(h <= 0):
        raise ValidationError("knot abscissae must be strictly increasing (duplicate or unsorted x)")
    delta = np.diff(y) / h
    if n == 2:
        return np.array([delta[0], delta[0]])

    m = np.zeros(n)
    for k in range(1, n - 1):
        d0, d1 = delta[k - 1], delta[k]
        if d0 * d1 <= 0.0:
            continue
        w1 = 2.0 * h[k] + h[k - 1]
        w2 = h[k] + 2.0 * h[k - 1]
        # Weighted harmonic mean, written without dividing by a tiny secant.
        m[k] = (w1 + w2) * d0 * d1 / (w1 * d1 + w2 * d0)
    m[0] = _edge_slope(h[0], h[1], delta[0], delta[1])
    m[-1] = _edge_slope(h[-1], h[-2], delta[-1], delta[-2])
    return m


@dataclass(frozen=True)
class InterpolatedCurve:
    """A fitted PCHIP interpolant, evaluable on ``[x[0], x[-1]]`` only."""

    x: np.ndarray
    y: np.ndarray
    slopes: np.ndarray

    @classmethod
    def fit(cls, x: Sequence[float], y: Sequence[float]) -> "InterpolatedCurve":
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return cls(x, y, pchip_slopes(x, y))

    @property
    def domain(self) -> Tuple[float, float]:
        return float(self.x[0]), float(self.x[-1])

    def __call__(self, xq):
        return pchip_eval(self, xq)

    def inverse(self, target, tol: float = 1e-9):
        """Abscissa where a strictly monotone interpolant takes ``target``.

        Vectorised safeguarded Newton; each target must lie within the range spanned
        by the end knots.  Scalar in, scalar out.
        """
        scalar = np.ndim(target) == 0
        t = np.atleast_1d(np.asarray(target, dtype=float))
        lo_x, hi_x = self.domain
        y_lo, y_hi = float(self.y[0]), float(self.y[-1])
        increasing = y_hi > y_lo
        ymin, ymax = min(y_lo, y_hi), max(y_lo, y_hi)
        if np.any(t < ymin - tol) or np.any(t > ymax + tol):
            bad = t[(t < ymin - tol) | (t > ymax + tol)][0]
            raise DomainError(f"value {bad} outside interpolant range [{ymin}, {ymax}]")
        # Bracket each target between consecutive knots, then run a
        # safeguarded Newton iteration inside the bracket.
        ys = self.y if increasing else self.y[::-1]
        xs = self.x if increasing else self.x[::-1]
        j = np.clip(np.searchsorted(ys, t, side="left"), 1, ys.size - 1)
        lo = np.minimum(xs[j - 1], xs[j])
        hi = np.maximum(xs[j - 1], xs[j])
        y0, y1 = ys[j - 1], ys[j]
        frac = np.where(y1 != y0, (t - y0) / np.where(y1 != y0, y1 - y0, 1.0), 0.5)
        x = xs[j - 1] + np.clip(frac, 0.0, 1.0) * (xs[j] - xs[j - 1])
        for _ in range(100):
            f = pchip_eval(self, x) - t
            d = pchip_derivative(self, x)
            # Converged once the Newton correction is below tol.
            done = (f == 0) | (np.abs(f) <= 0.5 * tol * np.abs(d)) | (hi - lo <= tol)
            if np.all(done):
                break
            below = (f < 0) == increasing
            lo = np.where(below & ~done, x, lo)
            hi = np.where(below | done, hi, x)
            with np.errstate(divide="ignore", invalid="ignore"):
                step = x - f / d
            bad = ~np.isfinite(step) | (step <= lo) | (step >= hi)
            x = np.where(done, x, np.where(bad, 0.5 * (lo + hi), step))
        out = np.clip(x, self.x[0], self.x[-1])
        return float(out[0]) if scalar else out


def pchip_eval(curve: InterpolatedCurve, xq):
    """Evaluate the cubic Hermite interpolant; exact at the knots.

    Accepts a scalar (returns a float) or an array-like (returns an array).

    Raises:
        DomainError: any query lies outside the knot span.
    """
    scalar = np.ndim(xq) == 0
    xq_arr = np.atleast_1d(np.asarray(xq, dtype=float))
    x, y, m = curve.x, curve.y, curve.slopes
    lo, hi = x[0], x[-1]
    if np.any(~np.isfinite(xq_arr)) or np.any(xq_arr < lo) or np.any(xq_arr > hi):
        bad = xq_arr[(xq_arr < lo) | (xq_arr > hi) | ~np.isfinite(xq_arr)]
        raise DomainError(f"x={bad[0]} outside interpolation domain [{lo}, {hi}]")

    k = np.clip(np.searchsorted(x, xq_arr, side="right") - 1, 0, x.size - 2)
    h = x[k + 1] - x[k]
    t = (xq_arr - x[k]) / h
    t2 = t * t
    t3 = t2 * t
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + t
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    out = h00 * y[k] + h10 * h * m[k] + h01 * y[k + 1] + h11 * h * m[k + 1]
    # Exact knot values (the polynomial form can be off by an ulp).
    left = xq_arr == x[k]
    right = xq_arr == x[k + 1]
    out[left] = y[k[left]]
    out[right] = y[k[right] + 1]
    return float(out[0]) if scalar else out


def pchip_derivative(curve: InterpolatedCurve, xq):
    """First derivative of the interpolant (one-sided at knots)."""
    scalar = np.ndim(xq) == 0
    xq_arr = np.atleast_1d(np.asarray(xq, dtype=float))
    x, y, m = curve.x, curve.y, curve.slopes
    if np.any(xq_arr < x[0]) or np.any(xq_arr > x[-1]):
        raise DomainError(f"derivative requested outside [{x[0]}, {x[-1]}]")
    k = np.clip(np.searchsorted(x, xq_arr, side="right") - 1, 0, x.size - 2)
    h = x[k + 1] - x[k]
    t = (xq_arr - x[k]) / h
    t2 = t * t
    d00 = (6 * t2 - 6 * t) / h
    d10 = 3 * t2 - 4 * t + 1
    d01 = (-6 * t2 + 6 * t) / h
    d11 = 3 * t2 - 2 * t
    out = d00 * y[k] + d10 * m[k] + d01 * y[k + 1] + d11 * m[k + 1]
    return float(out[0]) if scalar else out


class RQFit(NamedTuple):
    """QP-indexed interpolants of one rate-quality curve."""

    sequence_id: str
    resolution: Resolution
    log_rate: InterpolatedCurve
    vmaf: InterpolatedCurve

    @property
    def qp_span(self) -> Tuple[int, int]:
        lo, hi = self.log_rate.domain
        return int(math.ceil(lo)), int(math.floor(hi))

    def integer_qps(self) -> np.ndarray:
        lo, hi = self.qp_span
        return np.arange(lo, hi + 1)

    def dense(self, step: float = 1.0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(qp, log_rate, vmaf) arrays on a regular QP grid covering the span."""
        lo, hi = self.log_rate.domain
        n = int(math.floor((hi - lo) / step + 1e-9))
        qp = lo + step * np.arange(n + 1)
        if qp[-1] < hi - 1e-9:
            qp = np.append(qp, hi)
        return qp, self.log_rate(qp), self.vmaf(qp)

    def qp_at_log_rate(self, log_rate: float) -> float:
        return self.log_rate.inverse(log_rate)

    def vmaf_at_log_rate(self, log_rate: float) -> float:
        return float(self.vmaf(self.qp_at_log_rate(log_rate)))


def fit_rq_curve(records: Iterable[EncodeRecord]) -> RQFit:
    """Fit QP to log-rate and QP to VMAF interpolants from encode records.

    Raises:
        ValidationError: records mix sequences or resolutions, or repeat a QP.
        InsufficientDataError: fewer than two distinct QPs.
    """
    records = sorted(records, key=lambda r: r.qp)
    if len(records) < 2:
        raise InsufficientDataError("need at least 2 records at distinct QPs")
    seq, res = records[0].sequence_id, records[0].resolution
    if any(r.resolution != res for r in records):
        raise ValidationError("records mix resolutions")
    if any(r.sequence_id != seq for r in records):
        raise ValidationError("records mix sequences")
    qp = [r.qp for r in records]
    if len(set(qp)) != len(qp):
        raise ValidationError("records repeat a QP")
    return RQFit(
        seq,
        res,
        InterpolatedCurve.fit(qp, [r.log_rate for r in records]),
        InterpolatedCurve.fit(qp, [r.vmaf for r in records]),
    )
