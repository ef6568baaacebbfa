"""Pareto-front extraction across resolutions and cross-over QP geometry."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.optimize import brentq

from .core import ADJACENT_PAIRS, EncodeRecord, LadderkitError, Resolution, ValidationError
from .interp import RQFit

logger = logging.getLogger(__name__)

ROUNDING = ("nearest", "floor", "ceil")


class NoOverlapError(LadderkitError):
    """Two curves share no log-rate range."""


class FrontPoint(NamedTuple):
    log_rate: float
    vmaf: float
    qp: int
    resolution: Resolution

    @property
    def bitrate(self) -> float:
        return math.exp(self.log_rate)


class ParetoFront(tuple):
    """Non-dominated points sorted by log-rate ascending (VMAF non-decreasing)."""

    @property
    def log_rates(self) -> np.ndarray:
        return np.array([p.log_rate for p in self])

    @property
    def vmafs(self) -> np.ndarray:
        return np.array([p.vmaf for p in self])


def points_from_records(records: Iterable[EncodeRecord]) -> List[FrontPoint]:
    return [FrontPoint(r.log_rate, r.vmaf, r.qp, r.resolution) for r in records]


def points_from_fit(fit: RQFit) -> List[FrontPoint]:
    """Interpolated points at every integer QP of the fit's span."""
    qp = fit.integer_qps()
    lr = fit.log_rate(qp)
    vm = fit.vmaf(qp)
    return [FrontPoint(float(a), float(b), int(q), fit.resolution) for q, a, b in zip(qp, lr, vm)]


PointSets = Union[Iterable[FrontPoint], Mapping[Resolution, Iterable[FrontPoint]]]


def pareto_front(curves: PointSets) -> ParetoFront:
    """Non-dominated subset of the union of all curve points.

    A point is dropped if another has VMAF >= and log-rate <= with at least
    one strict.  Exact duplicates in (log-rate, VMAF) keep the higher
    resolution.

    Raises:
        ValidationError: no points given.
    """
    if isinstance(curves, Mapping):
        points = [p for pts in curves.values() for p in pts]
    else:
        points = list(curves)
    if not points:
        raise ValidationError("pareto_front needs at least one point")
    ordered = sorted(points, key=lambda p: (p.log_rate, -p.vmaf, -p.resolution.rank, -p.qp))
    front = []
    best = -math.inf
    for p in ordered:
        if p.vmaf > best:
            front.append(p)
            best = p.vmaf
    return ParetoFront(front)


@dataclass(frozen=True)
class CrossoverPair:
    """Where resolution ``high_res`` takes over from the adjacent ``low_res``.

    ``qp_high`` is the high-QP end of ``high_res`` on the front and
    ``qp_low`` the low-QP end of ``low_res``.
    """

    high_res: Resolution
    low_res: Resolution
    qp_high: int
    qp_low: int
    log_rate: float

    def __post_init__(self):
        if abs(self.high_res.rank - self.low_res.rank) != 1 or self.high_res < self.low_res:
            raise ValidationError(f"{self.high_res}/{self.low_res} are not adjacent (high, low)")


@dataclass(frozen=True)
class CrossoverResult:
    pair: Optional[CrossoverPair]
    diagnostic: str
    flips: int = 0


def _round_qp(value: float, mode: str) -> int:
    if mode == "nearest":
        return int(math.floor(value + 0.5))
    if mode == "floor":
        return int(math.floor(value + 1e-9))
    if mode == "ceil":
        return int(math.ceil(value - 1e-9))
    raise ValueError(f"unknown rounding {mode!r}; choose from {ROUNDING}")


def _log_rate_range(fit: RQFit):
    ends = fit.log_rate(np.array(fit.log_rate.domain))
    return float(min(ends)), float(max(ends))


def find_crossover(fit_high: RQFit, fit_low: RQFit, grid_step: float = 0.1,
                   rounding: str = "nearest", coincide_tol: float = 1e-9) -> CrossoverResult:
    """Locate the cross-over of two adjacent-resolution curves at equal log-rate.

    Both curves are densified on a ``grid_step`` QP grid; VMAF is compared at
    equal log-rate by inverting each QP to log-rate interpolant.  The sign
    change of ``vmaf_high - vmaf_low`` is then refined by bisection.  With
    several sign changes the one at the highest log-rate wins.

    Raises:
        NoOverlapError: the log-rate spans do not overlap.
        ValidationError: non-positive grid step or non-adjacent resolutions.
    """
    if grid_step <= 0:
        raise ValidationError("grid_step must be positive")
    lo_h, hi_h = _log_rate_range(fit_high)
    lo_l, hi_l = _log_rate_range(fit_low)
    lo, hi = max(lo_h, lo_l), min(hi_h, hi_l)
    if lo >= hi:
        raise NoOverlapError(
            f"{fit_high.resolution}/{fit_low.resolution}: log-rate spans [{lo_h:.4f}, {hi_h:.4f}] "
            f"and [{lo_l:.4f}, {hi_l:.4f}] do not overlap"
        )
    grid = np.concatenate([fit_high.dense(grid_step)[1], fit_low.dense(grid_step)[1], [lo, hi]])
    grid = np.unique(grid[(grid >= lo) & (grid <= hi)])

    def diff(lr):
        return (fit_high.vmaf(fit_high.log_rate.inverse(lr))
                - fit_low.vmaf(fit_low.log_rate.inverse(lr)))

    d = diff(grid)
    if np.all(np.abs(d) <= coincide_tol):
        return CrossoverResult(None, "degenerate: curves coincide")
    # Differences within the tolerance count as touches; this keeps rounding
    # noise on a shared VMAF plateau from registering as intersections.
    d = np.where(np.abs(d) <= coincide_tol, 0.0, d)
    sign = np.sign(d)
    # Carry the last non-zero sign across touches.
    for i in range(1, sign.size):
        if sign[i] == 0:
            sign[i] = sign[i - 1]
    for i in range(sign.size - 2, -1, -1):
        if sign[i] == 0:
            sign[i] = sign[i + 1]
    flips = np.nonzero(sign[1:] != sign[:-1])[0]
    if flips.size == 0:
        winner = fit_high.resolution if sign[0] > 0 else fit_low.resolution
        return CrossoverResult(None, f"dominated: {winner} is better over the shared span")
    if flips.size > 1:
        logger.warning("%s %s/%s: %d intersections, using the highest-rate one",
                       fit_high.sequence_id, fit_high.resolution, fit_low.resolution, flips.size)
    i = int(flips[-1])
    a, b = float(grid[i]), float(grid[i + 1])
    if d[i] == 0.0 or d[i + 1] == 0.0:
        r_star = a if d[i] == 0.0 else b
    else:
        r_star = brentq(lambda r: float(diff(r)), a, b, xtol=1e-12, rtol=4 * np.finfo(float).eps)

    def qp_on(fit: RQFit) -> int:
        q = _round_qp(float(fit.log_rate.inverse(r_star)), rounding)
        lo_q, hi_q = fit.qp_span
        return min(max(q, lo_q), hi_q)

    pair = CrossoverPair(fit_high.resolution, fit_low.resolution,
                         qp_on(fit_high), qp_on(fit_low), r_star)
    return CrossoverResult(pair, "ok" if flips.size == 1 else "multiple intersections",
                           int(flips.size))


def crossover_qps(fit_high: RQFit, fit_low: RQFit, grid_step: float = 0.1,
                  rounding: str = "nearest") -> Optional[CrossoverPair]:
    """Cross-over QP pair of adjacent resolutions, or ``None`` when there is none.

    See :func:`find_crossover` for the diagnostics behind a ``None``.
    """
    if abs(fit_high.resolution.rank - fit_low.resolution.rank) != 1:
        raise ValidationError("cross-overs are computed for adjacent resolutions only")
    if fit_high.resolution < fit_low.resolution:
        fit_high, fit_low = fit_low, fit_high
    return find_crossover(fit_high, fit_low, grid_step, rounding).pair


def sequence_crossovers(fits: Mapping[Resolution, RQFit], grid_step: float = 0.1,
                        rounding: str = "nearest") -> Dict[tuple, Optional[CrossoverPair]]:
    """Cross-overs for the three adjacent pairs present in ``fits``."""
    out = {}
    for high, low in ADJACENT_PAIRS:
        if high in fits and low in fits:
            try:
                out[(high, low)] = crossover_qps(fits[high], fits[low], grid_step, rounding)
            except NoOverlapError as exc:
                logger.warning("%s", exc)
                out[(high, low)] = None
    return out


def write_front_csv(fronts: Mapping[str, Sequence[FrontPoint]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "log_rate", "bitrate_kbps", "vmaf", "qp", "resolution"])
        for seq, front in fronts.items():
            for p in front:
                w.writerow([seq, repr(p.log_rate), repr(p.bitrate), repr(p.vmaf), p.qp,
                            p.resolution.label])
    return path


def write_crossovers_csv(rows: Mapping[str, Iterable[Optional[CrossoverPair]]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "high_res", "low_res", "qp_high", "qp_low", "log_rate"])
        for seq, pairs in rows.items():
            for pair in pairs:
                if pair is not None:
                    w.writerow([seq, pair.high_res.label, pair.low_res.label,
                                pair.qp_high, pair.qp_low, repr(pair.log_rate)])
    return path


def read_crossovers_csv(path) -> Dict[str, Dict[tuple, tuple]]:
    """``{sequence: {(high_res, low_res): (qp_high, qp_low)}}`` with real-valued QPs."""
    out: Dict[str, Dict[tuple, tuple]] = {}
    with Path(path).open(newline="") as fh:
        for line, row in enumerate(csv.DictReader(fh), start=2):
            try:
                key = (Resolution.from_label(row["high_res"]), Resolution.from_label(row["low_res"]))
                out.setdefault(row["sequence"], {})[key] = (float(row["qp_high"]), float(row["qp_low"]))
            except (KeyError, ValueError) as exc:
                raise ValidationError(f"{path}: line {line}: {exc}") from exc
    return out
