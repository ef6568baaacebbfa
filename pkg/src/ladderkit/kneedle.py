"""Knee-point detection with the Kneedle algorithm.

The curve is min-max normalised to the unit square and compared against
the diagonal; local maxima of the difference curve are knee candidates,
confirmed once the difference falls to a sensitivity-dependent threshold.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from .core import InsufficientDataError, LadderkitError, Resolution, ValidationError
from .interp import RQFit

logger = logging.getLogger(__name__)

DEFAULT_SENSITIVITY = 1.0

# Corpus means of the knee QP per resolution, rounded; used when no knee is found.
KNEE_QP_PRIORS = {
    Resolution.R2160P: 30,
    Resolution.R1080P: 25,
    Resolution.R720P: 25,
    Resolution.R540P: 23,
}

PLANES = ("log_rate", "rate", "qp")


class NoKneeError(LadderkitError):
    pass


@dataclass(frozen=True)
class KneePoint:
    qp: int
    log_rate: float
    vmaf: float
    resolution: Resolution


def difference_curve(x: Sequence[float], y: Sequence[float]) -> np.ndarray:
    """Normalised difference ``y_n - x_n`` for a concave increasing curve."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xn = (x - x[0]) / (x[-1] - x[0])
    span = y.max() - y.min()
    yn = (y - y.min()) / span if span > 0 else np.zeros_like(y)
    return yn - xn


def kneedle(x: Sequence[float], y: Sequence[float], sensitivity: float = DEFAULT_SENSITIVITY,
            shape: str = "concave_increasing") -> Optional[int]:
    """Index of the first confirmed knee, or ``None``.

    A local maximum ``i`` of the difference curve ``d`` becomes a candidate
    with threshold ``T_i = d_i - S * mean(diff(x_n))``.  Scanning forward, the
    candidate is confirmed as soon as ``d`` falls to ``T_i`` or below; if a
    later local maximum rises above ``d_i`` first, it replaces the candidate.

    Raises:
        InsufficientDataError: fewer than 3 points.
        ValidationError: x not strictly increasing.
    """
    if shape != "concave_increasing":
        raise ValueError(f"unsupported curve shape {shape!r}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size:
        raise ValidationError("x and y must have the same length")
    if x.size < 3:
        raise InsufficientDataError("kneedle needs at least 3 points")
    if np.any(np.diff(x) <= 0):
        raise ValidationError("x must be strictly increasing")

    d = difference_curve(x, y)
    n = d.size
    step = float(np.mean(np.diff((x - x[0]) / (x[-1] - x[0]))))
    is_max = np.zeros(n, dtype=bool)
    is_max[1:-1] = (d[1:-1] > d[:-2]) & (d[1:-1] >= d[2:])
    if not is_max.any():
        return None

    candidate = None
    threshold = -math.inf
    for j in range(n):
        if is_max[j] and (candidate is None or d[j] > d[candidate]):
            candidate = j
            threshold = d[j] - sensitivity * step
            continue
        if candidate is not None and d[j] <= threshold:
            return candidate
    return None


def _plane_points(fit: RQFit, plane: str):
    qp = fit.integer_qps()[::-1]  # decreasing QP = increasing rate
    log_rate = fit.log_rate(qp)
    vmaf = fit.vmaf(qp)
    if plane == "log_rate":
        x = log_rate
    elif plane == "rate":
        x = np.exp(log_rate)
    elif plane == "qp":
        x = -qp.astype(float)
    else:
        raise ValueError(f"unknown knee plane {plane!r}; choose from {PLANES}")
    return qp, log_rate, vmaf, x


def knee_qp(fit: RQFit, sensitivity: float = DEFAULT_SENSITIVITY, plane: str = "log_rate") -> KneePoint:
    """Knee of a fitted rate-quality curve, evaluated at every integer QP of its span.

    Points are ordered by increasing rate (decreasing QP) and Kneedle runs on
    the chosen plane; the detected sample's QP is the knee QP.

    Raises:
        NoKneeError: the curve has no detectable knee.
    """
    qp, log_rate, vmaf, x = _plane_points(fit, plane)
    idx = kneedle(x, vmaf, sensitivity)
    if idx is None:
        raise NoKneeError(f"{fit.sequence_id}/{fit.resolution}: no knee detected")
    return KneePoint(int(qp[idx]), float(log_rate[idx]), float(vmaf[idx]), fit.resolution)


def knee_qp_or_prior(fit: RQFit, sensitivity: float = DEFAULT_SENSITIVITY,
                     plane: str = "log_rate") -> int:
    """Knee QP, falling back to the resolution's corpus prior with a warning."""
    try:
        return knee_qp(fit, sensitivity, plane).qp
    except NoKneeError:
        prior = KNEE_QP_PRIORS[fit.resolution]
        logger.warning("%s/%s: no knee found, using prior QP %d",
                       fit.sequence_id, fit.resolution, prior)
        return prior


KNEE_CSV_COLUMNS = ("sequence",) + tuple(r.label for r in Resolution.descending())


def write_knees_csv(knees: Mapping[str, Mapping[Resolution, float]], path) -> Path:
    """One row per sequence, one column per resolution label."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(KNEE_CSV_COLUMNS)
        for sid, row in knees.items():
            w.writerow([sid] + [repr(float(row[r])) for r in Resolution.descending()])
    return path


def read_knees_csv(path) -> Dict[str, Dict[Resolution, float]]:
    """``{sequence: {resolution: knee_qp}}``; knees may be real-valued predictions.

    Raises:
        ValidationError: missing columns or non-numeric cells.
    """
    path = Path(path)
    out: Dict[str, Dict[Resolution, float]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in KNEE_CSV_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise ValidationError(f"{path}: missing columns {', '.join(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                out[row["sequence"]] = {r: float(row[r.label]) for r in Resolution.descending()}
            except ValueError as exc:
                raise ValidationError(f"{path}: line {line}: {exc}") from exc
    return out
