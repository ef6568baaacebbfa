"""Ladder comparison: BD-Rate, RL-hits and corpus-level summaries."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import LadderkitError, ValidationError
from .ladder import Ladder

logger = logging.getLogger(__name__)

# Above this the standardised cubic Vandermonde is treated as near-singular.
MAX_CONDITION = 1e8


class NoOverlapError(LadderkitError):
    """The two rate-quality sets share no VMAF range."""


@dataclass(frozen=True)
class BDResult:
    bd_rate_percent: float
    overlap: Tuple[float, float]
    fit: str  # "cubic" or "linear"
    diagnostics: Tuple[str, ...] = ()


def _prepare(points: Sequence[Tuple[float, float]], name: str) -> Tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValidationError(f"{name}: expected (rate, vmaf) pairs")
    if arr.shape[0] < 2:
        raise ValidationError(f"{name}: BD-Rate needs at least 2 points, got {arr.shape[0]}")
    if np.any(arr[:, 0] <= 0) or not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: rates must be positive and finite")
    order = np.lexsort((arr[:, 0], arr[:, 1]))
    return arr[order, 1], np.log(arr[order, 0])


def _cubic(v: np.ndarray, lr: np.ndarray, lo: float, hi: float) -> Tuple[Optional[np.poly1d], str]:
    """Cubic log-rate(VMAF) fit, or ``None`` with the reason it was rejected."""
    if v.size < 4:
        return None, f"{v.size} points, cubic needs 4"
    if np.unique(v).size < 4:
        return None, "fewer than 4 distinct VMAF values"
    u = (v - v.mean()) / v.std()
    cond = np.linalg.cond(np.vander(u, 4))
    if not cond < MAX_CONDITION:
        return None, f"near-singular Vandermonde (cond {cond:.3g})"
    poly = np.poly1d(np.polyfit(v, lr, 3))
    # Rate must grow with quality; a cubic that bends back over the shared
    # range (typical when points cluster near VMAF 100) is rejected.
    slope = poly.deriv()(np.linspace(lo, hi, 257))
    if np.any(slope <= 0):
        return None, "cubic not increasing over the overlap"
    return poly, ""


def _linear_integral(v: np.ndarray, lr: np.ndarray, lo: float, hi: float) -> float:
    # Equal VMAF values keep the lowest rate (the dominating point).
    uv, idx = np.unique(v, return_index=True)
    ulr = np.array([lr[v == x].min() for x in uv])
    knots = np.concatenate([[lo], uv[(uv > lo) & (uv < hi)], [hi]])
    vals = np.interp(knots, uv, ulr)
    return float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(knots)))


def bd_rate(test: Sequence[Tuple[float, float]], reference: Sequence[Tuple[float, float]],
            force_linear: bool = False) -> BDResult:
    """Bjøntegaard delta rate of ``test`` against ``reference`` in percent.

    Log-rate is fitted as a cubic polynomial in VMAF for each set and the
    fits are integrated over the shared VMAF range.  Positive values mean
    the test needs more rate.  Sets with fewer than four distinct VMAF
    values, an ill-conditioned cubic, or a cubic that is not increasing
    over the shared range fall back to piecewise-linear interpolation for
    both sets.

    Raises:
        ValidationError: fewer than 2 points or non-positive rates.
        NoOverlapError: the VMAF ranges do not overlap.
    """
    v_t, lr_t = _prepare(test, "test")
    v_r, lr_r = _prepare(reference, "reference")
    lo = max(v_t.min(), v_r.min())
    hi = min(v_t.max(), v_r.max())
    if not hi > lo:
        raise NoOverlapError(f"VMAF ranges [{v_t.min()}, {v_t.max()}] and "
                             f"[{v_r.min()}, {v_r.max()}] do not overlap")
    diags: List[str] = []
    fits = []
    if not force_linear:
        for v, lr, name in ((v_t, lr_t, "test"), (v_r, lr_r, "reference")):
            poly, why = _cubic(v, lr, lo, hi)
            if poly is None:
                diags.append(f"{name}: {why}")
                break
            fits.append(poly)
    if len(fits) == 2:
        p_t, p_r = (np.polyint(p) for p in fits)
        int_t = p_t(hi) - p_t(lo)
        int_r = p_r(hi) - p_r(lo)
        kind = "cubic"
    else:
        if diags:
            logger.debug("BD-Rate linear fallback: %s", "; ".join(diags))
        int_t = _linear_integral(v_t, lr_t, lo, hi)
        int_r = _linear_integral(v_r, lr_r, lo, hi)
        kind = "linear"
    avg = (int_t - int_r) / (hi - lo)
    return BDResult(float((math.exp(avg) - 1.0) * 100.0), (float(lo), float(hi)), kind, tuple(diags))


def bd_rate_ladders(test: Ladder, reference: Ladder, **kwargs) -> BDResult:
    return bd_rate(test.points(), reference.points(), **kwargs)


def rl_hits(estimated: Ladder, reference: Ladder) -> float:
    """Percentage of reference rungs whose (resolution, QP) the estimate also has."""
    if not reference.rungs:
        return 0.0
    ref = {r.key for r in reference.rungs}
    hits = len(ref & {r.key for r in estimated.rungs})
    return 100.0 * hits / len(ref)


@dataclass(frozen=True)
class SequenceResult:
    sequence_id: str
    bd_rate: float
    rl_hits: float
    tally: int
    fit: str = "cubic"


@dataclass
class CorpusReport:
    method: str
    n_sequences: int
    mean_bd_rate: float
    mad_bd_rate: float
    mean_rl_hits: float
    max_tally: int
    rl_tally: int
    encode_reduction: float
    per_sequence: List[SequenceResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_sequence"] = [asdict(s) for s in self.per_sequence]
        return d


def mean_and_mad(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and mean absolute deviation about the mean."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValidationError("no values")
    m = float(np.mean(x))
    return m, float(np.mean(np.abs(x - m)))


def encode_reduction(tally: int, rl_tally: int) -> float:
    """Percent of the reference encodes saved by a method spending ``tally``."""
    if rl_tally <= 0:
        raise ValidationError("rl_tally must be positive")
    return (1.0 - tally / rl_tally) * 100.0


def corpus_report(results: Sequence[SequenceResult], rl_tally: int, method: str = "") -> CorpusReport:
    """Summarise per-sequence results (order does not matter).

    Raises:
        ValidationError: no sequences.
    """
    if not results:
        raise ValidationError("corpus_report needs at least one sequence")
    results = sorted(results, key=lambda r: r.sequence_id)
    mean, mad = mean_and_mad([r.bd_rate for r in results])
    max_tally = max(r.tally for r in results)
    return CorpusReport(
        method=method,
        n_sequences=len(results),
        mean_bd_rate=mean,
        mad_bd_rate=mad,
        mean_rl_hits=float(np.mean([r.rl_hits for r in results])),
        max_tally=max_tally,
        rl_tally=rl_tally,
        encode_reduction=encode_reduction(max_tally, rl_tally),
        per_sequence=list(results),
    )


def compare_ladders(test: Mapping[str, Ladder], reference: Mapping[str, Ladder],
                    tallies: Optional[Mapping[str, int]] = None) -> List[SequenceResult]:
    """Per-sequence BD-Rate and RL-hits for sequences present in both sets."""
    missing = sorted(set(test) ^ set(reference))
    if missing:
        logger.warning("sequences in only one ladder set are skipped: %s", ", ".join(missing))
    out = []
    for sid in sorted(set(test) & set(reference)):
        bd = bd_rate_ladders(test[sid], reference[sid])
        out.append(SequenceResult(sid, bd.bd_rate_percent, rl_hits(test[sid], reference[sid]),
                                  int((tallies or {}).get(sid, 0)), bd.fit))
    return out


def histogram(values: Sequence[float], bins: int = 20) -> Tuple[np.ndarray, np.ndarray]:
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins)
    return counts, edges


def write_histogram_csv(values: Sequence[float], path, bins: int = 20) -> Path:
    counts, edges = histogram(values, bins)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    return path


def write_report(report: CorpusReport, out_dir, bins: int = 20) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rep = out_dir / "report.json"
    rep.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    hist = write_histogram_csv([s.bd_rate for s in report.per_sequence], out_dir / "bdrate_hist.csv", bins)
    return {"report": rep, "histogram": hist}
