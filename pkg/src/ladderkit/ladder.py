"""Bitrate ladder construction from a Pareto front and a set of target rates.

A ladder is an ordered list of rungs ``(rate, vmaf, qp, resolution)`` with
strictly increasing rate, non-decreasing VMAF and resolution, and QP
non-increasing within each resolution.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

from .core import EncodeRecord, Resolution, ValidationError
from .pareto import FrontPoint

logger = logging.getLogger(__name__)

DEFAULT_R_MIN = 150.0
DEFAULT_R_MAX = 25000.0
DEFAULT_V_HIGH = 97.0
# 0.01 VMAF per Mbps, expressed per kbps.
DEFAULT_EPSILON = 0.01 / 1000.0


@dataclass(frozen=True)
class Rung:
    rate_kbps: float
    vmaf: float
    qp: int
    resolution: Resolution
    # Set when the target undercuts the whole front and the lowest point was used.
    below_target: bool = False

    @property
    def key(self) -> Tuple[Resolution, int]:
        return self.resolution, self.qp

    @classmethod
    def from_point(cls, p: FrontPoint, below_target: bool = False) -> "Rung":
        return cls(p.bitrate, p.vmaf, p.qp, p.resolution, below_target)

    @classmethod
    def from_record(cls, r: EncodeRecord, below_target: bool = False) -> "Rung":
        return cls(r.bitrate, r.vmaf, r.qp, r.resolution, below_target)

    def to_dict(self) -> dict:
        d = {"rate_kbps": self.rate_kbps, "vmaf": self.vmaf, "qp": self.qp,
             "resolution": self.resolution.label}
        if self.below_target:
            d["below_target"] = True
        return d


@dataclass(frozen=True)
class Ladder:
    sequence_id: str
    rungs: Tuple[Rung, ...]
    target_rates: Tuple[float, ...] = ()
    method: str = "RL"

    def __len__(self) -> int:
        return len(self.rungs)

    def __iter__(self):
        return iter(self.rungs)

    @property
    def rates(self) -> List[float]:
        return [r.rate_kbps for r in self.rungs]

    @property
    def vmafs(self) -> List[float]:
        return [r.vmaf for r in self.rungs]

    def points(self) -> List[Tuple[float, float]]:
        """``(rate_kbps, vmaf)`` pairs, the input format of :func:`eval.bd_rate`."""
        return [(r.rate_kbps, r.vmaf) for r in self.rungs]

    def to_dict(self) -> dict:
        return {
            "sequence": self.sequence_id,
            "method": self.method,
            "target_rates": list(self.target_rates),
            "rungs": [r.to_dict() for r in self.rungs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ladder":
        try:
            rungs = tuple(
                Rung(float(r["rate_kbps"]), float(r["vmaf"]), int(r["qp"]),
                     Resolution.from_label(r["resolution"]), bool(r.get("below_target", False)))
                for r in d["rungs"]
            )
            return cls(str(d["sequence"]), rungs, tuple(float(t) for t in d.get("target_rates", ())),
                       d.get("method", "RL"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed ladder: {exc}") from exc


def target_rates(r_min: float = DEFAULT_R_MIN, r_max: float = DEFAULT_R_MAX) -> List[float]:
    """Doubling target rates ``r_min * 2**i`` up to ``r_max`` (kbps).

    Raises:
        ValidationError: ``r_min <= 0`` or ``r_max < r_min``.
    """
    if not r_min > 0:
        raise ValidationError(f"r_min must be positive, got {r_min}")
    if r_max < r_min:
        raise ValidationError(f"empty rate range [{r_min}, {r_max}]")
    out = []
    r = float(r_min)
    while r <= r_max:
        out.append(r)
        r *= 2.0
    return out


def ladder_violations(ladder: Ladder) -> List[str]:
    """Human-readable list of broken ladder invariants (empty when valid)."""
    problems = []
    rungs = ladder.rungs
    if not rungs:
        problems.append("ladder has no rungs")
    if ladder.target_rates and len(rungs) > len(ladder.target_rates):
        problems.append(f"{len(rungs)} rungs for {len(ladder.target_rates)} targets")
    last_qp = {}
    for i, r in enumerate(rungs):
        if i:
            p = rungs[i - 1]
            if not r.rate_kbps > p.rate_kbps:
                problems.append(f"rung {i}: rate {r.rate_kbps} not above {p.rate_kbps}")
            if r.vmaf < p.vmaf:
                problems.append(f"rung {i}: vmaf {r.vmaf} below {p.vmaf}")
            if r.resolution < p.resolution:
                problems.append(f"rung {i}: resolution {r.resolution} below {p.resolution}")
        q = last_qp.get(r.resolution)
        if q is not None and r.qp > q:
            problems.append(f"rung {i}: qp {r.qp} above earlier {r.resolution} qp {q}")
        last_qp[r.resolution] = r.qp
    return problems


def check_ladder(ladder: Ladder) -> None:
    problems = ladder_violations(ladder)
    if problems:
        raise ValidationError(f"{ladder.sequence_id}: " + "; ".join(problems))


def _compatible(prev: Rung, r: Rung, last_qp: dict) -> bool:
    if not r.rate_kbps > prev.rate_kbps or r.vmaf < prev.vmaf or r.resolution < prev.resolution:
        return False
    q = last_qp.get(r.resolution)
    return q is None or r.qp <= q


def enforce_monotonicity(ladder: Ladder) -> Ladder:
    """Drop rungs that break the ladder ordering, keeping the earlier rung.

    Rungs are scanned from low to high rate; each is kept only if it is
    compatible with the last kept rung.  Idempotent.
    """
    rungs = sorted(ladder.rungs, key=lambda r: r.rate_kbps)
    kept: List[Rung] = []
    last_qp = {}
    for r in rungs:
        if kept and not _compatible(kept[-1], r, last_qp):
            logger.debug("%s: dropping rung %s", ladder.sequence_id, r)
            continue
        kept.append(r)
        last_qp[r.resolution] = r.qp
    return replace(ladder, rungs=tuple(kept))


def sample_front(front: Sequence[FrontPoint], targets: Sequence[float]) -> List[Tuple[FrontPoint, bool]]:
    """Front point for each target: the largest rate not above it.

    A target below the whole front gets the lowest point, flagged ``True``.
    Targets mapping to an already chosen point are skipped.
    """
    if not front:
        raise ValidationError("cannot sample an empty Pareto front")
    pts = sorted(front, key=lambda p: (p.log_rate, -p.resolution.rank))
    chosen: List[Tuple[FrontPoint, bool]] = []
    seen = set()
    j = -1
    for t in sorted(targets):
        lt = math.log(t)
        # Advance to the last point with log_rate <= log(target).
        while j + 1 < len(pts) and pts[j + 1].log_rate <= lt:
            j += 1
        if j < 0:
            p, flag = pts[0], True
        else:
            p, flag = pts[j], False
            # Equal-rate ties go to the higher resolution.
            k = j
            while k > 0 and pts[k - 1].log_rate == p.log_rate:
                k -= 1
                if pts[k].resolution > p.resolution:
                    p = pts[k]
        key = (p.resolution, p.qp)
        if key in seen:
            continue
        seen.add(key)
        chosen.append((p, flag))
    return chosen


def prune_saturated(rungs: Sequence[Rung], v_high: float = DEFAULT_V_HIGH,
                    epsilon: float = DEFAULT_EPSILON) -> List[Rung]:
    """Drop rungs whose slope from the last kept rung is flat above ``v_high``.

    ``epsilon`` is in VMAF per kbps.
    """
    kept: List[Rung] = []
    for r in rungs:
        if kept:
            p = kept[-1]
            dr = r.rate_kbps - p.rate_kbps
            if p.vmaf > v_high and dr > 0 and (r.vmaf - p.vmaf) / dr <= epsilon:
                continue
        kept.append(r)
    return kept


def build_ladder(front: Sequence[FrontPoint], targets: Sequence[float], v_high: float = DEFAULT_V_HIGH,
                 epsilon: float = DEFAULT_EPSILON, sequence_id: str = "", method: str = "RL") -> Ladder:
    """Sample the front at the targets, prune saturated rungs, repair ordering.

    Raises:
        ValidationError: empty front or unsorted targets.
    """
    if not front:
        raise ValidationError(f"{sequence_id}: empty Pareto front")
    targets = [float(t) for t in targets]
    if any(b <= a for a, b in zip(targets, targets[1:])):
        raise ValidationError("target rates must be strictly ascending")
    rungs = [Rung.from_point(p, flag) for p, flag in sample_front(front, targets)]
    for r in rungs:
        if r.below_target:
            logger.info("%s: lowest target undercuts the front; using %.1f kbps",
                        sequence_id, r.rate_kbps)
    rungs = prune_saturated(rungs, v_high, epsilon)
    return enforce_monotonicity(Ladder(sequence_id, tuple(rungs), tuple(targets), method))


def write_ladder_json(ladder: Ladder, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(ladder.to_dict(), indent=2) + "\n")
    return path


def read_ladder_json(path) -> Ladder:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
    return Ladder.from_dict(data)


LADDER_CSV_COLUMNS = ("sequence", "rung", "rate_kbps", "vmaf", "qp", "resolution")


def write_ladders_csv(ladders: Iterable[Ladder], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LADDER_CSV_COLUMNS)
        for lad in ladders:
            for i, r in enumerate(lad.rungs):
                w.writerow([lad.sequence_id, i, repr(r.rate_kbps), repr(r.vmaf), r.qp,
                            r.resolution.label])
    return path


def ladder_file_name(sequence_id: str) -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in sequence_id)
    return f"{safe}.json"


def read_ladder_dir(path) -> dict:
    """``{sequence_id: Ladder}`` from every ``*.json`` ladder in a directory."""
    out = {}
    for p in sorted(Path(path).glob("*.json")):
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{p}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict) or "rungs" not in data:
            continue
        lad = Ladder.from_dict(data)
        out[lad.sequence_id] = lad
    return out
