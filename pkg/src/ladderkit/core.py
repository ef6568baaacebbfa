"""Domain types, measurement ingestion, validation and persistence.

Everything downstream consumes the in-memory model defined here: a
:class:`MeasurementSet` maps ``(sequence_id, Resolution)`` to an
:class:`RQCurve` of samples sorted by QP.  Rates are kept in kbps; the
log-rate used for geometry is the natural log of kbps.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)

QP_MIN = 15
QP_MAX = 45
CSV_COLUMNS = ("sequence", "resolution", "qp", "bitrate_kbps", "vmaf")


class LadderkitError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(LadderkitError):
    """Input data violates a documented bound or invariant."""


class ParseError(ValidationError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConflictError(ValidationError):
    """Two rows share the same (sequence, resolution, qp) key."""


class InsufficientDataError(ValidationError):
    pass


class Resolution(enum.Enum):
    """The four test resolutions, ordered by pixel count."""

    R540P = ("540p", 960, 540)
    R720P = ("720p", 1280, 720)
    R1080P = ("1080p", 1920, 1080)
    R2160P = ("2160p", 3840, 2160)

    def __init__(self, label: str, width: int, height: int):
        self.label = label
        self.width = width
        self.height = height

    @property
    def rank(self) -> int:
        return _RANK[self]

    def __lt__(self, other):
        if not isinstance(other, Resolution):
            return NotImplemented
        return self.rank < other.rank

    def __le__(self, other):
        if not isinstance(other, Resolution):
            return NotImplemented
        return self.rank <= other.rank

    def __gt__(self, other):
        if not isinstance(other, Resolution):
            return NotImplemented
        return self.rank > other.rank

    def __ge__(self, other):
        if not isinstance(other, Resolution):
            return NotImplemented
        return self.rank >= other.rank

    def __str__(self) -> str:
        return self.label

    @classmethod
    def from_label(cls, label: str) -> "Resolution":
        key = str(label).strip().lower()
        for res in cls:
            if res.label == key:
                return res
        raise ValidationError(f"unknown resolution label {label!r}")

    @classmethod
    def descending(cls) -> List["Resolution"]:
        """2160p first, 540p last."""
        return sorted(cls, reverse=True)


_RANK = {res: i for i, res in enumerate(Resolution)}

# (higher, lower) adjacent pairs from the top of the ladder down.
ADJACENT_PAIRS: Tuple[Tuple[Resolution, Resolution], ...] = (
    (Resolution.R2160P, Resolution.R1080P),
    (Resolution.R1080P, Resolution.R720P),
    (Resolution.R720P, Resolution.R540P),
)


@dataclass(frozen=True)
class EncodeRecord:
    sequence_id: str
    resolution: Resolution
    qp: int
    bitrate: float  # kbps
    vmaf: float

    @property
    def log_rate(self) -> float:
        return math.log(self.bitrate)

    @property
    def key(self) -> Tuple[str, Resolution, int]:
        return (self.sequence_id, self.resolution, self.qp)

    def check(self, qp_range: Tuple[int, int] = (QP_MIN, QP_MAX)) -> None:
        """Raise :class:`ValidationError` if any field is out of bounds."""
        if not (math.isfinite(self.bitrate) and self.bitrate > 0):
            raise ValidationError(f"bitrate must be positive, got {self.bitrate}")
        if not (math.isfinite(self.vmaf) and 0.0 <= self.vmaf <= 100.0):
            raise ValidationError(f"vmaf must lie in [0, 100], got {self.vmaf}")
        if not qp_range[0] <= self.qp <= qp_range[1]:
            raise ValidationError(
                f"qp {self.qp} outside QP universe [{qp_range[0]}, {qp_range[1]}]"
            )


@dataclass(frozen=True)
class Sample:
    qp: int
    log_rate: float
    vmaf: float

    @property
    def bitrate(self) -> float:
        return math.exp(self.log_rate)


@dataclass(frozen=True)
class RQCurve:
    """Samples of one (sequence, resolution) rate-quality curve, QP ascending."""

    sequence_id: str
    resolution: Resolution
    samples: Tuple[Sample, ...]

    def __post_init__(self):
        qps = [s.qp for s in self.samples]
        if any(b <= a for a, b in zip(qps, qps[1:])):
            raise ValidationError(
                f"{self.sequence_id}/{self.resolution}: qp must be strictly increasing"
            )

    @classmethod
    def from_records(cls, records: Sequence[EncodeRecord]) -> "RQCurve":
        if not records:
            raise InsufficientDataError("no records")
        seq = records[0].sequence_id
        res = records[0].resolution
        for r in records:
            if r.sequence_id != seq or r.resolution != res:
                raise ValidationError("records mix sequences or resolutions")
        ordered = sorted(records, key=lambda r: r.qp)
        return cls(seq, res, tuple(Sample(r.qp, r.log_rate, r.vmaf) for r in ordered))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def qps(self) -> List[int]:
        return [s.qp for s in self.samples]

    @property
    def log_rates(self) -> List[float]:
        return [s.log_rate for s in self.samples]

    @property
    def vmafs(self) -> List[float]:
        return [s.vmaf for s in self.samples]

    def records(self) -> List[EncodeRecord]:
        # Bitrate is recomputed from the log-rate; use MeasurementSet.record for stored values.
        return [
            EncodeRecord(self.sequence_id, self.resolution, s.qp, s.bitrate, s.vmaf)
            for s in self.samples
        ]


@dataclass
class ValidationReport:
    sequence_id: str
    resolution: Resolution
    violations: List[Tuple[int, str]] = field(default_factory=list)
    removed: List[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)


def validate_curve(curve: RQCurve, repair: bool = False) -> Tuple[RQCurve, ValidationReport]:
    """Check (and optionally repair) rate-quality monotonicity of a curve.

    A sample violates monotonicity when its VMAF exceeds that of the kept
    sample at the next-lower QP, or its log-rate does not strictly decrease.
    With ``repair`` the offending samples are dropped, always sacrificing
    the higher-QP member of a conflicting pair: high-QP samples are the
    noisiest and matter least for the Pareto front.

    Returns the (possibly repaired) curve and a report.  Without repair the
    report lists every adjacent violation and the curve is returned as is.
    """
    if len(curve) < 2:
        raise InsufficientDataError(
            f"{curve.sequence_id}/{curve.resolution}: need at least 2 samples, got {len(curve)}"
        )
    report = ValidationReport(curve.sequence_id, curve.resolution)
    samples = curve.samples

    if not repair:
        for prev, cur in zip(samples, samples[1:]):
            if cur.vmaf > prev.vmaf:
                report.violations.append((cur.qp, "vmaf increases with qp"))
            if cur.log_rate >= prev.log_rate:
                report.violations.append((cur.qp, "rate does not decrease with qp"))
        return curve, report

    kept = [samples[0]]
    for cur in samples[1:]:
        prev = kept[-1]
        reasons = []
        if cur.vmaf > prev.vmaf:
            reasons.append("vmaf increases with qp")
        if cur.log_rate >= prev.log_rate:
            reasons.append("rate does not decrease with qp")
        if reasons:
            report.violations.append((cur.qp, "; ".join(reasons)))
            report.removed.append(cur.qp)
        else:
            kept.append(cur)
    if report.removed:
        logger.info(
            "%s/%s: dropped %d non-monotone samples at qp %s",
            curve.sequence_id, curve.resolution, len(report.removed), report.removed,
        )
    return RQCurve(curve.sequence_id, curve.resolution, tuple(kept)), report


class MeasurementSet:
    """Immutable collection of encode records grouped into per-resolution curves."""

    def __init__(
        self,
        records: Iterable[EncodeRecord] = (),
        qp_range: Tuple[int, int] = (QP_MIN, QP_MAX),
        rate_units: str = "kbps",
        metadata: Optional[dict] = None,
    ):
        self.qp_range = (int(qp_range[0]), int(qp_range[1]))
        self.rate_units = rate_units
        self.metadata = dict(metadata or {})
        # Ground-truth generator parameters, set by synthetic corpora only.
        self.truth = None
        index: Dict[Tuple[str, Resolution, int], EncodeRecord] = {}
        for rec in records:
            rec.check(self.qp_range)
            if rec.key in index:
                raise ConflictError(
                    f"duplicate measurement for {rec.sequence_id}/{rec.resolution}/qp={rec.qp}"
                )
            index[rec.key] = rec
        self._records = index
        grouped: Dict[Tuple[str, Resolution], List[EncodeRecord]] = {}
        for rec in index.values():
            grouped.setdefault((rec.sequence_id, rec.resolution), []).append(rec)
        self._curves = {k: RQCurve.from_records(v) for k, v in sorted(
            grouped.items(), key=lambda kv: (kv[0][0], -kv[0][1].rank))}
        self.reports: Dict[Tuple[str, Resolution], ValidationReport] = {}
        for key, curve in self._curves.items():
            if len(curve) >= 2:
                _, rep = validate_curve(curve)
                if not rep.ok:
                    self.reports[key] = rep

    def __len__(self) -> int:
        return len(self._curves)

    def __iter__(self) -> Iterator[Tuple[str, Resolution]]:
        return iter(self._curves)

    def __contains__(self, key) -> bool:
        return key in self._curves

    def __getitem__(self, key: Tuple[str, Resolution]) -> RQCurve:
        return self._curves[key]

    def curves(self) -> Dict[Tuple[str, Resolution], RQCurve]:
        return dict(self._curves)

    @property
    def sequences(self) -> List[str]:
        return sorted({seq for seq, _ in self._curves})

    def resolutions(self, sequence_id: str) -> List[Resolution]:
        return sorted((res for seq, res in self._curves if seq == sequence_id), reverse=True)

    def record(self, sequence_id: str, resolution: Resolution, qp: int) -> EncodeRecord:
        return self._records[(sequence_id, resolution, int(qp))]

    def get(self, sequence_id: str, resolution: Resolution, qp: int) -> Optional[EncodeRecord]:
        return self._records.get((sequence_id, resolution, int(qp)))

    def records(self) -> List[EncodeRecord]:
        return sorted(self._records.values(),
                      key=lambda r: (r.sequence_id, -r.resolution.rank, r.qp))

    def subset(self, sequence_ids: Iterable[str]) -> "MeasurementSet":
        wanted = set(sequence_ids)
        return MeasurementSet(
            (r for r in self._records.values() if r.sequence_id in wanted),
            self.qp_range, self.rate_units, self.metadata,
        )


def _format_float(value: float) -> str:
    # repr gives the shortest string that round-trips exactly (>= 9 sig. digits as needed).
    return repr(float(value))


def _parse_row(row: dict, line: int) -> EncodeRecord:
    try:
        seq = row["sequence"].strip()
        res = Resolution.from_label(row["resolution"])
        qp_text = str(row["qp"]).strip()
        qp_val = float(qp_text)
        if not qp_val.is_integer():
            raise ValueError(f"qp must be an integer, got {qp_text!r}")
        rec = EncodeRecord(seq, res, int(qp_val), float(row["bitrate_kbps"]), float(row["vmaf"]))
    except ValidationError as exc:
        raise ParseError(str(exc), line) from exc
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ParseError(f"malformed row: {exc}", line) from exc
    if not seq:
        raise ParseError("empty sequence id", line)
    return rec


def load_measurements(path, format: Optional[str] = None,
                      qp_range: Tuple[int, int] = (QP_MIN, QP_MAX)) -> MeasurementSet:
    """Read a measurement file into a :class:`MeasurementSet`.

    Args:
        path: CSV or JSON file following the ``sequence,resolution,qp,
            bitrate_kbps,vmaf`` schema.  JSON is either a list of row objects
            or ``{"records": [...], "qp_range": [lo, hi]}``.
        format: ``"csv"`` or ``"json"``; inferred from the suffix if omitted.
        qp_range: the configured QP universe.

    Raises:
        ParseError: a row cannot be parsed (carries the 1-based line/row).
        ConflictError: the same (sequence, resolution, qp) appears twice.
        ValidationError: a value is out of bounds; the message names the row.
    """
    path = Path(path)
    if format is None:
        format = "json" if path.suffix.lower() == ".json" else "csv"
    format = format.lower()
    records: List[EncodeRecord] = []
    metadata: dict = {}
    seen: Dict[Tuple[str, Resolution, int], int] = {}

    def add(rec: EncodeRecord, line: int) -> None:
        try:
            rec.check(qp_range)
        except ValidationError as exc:
            raise ValidationError(f"line {line}: {exc}") from exc
        if rec.key in seen:
            raise ConflictError(
                f"line {line}: duplicate key {rec.sequence_id}/{rec.resolution}/qp={rec.qp} "
                f"(first seen on line {seen[rec.key]})"
            )
        seen[rec.key] = line
        records.append(rec)

    if format == "csv":
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise ParseError("missing header", 1)
            missing = [c for c in CSV_COLUMNS if c not in reader.fieldnames]
            if missing:
                raise ParseError(f"missing columns {missing}", 1)
            for row in reader:
                add(_parse_row(row, reader.line_num), reader.line_num)
    elif format == "json":
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno) from exc
        rows = payload
        if isinstance(payload, dict):
            rows = payload.get("records", [])
            qp_range = tuple(payload.get("qp_range", qp_range))
            metadata = dict(payload.get("metadata", {}))
        if not isinstance(rows, list):
            raise ParseError("expected a list of records")
        for i, row in enumerate(rows, start=1):
            if not isinstance(row, dict):
                raise ParseError("record is not an object", i)
            add(_parse_row(row, i), i)
    else:
        raise ValueError(f"unsupported format {format!r}")

    if not records:
        logger.warning("%s: empty corpus (no measurement rows)", path)
    return MeasurementSet(records, qp_range=qp_range, metadata=metadata)


def save_measurements(mset_or_records, path, format: Optional[str] = None) -> Path:
    """Write records in the CSV (or JSON mirror) schema."""
    path = Path(path)
    if format is None:
        format = "json" if path.suffix.lower() == ".json" else "csv"
    if isinstance(mset_or_records, MeasurementSet):
        records = mset_or_records.records()
        qp_range = mset_or_records.qp_range
        metadata = mset_or_records.metadata
    else:
        records = sorted(mset_or_records, key=lambda r: (r.sequence_id, -r.resolution.rank, r.qp))
        qp_range, metadata = (QP_MIN, QP_MAX), {}
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "csv":
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for r in records:
                writer.writerow([r.sequence_id, r.resolution.label, r.qp,
                                 _format_float(r.bitrate), _format_float(r.vmaf)])
    elif format == "json":
        payload = {
            "qp_range": list(qp_range),
            "metadata": metadata,
            "records": [
                {"sequence": r.sequence_id, "resolution": r.resolution.label, "qp": r.qp,
                 "bitrate_kbps": r.bitrate, "vmaf": r.vmaf}
                for r in records
            ],
        }
        path.write_text(json.dumps(payload, indent=1))
    else:
        raise ValueError(f"unsupported format {format!r}")
    return path
