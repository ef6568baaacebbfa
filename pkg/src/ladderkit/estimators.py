"""Ladder estimators: exhaustive reference (RL) and the reduced-encode NIL, CIL-n and FL.

Every estimator drives an :class:`~ladderkit.backend.EncodeSession`, so
the session tally is the method's encode cost.  Rung encodes count toward
the tally unless the rung was already encoded as an initial point.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .backend import EncodeSession
from .core import (ADJACENT_PAIRS, QP_MAX, QP_MIN, InsufficientDataError, LadderkitError, Resolution,
                   RQCurve, ValidationError, validate_curve)
from .interp import fit_rq_curve
from .ladder import (DEFAULT_EPSILON, DEFAULT_V_HIGH, Ladder, Rung, build_ladder, enforce_monotonicity,
                     prune_saturated, target_rates)
from .pareto import pareto_front, points_from_fit, points_from_records

logger = logging.getLogger(__name__)

METHODS = ("RL", "NIL", "CIL", "FL")

CIL_OFFSETS = {
    Resolution.R2160P: -4,
    Resolution.R1080P: -4,
    Resolution.R720P: 6,
    Resolution.R540P: 10,
}
NIL_QPS = (15, 20, 25, 30, 35, 40, 45)
# (QP_m, delta) for the extra encode at each end of the ladder.
FL_PARAMS = {
    Resolution.R2160P: (30, 5),
    Resolution.R540P: (38, 2),
}

PairKey = Tuple[Resolution, Resolution]


class DegenerateLineError(LadderkitError):
    """Two encode points with equal log-rate cannot define a QP line."""


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _clamp(q: int, qp_range: Tuple[int, int]) -> int:
    return min(max(int(q), qp_range[0]), qp_range[1])


@dataclass(frozen=True)
class MethodConfig:
    """Estimator settings.

    ``n`` only applies to CIL, ``nil_qps`` to NIL and ``fl_params`` to FL.
    ``fl_rounding`` chooses how FL turns its real-valued QP estimate into an
    integer; ``"ceil"`` keeps the rung rate at or below the target.
    """

    method: str = "RL"
    n: int = 5
    offsets: Mapping[Resolution, int] = field(default_factory=lambda: dict(CIL_OFFSETS))
    nil_qps: Tuple[int, ...] = NIL_QPS
    fl_params: Mapping[Resolution, Tuple[int, int]] = field(default_factory=lambda: dict(FL_PARAMS))
    qp_range: Tuple[int, int] = (QP_MIN, QP_MAX)
    targets: Tuple[float, ...] = tuple(target_rates())
    v_high: float = DEFAULT_V_HIGH
    epsilon: float = DEFAULT_EPSILON
    fl_rounding: str = "ceil"
    jobs: int = 1

    def __post_init__(self):
        method = self.method.upper()
        object.__setattr__(self, "method", method)
        if method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}; choose from {METHODS}")
        lo, hi = self.qp_range
        if not lo < hi:
            raise ValidationError(f"bad QP range {self.qp_range}")
        if method == "CIL" and self.n not in (4, 5, 6, 7):
            raise ValidationError(f"CIL n must be in 4..7, got {self.n}")
        if method == "NIL":
            if len(self.nil_qps) != 7 or len(set(self.nil_qps)) != 7:
                raise ValidationError("NIL needs 7 distinct QPs")
            if any(not lo <= q <= hi for q in self.nil_qps):
                raise ValidationError(f"NIL QPs {self.nil_qps} outside {self.qp_range}")
        if set(self.offsets) != set(Resolution):
            raise ValidationError("offsets need one entry per resolution")
        if set(self.fl_params) != {Resolution.R2160P, Resolution.R540P}:
            raise ValidationError("fl_params need entries for 2160p and 540p")
        if self.fl_rounding not in ("nearest", "floor", "ceil"):
            raise ValidationError(f"unknown fl_rounding {self.fl_rounding!r}")
        if not self.targets or any(b <= a for a, b in zip(self.targets, self.targets[1:])):
            raise ValidationError("targets must be non-empty and strictly ascending")

    @property
    def budget(self) -> int:
        """Maximum encodes the method may spend on one sequence."""
        n_res = len(Resolution)
        grid = self.qp_range[1] - self.qp_range[0] + 1
        return {
            "RL": grid * n_res,
            "NIL": len(self.nil_qps) * n_res + len(self.targets),
            "CIL": self.n * n_res + len(self.targets),
            "FL": 2 * n_res + len(self.targets),
        }[self.method]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["offsets"] = {r.label: v for r, v in self.offsets.items()}
        d["fl_params"] = {r.label: list(v) for r, v in self.fl_params.items()}
        d["nil_qps"] = list(self.nil_qps)
        d["qp_range"] = list(self.qp_range)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MethodConfig":
        d = dict(d)
        if "offsets" in d:
            d["offsets"] = {Resolution.from_label(k): int(v) for k, v in d["offsets"].items()}
        if "fl_params" in d:
            d["fl_params"] = {Resolution.from_label(k): tuple(int(x) for x in v)
                              for k, v in d["fl_params"].items()}
        for key in ("nil_qps", "qp_range"):
            if key in d:
                d[key] = tuple(int(x) for x in d[key])
        if "targets" in d:
            d["targets"] = tuple(float(x) for x in d["targets"])
        return cls(**d)


@dataclass(frozen=True)
class EstimateResult:
    ladder: Ladder
    tally: int
    qp_sets: Dict[Resolution, List[int]]
    config: MethodConfig

    def to_dict(self) -> dict:
        return {
            "method": self.config.method if self.config.method != "CIL" else f"CIL-{self.config.n}",
            "config": self.config.to_dict(),
            "tally": self.tally,
            "budget": self.config.budget,
            "qp_sets": {r.label: list(q) for r, q in self.qp_sets.items()},
            "ladder": self.ladder.to_dict(),
        }


def _realize(session: EncodeSession, sequence_id: str, picks: Sequence[Tuple[Resolution, int, bool]],
             config: MethodConfig, method: str) -> Ladder:
    """Encode the chosen ``(resolution, qp)`` rungs and assemble the ladder."""
    recs = session.encode_many([(sequence_id, res, qp) for res, qp, _ in picks], config.jobs)
    rungs = sorted((Rung.from_record(r, flag) for r, (_, _, flag) in zip(recs, picks)),
                   key=lambda r: (r.rate_kbps, -r.resolution.rank))
    rungs = prune_saturated(rungs, config.v_high, config.epsilon)
    return enforce_monotonicity(Ladder(sequence_id, tuple(rungs), tuple(config.targets), method))


def estimate_rl(session: EncodeSession, sequence_id: str,
                config: Optional[MethodConfig] = None) -> EstimateResult:
    """Exhaustive reference ladder: every QP at every resolution."""
    config = config or MethodConfig("RL")
    qps = list(range(config.qp_range[0], config.qp_range[1] + 1))
    triples = [(sequence_id, res, q) for res in Resolution.descending() for q in qps]
    records = session.encode_many(triples, config.jobs)
    by_key = {(r.resolution, r.qp): r for r in records}
    front = pareto_front(points_from_records(records))
    lad = build_ladder(front, config.targets, config.v_high, config.epsilon, sequence_id, "RL")
    # Carry the measured rates verbatim rather than exp(log(rate)).
    rungs = tuple(Rung.from_record(by_key[r.key], r.below_target) for r in lad.rungs)
    lad = Ladder(sequence_id, rungs, lad.target_rates, "RL")
    return EstimateResult(lad, session.sequence_tally(sequence_id),
                          {res: list(qps) for res in Resolution.descending()}, config)


def interpolated_estimate(session: EncodeSession, sequence_id: str,
                          qp_sets: Mapping[Resolution, Sequence[int]], config: MethodConfig,
                          method: str) -> EstimateResult:
    """Shared NIL/CIL flow: encode, interpolate, estimate the front, encode the rungs.

    Raises:
        InsufficientDataError: no resolution keeps two monotone samples.
    """
    triples = [(sequence_id, res, q) for res, qs in qp_sets.items() for q in qs]
    records = session.encode_many(triples, config.jobs)
    points = []
    for res in qp_sets:
        recs = [r for r in records if r.resolution == res]
        try:
            curve, _ = validate_curve(RQCurve.from_records(recs), repair=True)
            if len(curve) < 2:
                raise InsufficientDataError("fewer than 2 monotone samples")
        except InsufficientDataError as exc:
            logger.warning("%s/%s: skipping resolution: %s", sequence_id, res, exc)
            continue
        points.extend(points_from_fit(fit_rq_curve(curve.records())))
    if not points:
        raise InsufficientDataError(f"{sequence_id}: no usable resolution")
    est = build_ladder(pareto_front(points), config.targets, config.v_high, config.epsilon,
                       sequence_id, method)
    picks = [(r.resolution, r.qp, r.below_target) for r in est.rungs]
    lad = _realize(session, sequence_id, picks, config, method)
    return EstimateResult(lad, session.sequence_tally(sequence_id),
                          {res: sorted(qs) for res, qs in qp_sets.items()}, config)


def estimate_nil(session: EncodeSession, sequence_id: str,
                 config: Optional[MethodConfig] = None) -> EstimateResult:
    """Naive interpolation ladder from seven fixed QPs per resolution."""
    config = config or MethodConfig("NIL")
    qp_sets = {res: list(config.nil_qps) for res in Resolution.descending()}
    return interpolated_estimate(session, sequence_id, qp_sets, config, "NIL")


def cil_qp_set(knee_qp: int, t_s: int, n: int, qp_max: int = QP_MAX,
               qp_range: Tuple[int, int] = (QP_MIN, QP_MAX)) -> List[int]:
    """``n`` integer QPs evenly spaced on ``[knee_qp + t_s, qp_max]``.

    Values are rounded half-up; a value that collides with an earlier one
    moves to the nearest free integer in the range (lower on a tie).

    Raises:
        ValidationError: ``n < 2``, an empty range, or fewer than ``n``
            integers in the range.
    """
    if n < 2:
        raise ValidationError(f"n must be >= 2, got {n}")
    lo = max(int(knee_qp) + int(t_s), qp_range[0])
    hi = min(int(qp_max), qp_range[1])
    if not lo < hi:
        raise ValidationError(f"empty CIL range [{knee_qp + t_s}, {qp_max}]")
    if hi - lo + 1 < n:
        raise ValidationError(f"CIL range [{lo}, {hi}] holds fewer than {n} integers")
    step = (hi - lo) / (n - 1)
    out: List[int] = []
    for i in range(n):
        q = round_half_up(lo + i * step)
        if q in out:
            free = [c for c in range(lo, hi + 1) if c not in out]
            q = min(free, key=lambda c: (abs(c - q), c))
        out.append(q)
    return sorted(out)


def cil_qp_sets(knees: Mapping[Resolution, float], config: MethodConfig) -> Dict[Resolution, List[int]]:
    """Per-resolution CIL QP sets from (possibly real-valued) knee predictions.

    A knee so high that the range would hold fewer than ``n`` integers is
    lowered until it fits.
    """
    lo, hi = config.qp_range
    out = {}
    for res in Resolution.descending():
        if res not in knees:
            raise ValidationError(f"missing knee prediction for {res}")
        t = config.offsets[res]
        k = round_half_up(float(knees[res]))
        k_fit = min(k, hi - (config.n - 1) - t)
        if k_fit != k:
            logger.warning("%s knee %d leaves fewer than %d QPs; using %d", res, k, config.n, k_fit)
        out[res] = cil_qp_set(k_fit, t, config.n, hi, config.qp_range)
    return out


def estimate_cil(session: EncodeSession, sequence_id: str, knees: Mapping[Resolution, float],
                 config: Optional[MethodConfig] = None) -> EstimateResult:
    """Knee-guided interpolation ladder with ``n`` initial QPs per resolution."""
    config = config or MethodConfig("CIL")
    return interpolated_estimate(session, sequence_id, cil_qp_sets(knees, config), config,
                                 f"CIL-{config.n}")


def fl_extra_qp(predicted_qp: int, qp_m: int, delta: int,
                qp_range: Tuple[int, int] = (QP_MIN, QP_MAX)) -> int:
    """Second QP for an end resolution: step ``delta`` away from ``predicted_qp``,
    downwards when it is at or above ``qp_m``, otherwise upwards."""
    q = predicted_qp - delta if predicted_qp >= qp_m else predicted_qp + delta
    return _clamp(q, qp_range)


@dataclass(frozen=True)
class QPLine:
    """``qp = alpha + beta * log_rate``."""

    alpha: float
    beta: float

    @classmethod
    def through(cls, p1: Tuple[float, float], p2: Tuple[float, float]) -> "QPLine":
        """Line through two ``(log_rate, qp)`` points.

        Raises:
            DegenerateLineError: equal log-rates.
        """
        (l1, q1), (l2, q2) = p1, p2
        if l1 == l2:
            raise DegenerateLineError(f"points share log-rate {l1}")
        beta = (q1 - q2) / (l1 - l2)
        return cls(q1 - beta * l1, beta)

    def __call__(self, log_rate: float) -> float:
        return self.alpha + self.beta * log_rate


def _round(x: float, mode: str) -> int:
    if mode == "nearest":
        return round_half_up(x)
    if mode == "floor":
        return int(math.floor(x + 1e-9))
    return int(math.ceil(x - 1e-9))


def fl_plan(crossovers: Mapping[PairKey, Tuple[float, float]],
            config: MethodConfig) -> Dict[Resolution, List[int]]:
    """The two initial QPs per resolution implied by predicted cross-overs."""
    rng = config.qp_range
    qs: Dict[Resolution, List[int]] = {res: [] for res in Resolution.descending()}
    for pair in ADJACENT_PAIRS:
        if pair not in crossovers:
            raise ValidationError(f"missing cross-over prediction for {pair[0]}/{pair[1]}")
        q_high, q_low = crossovers[pair]
        qs[pair[0]].append(_clamp(round_half_up(float(q_high)), rng))
        qs[pair[1]].append(_clamp(round_half_up(float(q_low)), rng))
    for res, (qp_m, delta) in config.fl_params.items():
        qs[res].append(fl_extra_qp(qs[res][0], qp_m, delta, rng))
    return qs


def estimate_fl(session: EncodeSession, sequence_id: str,
                crossovers: Mapping[PairKey, Tuple[float, float]],
                config: Optional[MethodConfig] = None) -> EstimateResult:
    """Cross-over ladder: six cross-over encodes, two extras and a QP line per resolution.

    The resolution serving a target is chosen by comparing its log-rate with
    each pair's switch threshold, the mean log-rate of the pair's two
    cross-over encodes.

    Raises:
        DegenerateLineError: a resolution's two encodes share a log-rate.
    """
    config = config or MethodConfig("FL")
    plan = fl_plan(crossovers, config)
    triples = [(sequence_id, res, q) for res, qs in plan.items() for q in qs]
    records = session.encode_many(triples, config.jobs)
    rec = {(r.resolution, r.qp): r for r in records}

    lines = {}
    for res, (q1, q2) in plan.items():
        r1, r2 = rec[(res, q1)], rec[(res, q2)]
        try:
            lines[res] = QPLine.through((r1.log_rate, q1), (r2.log_rate, q2))
        except DegenerateLineError as exc:
            raise DegenerateLineError(f"{sequence_id}/{res}: {exc}") from exc

    thresholds = []
    for high, low in ADJACENT_PAIRS:
        # The top resolution's cross-over encode is its first; middle ones list it second.
        r_high = rec[(high, plan[high][0 if high == Resolution.R2160P else 1])]
        r_low = rec[(low, plan[low][0])]
        thresholds.append((high, 0.5 * (r_high.log_rate + r_low.log_rate)))

    picks, seen = [], set()
    for t in config.targets:
        lt = math.log(t)
        res = Resolution.R540P
        for high, thr in thresholds:
            if lt >= thr:
                res = high
                break
        qp = _clamp(_round(lines[res](lt), config.fl_rounding), config.qp_range)
        if (res, qp) not in seen:
            seen.add((res, qp))
            picks.append((res, qp, False))
    lad = _realize(session, sequence_id, picks, config, "FL")
    return EstimateResult(lad, session.sequence_tally(sequence_id),
                          {res: sorted(set(qs)) for res, qs in plan.items()}, config)


def estimate(session: EncodeSession, sequence_id: str, config: MethodConfig,
             knees: Optional[Mapping[Resolution, float]] = None,
             crossovers: Optional[Mapping[PairKey, Tuple[float, float]]] = None) -> EstimateResult:
    """Dispatch on ``config.method``."""
    if config.method == "RL":
        return estimate_rl(session, sequence_id, config)
    if config.method == "NIL":
        return estimate_nil(session, sequence_id, config)
    if config.method == "CIL":
        if knees is None:
            raise ValidationError("CIL needs knee predictions")
        return estimate_cil(session, sequence_id, knees, config)
    if crossovers is None:
        raise ValidationError("FL needs cross-over predictions")
    return estimate_fl(session, sequence_id, crossovers, config)
