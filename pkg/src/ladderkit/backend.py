"""Encode backends and the cost-accounting encode session.

An :class:`EncodeSession` is the only way estimators obtain measurements.
It caches every record, coalesces concurrent requests for the same
``(sequence, resolution, qp)`` triple and counts how many distinct triples
actually reached the backend (the encode tally).
"""

from __future__ import annotations

import logging
import math
import shlex
import subprocess
import threading
import zlib
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .core import (
    QP_MAX,
    QP_MIN,
    EncodeRecord,
    LadderkitError,
    MeasurementSet,
    Resolution,
    ValidationError,
    load_measurements,
    save_measurements,
)

logger = logging.getLogger(__name__)

Triple = Tuple[str, Resolution, int]


class BackendError(LadderkitError):
    def __init__(self, message: str, output: str = ""):
        self.output = output
        super().__init__(message if not output else f"{message}\n{output}")


class MissingMeasurementError(BackendError):
    pass


class ConfigError(ValidationError):
    pass


class ReplayBackend:
    """Serves records from a pre-measured :class:`MeasurementSet`."""

    kind = "replay"

    def __init__(self, measurements: MeasurementSet):
        self.measurements = measurements

    def encode(self, sequence_id: str, resolution: Resolution, qp: int) -> EncodeRecord:
        rec = self.measurements.get(sequence_id, resolution, qp)
        if rec is None:
            raise MissingMeasurementError(
                f"no measurement for {sequence_id}/{resolution}/qp={qp}")
        return rec


VMAF_CEILING = 100.0
MAX_ASYMPTOTE = 120.0


@dataclass(frozen=True)
class CurveParams:
    """Parametric stand-in for one encoder + VMAF rate-quality curve.

    ``log_rate(qp) = a - b * qp + c * (qp - q0)**2`` (kbps) and
    ``vmaf = min(100, v_max / (1 + exp(-(log_rate - mu) / sigma_s)))``.
    An asymptote ``v_max`` above 100 gives the flat VMAF ceiling seen on
    easy content at high rates.  A small
    positive ``c`` gives the mild convexity of real encoders; ``c = 0`` is
    exactly log-linear.
    """

    v_max: float
    mu: float
    sigma_s: float
    a: float
    b: float
    c: float = 0.0
    q0: float = 30.0

    def __post_init__(self):
        if not 0 < self.v_max <= MAX_ASYMPTOTE:
            raise ConfigError(f"v_max must lie in (0, {MAX_ASYMPTOTE}], got {self.v_max}")
        if self.sigma_s <= 0:
            raise ConfigError(f"sigma_s must be positive, got {self.sigma_s}")
        if self.b <= 0:
            raise ConfigError(f"b must be positive, got {self.b}")
        # Rate must fall with QP over the whole universe.
        edge = QP_MAX if self.c > 0 else QP_MIN
        if self.b - 2.0 * self.c * (edge - self.q0) <= 0:
            raise ConfigError(f"curvature c={self.c} makes rate non-monotone in QP")

    def log_rate(self, qp):
        u = np.asarray(qp, dtype=float) - self.q0
        return self.a - self.b * self.q0 - self.b * u + self.c * u * u

    def vmaf_at_log_rate(self, log_rate):
        z = -(np.asarray(log_rate, dtype=float) - self.mu) / self.sigma_s
        return np.minimum(VMAF_CEILING, self.v_max / (1.0 + np.exp(z)))

    def vmaf(self, qp):
        return self.vmaf_at_log_rate(self.log_rate(qp))

    def qp_at_log_rate(self, log_rate):
        # Root of c*u**2 - b*u + k = 0 on the decreasing branch, in a form
        # that stays exact as c -> 0.
        k = self.a - self.b * self.q0 - np.asarray(log_rate, dtype=float)
        disc = np.maximum(self.b * self.b - 4.0 * self.c * k, 0.0)
        return self.q0 + 2.0 * k / (self.b + np.sqrt(disc))


@dataclass(frozen=True)
class SyntheticSequence:
    sequence_id: str
    curves: Mapping[Resolution, CurveParams]
    latent: Mapping[str, float] = field(default_factory=dict)


def _triple_seed(seed: int, sequence_id: str, resolution: Resolution, qp: int) -> List[int]:
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(sequence_id.encode()), resolution.rank, int(qp)]


class SyntheticBackend:
    """Evaluates parametric curves, with optional Gaussian VMAF noise.

    Noise is drawn from a generator seeded by the triple itself, so a record
    does not depend on request order or concurrency.
    """

    kind = "synthetic"

    def __init__(self, sequences: Mapping[str, SyntheticSequence], noise: float = 0.0, seed: int = 0):
        if noise < 0:
            raise ConfigError("noise must be >= 0")
        self.sequences = dict(sequences)
        self.noise = float(noise)
        self.seed = int(seed)

    def encode(self, sequence_id: str, resolution: Resolution, qp: int) -> EncodeRecord:
        try:
            params = self.sequences[sequence_id].curves[resolution]
        except KeyError:
            raise MissingMeasurementError(f"unknown synthetic curve {sequence_id}/{resolution}") from None
        log_rate = float(params.log_rate(qp))
        vmaf = float(params.vmaf(qp))
        if self.noise > 0:
            rng = np.random.default_rng(_triple_seed(self.seed, sequence_id, resolution, qp))
            vmaf = float(np.clip(vmaf + rng.normal(0.0, self.noise), 0.0, 100.0))
        return EncodeRecord(sequence_id, resolution, int(qp), math.exp(log_rate), vmaf)


class ExternalCommandBackend:
    """Shells out to ``<program> <sequence> <resolution_label> <qp>``.

    The program must print ``bitrate_kbps vmaf`` on stdout and exit 0.
    """

    kind = "external"

    def __init__(self, command: Union[str, Sequence[str]], timeout: Optional[float] = None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ConfigError("empty external command")
        self.timeout = timeout

    def encode(self, sequence_id: str, resolution: Resolution, qp: int) -> EncodeRecord:
        argv = [*self.command, sequence_id, resolution.label, str(int(qp))]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise BackendError(f"failed to run {argv[0]}: {exc}") from exc
        if proc.returncode != 0:
            raise BackendError(
                f"{' '.join(argv)} exited with status {proc.returncode}",
                output=(proc.stdout + proc.stderr).strip(),
            )
        fields = proc.stdout.split()
        if len(fields) != 2:
            raise BackendError(f"expected 'bitrate_kbps vmaf' on stdout, got {proc.stdout!r}")
        try:
            rate, vmaf = float(fields[0]), float(fields[1])
        except ValueError:
            raise BackendError(f"unparseable encoder output {proc.stdout!r}") from None
        rec = EncodeRecord(sequence_id, resolution, int(qp), rate, vmaf)
        try:
            rec.check()
        except ValidationError as exc:
            raise BackendError(f"encoder returned an invalid record: {exc}") from exc
        return rec


class EncodeSession:
    """Cached, thread-safe access to a backend with encode accounting.

    ``tally`` counts the distinct triples that reached the backend.  Records
    preloaded with :meth:`load_cache` are served without counting.
    """

    def __init__(self, backend, qp_range: Tuple[int, int] = (QP_MIN, QP_MAX)):
        self.backend = backend
        self.qp_range = qp_range
        self._cache: Dict[Triple, EncodeRecord] = {}
        self._inflight: Dict[Triple, Future] = {}
        self._lock = threading.Lock()
        self._tally: Dict[str, int] = {}
        self._requested: Dict[str, set] = {}

    @property
    def kind(self) -> str:
        return getattr(self.backend, "kind", type(self.backend).__name__)

    @property
    def tally(self) -> int:
        with self._lock:
            return sum(self._tally.values())

    def sequence_tally(self, sequence_id: str) -> int:
        with self._lock:
            return self._tally.get(sequence_id, 0)

    def requested(self, sequence_id: Optional[str] = None) -> int:
        """Distinct triples requested (hits and misses alike)."""
        with self._lock:
            if sequence_id is not None:
                return len(self._requested.get(sequence_id, ()))
            return sum(len(v) for v in self._requested.values())

    def encode(self, sequence_id: str, resolution: Resolution, qp: int) -> EncodeRecord:
        qp = int(qp)
        if not self.qp_range[0] <= qp <= self.qp_range[1]:
            raise ValidationError(f"qp {qp} outside QP universe {self.qp_range}")
        key = (sequence_id, resolution, qp)
        with self._lock:
            self._requested.setdefault(sequence_id, set()).add(key)
            rec = self._cache.get(key)
            if rec is not None:
                return rec
            fut = self._inflight.get(key)
            owner = fut is None
            if owner:
                fut = Future()
                self._inflight[key] = fut
        if not owner:
            return fut.result()
        try:
            rec = self.backend.encode(sequence_id, resolution, qp)
        except BaseException as exc:
            with self._lock:
                del self._inflight[key]
            fut.set_exception(exc)
            raise
        with self._lock:
            self._cache[key] = rec
            self._tally[sequence_id] = self._tally.get(sequence_id, 0) + 1
            del self._inflight[key]
        fut.set_result(rec)
        return rec

    def encode_many(self, triples: Iterable[Triple], jobs: int = 1) -> List[EncodeRecord]:
        triples = list(triples)
        if jobs <= 1 or len(triples) <= 1:
            return [self.encode(*t) for t in triples]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda t: self.encode(*t), triples))

    def records(self) -> List[EncodeRecord]:
        with self._lock:
            return list(self._cache.values())

    def save_cache(self, path) -> Path:
        return save_measurements(self.records(), path)

    def load_cache(self, path) -> int:
        """Preload records from a measurement CSV/JSON; returns how many were added."""
        mset = load_measurements(path, qp_range=self.qp_range)
        added = 0
        with self._lock:
            for rec in mset.records():
                if rec.key not in self._cache:
                    self._cache[rec.key] = rec
                    added += 1
        return added


def _knee_index_qp(params: CurveParams, qps: np.ndarray) -> Optional[int]:
    from .kneedle import kneedle

    ordered = qps[::-1]
    idx = kneedle(params.log_rate(ordered), params.vmaf(ordered))
    return None if idx is None else int(ordered[idx])


def solve_midpoint_for_knee(a: float, b: float, sigma_s: float, knee: int,
                            qp_range: Tuple[int, int] = (QP_MIN, QP_MAX), c: float = 0.0) -> float:
    """Logistic midpoint ``mu`` whose Kneedle knee on the QP grid is ``knee``.

    The knee QP is a non-decreasing step function of ``a - mu``; both edges
    of the step that yields ``knee`` are bracketed by bisection and the
    midpoint of the step is returned.
    """
    qps = np.arange(qp_range[0], qp_range[1] + 1)

    def knee_at(gap: float) -> float:
        k = _knee_index_qp(CurveParams(100.0, a - gap, sigma_s, a, b, c), qps)
        return -math.inf if k is None else k

    def edge(target: float) -> float:
        lo, hi = 0.0, b * (qp_range[1] - qp_range[0]) + 8 * sigma_s
        while hi - lo > 1e-4:
            mid = 0.5 * (lo + hi)
            if knee_at(mid) >= target:
                hi = mid
            else:
                lo = mid
        return hi

    low, high = edge(knee), edge(knee + 1)
    if not low < high or knee_at(0.5 * (low + high)) != knee:
        raise ConfigError(f"no logistic midpoint gives a knee at qp {knee}")
    return a - 0.5 * (low + high)


def _crossings(high: CurveParams, low: CurveParams, qp_range: Tuple[int, int]) -> int:
    """Sign changes of ``high - low`` VMAF over the shared log-rate span."""
    lo = max(float(high.log_rate(qp_range[1])), float(low.log_rate(qp_range[1])))
    hi = min(float(high.log_rate(qp_range[0])), float(low.log_rate(qp_range[0])))
    if not lo < hi:
        return 0
    r = np.linspace(lo, hi, 601)
    d = high.vmaf_at_log_rate(r) - low.vmaf_at_log_rate(r)
    sign = np.sign(d[np.abs(d) > 1e-9])
    return int(np.count_nonzero(sign[1:] != sign[:-1]))


@dataclass(frozen=True)
class ParamSampler:
    """Distributions for drawing synthetic per-sequence curve parameters.

    Each sequence draws a 2160p rate level, a QP-to-rate slope, a logistic
    width, per-resolution knee QPs and the high-resolution QP of each
    adjacent cross-over.  Midpoints are then solved so the curves have those
    knees, and VMAF ceilings so adjacent curves intersect at those QPs.
    Lower resolutions get a pixel-count rate discount ``ratio**-rate_exponent``.
    """

    a_2160: Tuple[float, float] = (12.6, 13.4)
    b: Tuple[float, float] = (0.125, 0.155)
    curvature: Tuple[float, float] = (0.0005, 0.0015)
    sigma_s: Tuple[float, float] = (0.35, 0.6)
    # Each lower resolution's logistic width over the next higher one's; wider
    # low-resolution curves cross their neighbour at a steeper angle.
    sigma_ratio: Tuple[float, float] = (1.2, 1.5)
    rate_exponent: Tuple[float, float] = (0.75, 0.9)
    v_max_2160: Tuple[float, float] = (100.0, 115.0)
    # Knee QP mean and spread per resolution, 2160p first.
    knee_mean: Tuple[float, ...] = (30.0, 25.0, 25.0, 23.0)
    knee_sd: Tuple[float, ...] = (1.6, 1.7, 1.5, 1.5)
    # QP of the higher resolution at each adjacent cross-over, (2160,1080) first.
    crossover_mean: Tuple[float, ...] = (30.0, 38.0, 41.0)
    crossover_sd: Tuple[float, ...] = (2.0, 2.0, 1.5)
    min_v_max: float = 20.0
    max_tries: int = 200

    def __post_init__(self):
        for name in ("a_2160", "b", "curvature", "sigma_s", "sigma_ratio", "rate_exponent",
                     "v_max_2160"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigError(f"{name}: empty range ({lo}, {hi})")
        if self.sigma_s[0] <= 0:
            raise ConfigError("sigma_s range must be positive")
        if self.b[0] <= 0:
            raise ConfigError("b range must be positive")
        if not 0 < self.v_max_2160[0] <= self.v_max_2160[1] <= MAX_ASYMPTOTE:
            raise ConfigError(f"v_max_2160 must lie in (0, {MAX_ASYMPTOTE}]")
        if len(self.knee_mean) != 4 or len(self.knee_sd) != 4:
            raise ConfigError("knee_mean/knee_sd need one entry per resolution")
        if len(self.crossover_mean) != 3 or len(self.crossover_sd) != 3:
            raise ConfigError("crossover_mean/crossover_sd need one entry per adjacent pair")

    def _draw(self, sequence_id: str, rng: np.random.Generator,
              qp_range: Tuple[int, int]) -> Optional[SyntheticSequence]:
        lo_q, hi_q = qp_range
        a0 = float(rng.uniform(*self.a_2160))
        b = float(rng.uniform(*self.b))
        c = float(rng.uniform(*self.curvature))
        sigma = float(rng.uniform(*self.sigma_s))
        gamma = float(rng.uniform(*self.rate_exponent))
        v_top = float(rng.uniform(*self.v_max_2160))
        resolutions = Resolution.descending()
        knees = [int(round(float(np.clip(rng.normal(m, sd), m - 2.5 * sd, m + 2.5 * sd))))
                 for m, sd in zip(self.knee_mean, self.knee_sd)]
        xqps = [float(np.clip(rng.normal(m, sd), m - 2.5 * sd, m + 2.5 * sd))
                for m, sd in zip(self.crossover_mean, self.crossover_sd)]
        top_pixels = Resolution.R2160P.width * Resolution.R2160P.height

        ratio = float(rng.uniform(*self.sigma_ratio))
        curves: Dict[Resolution, CurveParams] = {}
        prev = None
        prev_r = math.inf
        for k, res in enumerate(resolutions):
            a = a0 - gamma * math.log(top_pixels / (res.width * res.height))
            sigma_k = sigma * ratio ** k
            try:
                mu = solve_midpoint_for_knee(a, b, sigma_k, knees[k], qp_range, c)
            except ConfigError:
                return None
            if prev is None:
                curves[res] = CurveParams(v_top, mu, sigma_k, a, b, c)
            else:
                r_star = float(prev.log_rate(xqps[k - 1]))
                low_qp = float(CurveParams(100.0, mu, sigma_k, a, b, c).qp_at_log_rate(r_star))
                if not (lo_q + 1 <= low_qp <= hi_q - 1 and r_star < prev_r):
                    return None
                v_prev = float(prev.vmaf_at_log_rate(r_star))
                if v_prev >= VMAF_CEILING:
                    return None
                v_max = v_prev * (1.0 + math.exp(-(r_star - mu) / sigma_k))
                if not self.min_v_max <= v_max < prev.v_max:
                    return None
                curves[res] = CurveParams(v_max, mu, sigma_k, a, b, c)
                if _crossings(prev, curves[res], qp_range) != 1:
                    return None
                prev_r = r_star
            prev = curves[res]
        latent = {"a": a0, "b": b, "c": c, "sigma_s": sigma, "sigma_ratio": ratio,
                  "rate_exponent": gamma, "v_max": v_top}
        latent.update({f"knee_{r.label}": float(k) for r, k in zip(resolutions, knees)})
        latent.update({f"crossover_{h.label}": x for (h, _), x in
                       zip(zip(resolutions, resolutions[1:]), xqps)})
        return SyntheticSequence(sequence_id, curves, latent)

    def sample(self, sequence_id: str, rng: np.random.Generator,
               qp_range: Tuple[int, int] = (QP_MIN, QP_MAX)) -> SyntheticSequence:
        for _ in range(self.max_tries):
            seq = self._draw(sequence_id, rng, qp_range)
            if seq is not None:
                return seq
        raise ConfigError(f"could not draw consistent curves for {sequence_id} "
                          f"in {self.max_tries} tries; check the sampler ranges")


def generate_corpus(n_sequences: int, param_sampler: Optional[ParamSampler] = None, seed: int = 0,
                    noise: float = 0.0, qp_range: Tuple[int, int] = (QP_MIN, QP_MAX)) -> MeasurementSet:
    """Synthetic measurement corpus sampled at every QP of the universe.

    Deterministic for a fixed seed.  The parametric ground truth is kept on
    the returned set as ``truth`` (``{sequence_id: SyntheticSequence}``).

    Raises:
        ConfigError: ``n_sequences < 1`` or a degenerate parameter range.
    """
    if n_sequences < 1:
        raise ConfigError("n_sequences must be >= 1")
    sampler = param_sampler or ParamSampler()
    rng = np.random.default_rng(seed)
    width = max(3, len(str(n_sequences - 1)))
    truth = {}
    for i in range(n_sequences):
        sid = f"seq{i:0{width}d}"
        truth[sid] = sampler.sample(sid, rng, qp_range)
    backend = SyntheticBackend(truth, noise=noise, seed=seed)
    records = [
        backend.encode(sid, res, qp)
        for sid in truth
        for res in Resolution.descending()
        for qp in range(qp_range[0], qp_range[1] + 1)
    ]
    mset = MeasurementSet(records, qp_range=qp_range,
                          metadata={"generator": "synthetic", "seed": seed, "noise": noise,
                                    "n_sequences": n_sequences})
    mset.truth = truth
    return mset
