import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import bisect

from ladderkit.backend import CurveParams
from ladderkit.core import ADJACENT_PAIRS, EncodeRecord, Resolution, ValidationError
from ladderkit.interp import fit_rq_curve
from ladderkit.pareto import (FrontPoint, NoOverlapError, crossover_qps, find_crossover, pareto_front,
                              points_from_fit, points_from_records, read_crossovers_csv,
                              sequence_crossovers, write_crossovers_csv)

from conftest import fit_from_params


def brute_force_front(points):
    """O(n^2) dominance filter; exact duplicates keep the higher resolution."""
    keep = []
    for p in points:
        dominated = False
        for q in points:
            if q is p:
                continue
            if q.vmaf >= p.vmaf and q.log_rate <= p.log_rate and (q.vmaf > p.vmaf or q.log_rate < p.log_rate):
                dominated = True
            elif (q.vmaf, q.log_rate) == (p.vmaf, p.log_rate) and \
                    (q.resolution.rank, q.qp) > (p.resolution.rank, p.qp):
                dominated = True
        if not dominated:
            keep.append(p)
    return sorted(keep, key=lambda p: p.log_rate)


def oracle_crossover(ph: CurveParams, pl: CurveParams):
    """Highest-rate sign change of the VMAF gap, refined by bisection on the parametric curves."""
    lo = max(float(ph.log_rate(45)), float(pl.log_rate(45)))
    hi = min(float(ph.log_rate(15)), float(pl.log_rate(15)))
    r = np.linspace(lo, hi, 4001)
    f = ph.vmaf_at_log_rate(r) - pl.vmaf_at_log_rate(r)
    keep = np.abs(f) > 1e-9
    r, f = r[keep], f[keep]
    flips = np.nonzero(np.sign(f[1:]) != np.sign(f[:-1]))[0]
    if not flips.size:
        return None
    i = flips[-1]
    r_star = bisect(lambda t: float(ph.vmaf_at_log_rate(t) - pl.vmaf_at_log_rate(t)), r[i], r[i + 1], xtol=1e-13)
    return (math.floor(float(ph.qp_at_log_rate(r_star)) + 0.5),
            math.floor(float(pl.qp_at_log_rate(r_star)) + 0.5), r_star)


class TestParetoFront:
    def test_single_curve_is_whole_front(self, corpus10):
        pts = points_from_records(corpus10["seq000", Resolution.R720P].records())
        assert sorted(pareto_front(pts)) == sorted(pts)

    def test_full_domination(self):
        a = [FrontPoint(float(i), 50.0 + i, 30 - i, Resolution.R1080P) for i in range(5)]
        b = [FrontPoint(p.log_rate + 0.1, p.vmaf - 1.0, p.qp, Resolution.R720P) for p in a]
        assert list(pareto_front({Resolution.R1080P: a, Resolution.R720P: b})) == a

    def test_matches_pairwise_filter(self, corpus10):
        for sid in corpus10.sequences:
            pts = [p for r in Resolution for p in points_from_records(corpus10[sid, r].records())]
            assert len(pts) == 124
            assert list(pareto_front(pts)) == brute_force_front(pts)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 40), st.integers(0, 40), st.sampled_from(list(Resolution)),
                              st.integers(15, 45)), min_size=1, max_size=40))
    def test_random_points(self, raw):
        pts = [FrontPoint(a / 4.0, b * 2.5, q, r) for a, b, r, q in raw]
        front = pareto_front(pts)
        assert list(pareto_front(front)) == list(front)
        assert np.all(np.diff(front.log_rates) > 0) and np.all(np.diff(front.vmafs) > 0)
        got = {(p.log_rate, p.vmaf) for p in front}
        want = {(p.log_rate, p.vmaf) for p in brute_force_front(pts)}
        assert got == want

    def test_idempotent(self, corpus10):
        pts = [p for r in Resolution for p in points_from_records(corpus10["seq003", r].records())]
        front = pareto_front(pts)
        assert pareto_front(front) == front

    def test_empty(self):
        with pytest.raises(ValidationError):
            pareto_front([])

    def test_switch_near_crossover(self, corpus10):
        step = 0.1
        for sid in corpus10.sequences:
            fits = {r: fit_rq_curve(corpus10[sid, r].records()) for r in Resolution}
            dense = []
            for r, f in fits.items():
                q, lr, vm = f.dense(step)
                dense += [FrontPoint(float(a), float(b), int(round(c)), r) for a, b, c in zip(lr, vm, q)]
            front = pareto_front(dense)
            for (high, low), pair in sequence_crossovers(fits).items():
                if pair is None:
                    continue
                switches = [0.5 * (a.log_rate + b.log_rate) for a, b in zip(front, front[1:])
                            if a.resolution is low and b.resolution is high]
                # One QP step in log-rate, taken from the steeper curve.
                tol = max(f.log_rate.slopes.__abs__().max() for f in (fits[high], fits[low])) * step
                assert switches and min(abs(s - pair.log_rate) for s in switches) <= tol


class TestCrossover:
    def test_identical_curves_coincide(self, corpus10):
        recs = corpus10["seq000", Resolution.R1080P].records()
        a = fit_rq_curve(recs)
        b = fit_rq_curve([EncodeRecord(r.sequence_id, Resolution.R720P, r.qp, r.bitrate, r.vmaf) for r in recs])
        res = find_crossover(a, b)
        assert res.pair is None and res.diagnostic == "degenerate: curves coincide"
        assert crossover_qps(a, b) is None

    def test_uniform_offset_is_domination(self, corpus10):
        recs = corpus10["seq000", Resolution.R1080P].records()
        low = [EncodeRecord(r.sequence_id, Resolution.R720P, r.qp, r.bitrate, max(r.vmaf - 5.0, 0.0))
               for r in recs if r.vmaf >= 5.0]
        res = find_crossover(fit_rq_curve(recs), fit_rq_curve(low))
        assert res.pair is None and res.diagnostic.startswith("dominated: 1080p")

    def test_matches_bisection_oracle(self, corpus10):
        for sid, seq in corpus10.truth.items():
            fits = {r: fit_rq_curve(corpus10[sid, r].records()) for r in Resolution}
            for high, low in ADJACENT_PAIRS:
                want = oracle_crossover(seq.curves[high], seq.curves[low])
                got = crossover_qps(fits[high], fits[low])
                assert (got.qp_high, got.qp_low) == want[:2], (sid, high)
                assert got.log_rate == pytest.approx(want[2], abs=0.02)

    def test_hand_built_logistics(self):
        hi = CurveParams(100.0, 8.0, 0.45, 12.9, 0.14)
        lo = CurveParams(90.0, 7.3, 0.6, 11.8, 0.14)
        want = oracle_crossover(hi, lo)
        got = crossover_qps(fit_from_params(hi, Resolution.R2160P), fit_from_params(lo, Resolution.R1080P))
        assert (got.qp_high, got.qp_low) == want[:2]

    def test_argument_order_is_normalised(self, corpus10):
        fits = {r: fit_rq_curve(corpus10["seq002", r].records()) for r in Resolution}
        assert crossover_qps(fits[Resolution.R720P], fits[Resolution.R1080P]) == \
            crossover_qps(fits[Resolution.R1080P], fits[Resolution.R720P])

    def test_non_adjacent(self, corpus10):
        fits = {r: fit_rq_curve(corpus10["seq002", r].records()) for r in Resolution}
        with pytest.raises(ValidationError):
            crossover_qps(fits[Resolution.R2160P], fits[Resolution.R720P])

    def test_no_overlap(self):
        a = fit_rq_curve([EncodeRecord("s", Resolution.R1080P, q, 1e4 / q, 90.0 - q) for q in (20, 30)])
        b = fit_rq_curve([EncodeRecord("s", Resolution.R720P, q, 10.0 / q, 80.0 - q) for q in (20, 30)])
        with pytest.raises(NoOverlapError):
            find_crossover(a, b)

    @pytest.mark.parametrize("rounding", ["floor", "ceil"])
    def test_rounding_modes_bracket_nearest(self, corpus10, rounding):
        fits = {r: fit_rq_curve(corpus10["seq004", r].records()) for r in Resolution}
        near = crossover_qps(fits[Resolution.R2160P], fits[Resolution.R1080P])
        other = crossover_qps(fits[Resolution.R2160P], fits[Resolution.R1080P], rounding=rounding)
        assert abs(other.qp_high - near.qp_high) <= 1
        assert other.log_rate == near.log_rate


class TestCrossoverCSV:
    def test_round_trip(self, tmp_path, corpus10):
        fits = {r: fit_rq_curve(corpus10["seq005", r].records()) for r in Resolution}
        pairs = sequence_crossovers(fits)
        path = write_crossovers_csv({"seq005": pairs.values()}, tmp_path / "x.csv")
        back = read_crossovers_csv(path)["seq005"]
        assert back == {k: (float(p.qp_high), float(p.qp_low)) for k, p in pairs.items() if p}

    def test_points_from_fit_cover_span(self, corpus10):
        fit = fit_rq_curve(corpus10["seq005", Resolution.R540P].records())
        assert [p.qp for p in points_from_fit(fit)] == list(range(15, 46))
