import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import PchipInterpolator

from ladderkit.backend import generate_corpus
from ladderkit.core import EncodeRecord, InsufficientDataError, Resolution, ValidationError
from ladderkit.estimators import CIL_OFFSETS, NIL_QPS, cil_qp_set
from ladderkit.interp import DomainError, InterpolatedCurve, fit_rq_curve, pchip_derivative, pchip_eval, pchip_slopes


def textbook_slopes(x, y):
    """Fritsch-Carlson slopes written out directly from the textbook recipe."""
    n = len(x)
    h = [x[k + 1] - x[k] for k in range(n - 1)]
    d = [(y[k + 1] - y[k]) / h[k] for k in range(n - 1)]
    if n == 2:
        return [d[0], d[0]]
    m = [0.0] * n
    for k in range(1, n - 1):
        if d[k - 1] * d[k] > 0:
            w1 = 2 * h[k] + h[k - 1]
            w2 = h[k] + 2 * h[k - 1]
            with np.errstate(over="ignore"):
                m[k] = (w1 + w2) / (w1 / d[k - 1] + w2 / d[k])

    def end(h0, h1, d0, d1):
        s = ((2 * h0 + h1) * d0 - h0 * d1) / (h0 + h1)
        if s * d0 <= 0:
            return 0.0
        if d0 * d1 <= 0 and abs(s) > abs(3 * d0):
            return 3 * d0
        return s

    m[0] = end(h[0], h[1], d[0], d[1])
    m[-1] = end(h[-1], h[-2], d[-1], d[-2])
    return m


monotone_knots = st.integers(3, 12).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0.05, 5.0), min_size=n - 1, max_size=n - 1),
    st.lists(st.floats(0.0, 10.0), min_size=n - 1, max_size=n - 1),
    st.booleans(),
))


def _build(gaps, rises, decreasing):
    x = np.concatenate([[0.0], np.cumsum(gaps)])
    y = np.concatenate([[0.0], np.cumsum(rises)])
    return x, (-y if decreasing else y)


class TestSlopes:
    def test_two_knots_give_secant(self):
        assert np.allclose(pchip_slopes([1.0, 3.0], [2.0, 6.0]), [2.0, 2.0])

    def test_flat_interval_zeroes_flanking_slopes(self):
        m = pchip_slopes([0, 1, 2, 3], [0, 1, 1, 2])
        assert m[1] == 0.0 and m[2] == 0.0

    def test_cubic_matches_textbook(self):
        x = [-2.0, -1.0, 0.0, 1.0, 2.0]
        y = [v ** 3 for v in x]
        assert np.allclose(pchip_slopes(x, y), textbook_slopes(x, y), rtol=0, atol=1e-12)

    def test_cubic_matches_scipy(self):
        x = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
        ref = PchipInterpolator(x, x ** 3).derivative()(x)
        assert np.allclose(pchip_slopes(x, x ** 3), ref, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(monotone_knots)
    def test_matches_textbook_on_random_knots(self, knots):
        x, y = _build(*knots)
        assert np.allclose(pchip_slopes(x, y), textbook_slopes(list(x), list(y)), rtol=1e-12, atol=1e-12)

    def test_duplicate_abscissa(self):
        with pytest.raises(ValidationError):
            pchip_slopes([0, 1, 1, 2], [0, 1, 2, 3])

    def test_single_knot(self):
        with pytest.raises(InsufficientDataError):
            pchip_slopes([0.0], [1.0])


class TestEval:
    def test_exact_at_knots(self):
        x = np.array([15, 20, 25, 30, 35, 40, 45], float)
        y = np.array([99.1, 97.3, 93.0, 85.2, 72.9, 58.0, 41.7])
        c = InterpolatedCurve.fit(x, y)
        assert np.array_equal(c(x), y)
        assert all(c(float(a)) == b for a, b in zip(x, y))

    def test_collinear_is_linear(self):
        x = np.array([0.0, 1.0, 2.5, 4.0, 7.0])
        c = InterpolatedCurve.fit(x, 3.0 - 2.0 * x)
        mid = 0.5 * (x[1:] + x[:-1])
        assert np.allclose(c(mid), 3.0 - 2.0 * mid, atol=1e-12)

    def test_matches_scipy_dense(self):
        rng = np.random.default_rng(0)
        x = np.cumsum(rng.uniform(0.2, 2.0, 9))
        y = np.cumsum(rng.uniform(0.0, 3.0, 9))
        xq = np.linspace(x[0], x[-1], 2001)
        assert np.allclose(InterpolatedCurve.fit(x, y)(xq), PchipInterpolator(x, y)(xq), atol=1e-12)

    def test_derivative_matches_scipy(self):
        x = np.array([0.0, 1.0, 3.0, 4.0, 6.0])
        y = np.array([0.0, 0.5, 2.0, 2.1, 5.0])
        xq = np.linspace(0, 6, 301)
        ref = PchipInterpolator(x, y).derivative()(xq)
        assert np.allclose(pchip_derivative(InterpolatedCurve.fit(x, y), xq), ref, atol=1e-10)

    @pytest.mark.parametrize("xq", [14.999, 45.001, np.nan])
    def test_no_extrapolation(self, xq):
        c = InterpolatedCurve.fit([15.0, 30.0, 45.0], [90.0, 70.0, 40.0])
        with pytest.raises(DomainError):
            pchip_eval(c, xq)

    def test_synthetic_vmaf_stays_within_brackets(self, corpus10):
        for key in corpus10:
            recs = [r for r in corpus10[key].records() if r.qp in NIL_QPS]
            fit = fit_rq_curve(recs)
            qx = np.round(np.arange(15.0, 45.0 + 1e-9, 0.1), 10)
            v = fit.vmaf(qx)
            knots_q = np.array(NIL_QPS, float)
            knots_v = fit.vmaf.y
            j = np.clip(np.searchsorted(knots_q, qx, side="right") - 1, 0, len(knots_q) - 2)
            lo = np.minimum(knots_v[j], knots_v[j + 1])
            hi = np.maximum(knots_v[j], knots_v[j + 1])
            assert np.all(v >= lo - 1e-12) and np.all(v <= hi + 1e-12)

    @settings(max_examples=100, deadline=None)
    @given(monotone_knots)
    def test_monotone_preservation(self, knots):
        x, y = _build(*knots)
        c = InterpolatedCurve.fit(x, y)
        v = c(np.linspace(x[0], x[-1], 10_000))
        steps = np.diff(v) if y[-1] >= y[0] else -np.diff(v)
        assert steps.min() >= -1e-12
        assert v.min() >= y.min() - 1e-12 and v.max() <= y.max() + 1e-12

    def test_locality(self):
        x = np.arange(10.0)
        y = np.sqrt(x + 1.0)
        base = InterpolatedCurve.fit(x, y)
        for i in range(10):
            y2 = y.copy()
            y2[i] += 0.05
            pert = InterpolatedCurve.fit(x, y2)
            outside = np.concatenate([np.linspace(0, max(i - 2, 0), 50) if i >= 2 else [],
                                      np.linspace(min(i + 2, 9), 9, 50) if i <= 7 else []])
            if outside.size:
                assert np.array_equal(base(outside), pert(outside)), i


class TestInverse:
    def test_round_trip(self):
        c = InterpolatedCurve.fit([15, 20, 25, 30, 45], [10.0, 9.1, 8.0, 7.5, 5.0])
        q = np.linspace(15, 45, 97)
        assert np.allclose(c.inverse(c(q)), q, atol=1e-8)

    def test_scalar_in_scalar_out(self):
        c = InterpolatedCurve.fit([0.0, 1.0, 2.0], [0.0, 1.0, 4.0])
        assert isinstance(c.inverse(1.0), float)

    def test_out_of_range(self):
        c = InterpolatedCurve.fit([0.0, 1.0, 2.0], [0.0, 1.0, 4.0])
        with pytest.raises(DomainError):
            c.inverse(4.5)


class TestFitRQCurve:
    def test_nil_records_cover_universe(self, corpus10):
        recs = [r for r in corpus10["seq000", Resolution.R1080P].records() if r.qp in NIL_QPS]
        fit = fit_rq_curve(recs)
        assert list(fit.integer_qps()) == list(range(15, 46))
        assert np.all(np.isfinite(fit.vmaf(fit.integer_qps())))

    def test_two_records_are_linear(self):
        recs = [EncodeRecord("s", Resolution.R540P, 20, 800.0, 70.0),
                EncodeRecord("s", Resolution.R540P, 40, 200.0, 30.0)]
        fit = fit_rq_curve(recs)
        assert fit.vmaf(30.0) == pytest.approx(50.0, abs=1e-12)
        assert fit.log_rate(30.0) == pytest.approx(0.5 * (np.log(800) + np.log(200)), abs=1e-12)

    @staticmethod
    def _cil_errors(mset):
        out = {}
        for sid, seq in mset.truth.items():
            for res, params in seq.curves.items():
                qps = cil_qp_set(int(seq.latent[f"knee_{res.label}"]), CIL_OFFSETS[res], 5)
                fit = fit_rq_curve([mset.record(sid, res, q) for q in qps])
                interim = np.array([q for q in range(qps[0], qps[-1] + 1) if q not in qps], float)
                err = np.abs(fit.vmaf(interim) - params.vmaf(interim)).max()
                out.setdefault(res, []).append(float(err))
        return out

    def test_cil_records_track_truth_past_the_knee(self):
        # 720p and 540p samples start 6 and 10 QPs past the knee, on the smooth tail.
        errs = self._cil_errors(generate_corpus(20, seed=5))
        assert max(errs[Resolution.R720P] + errs[Resolution.R540P]) < 0.5

    def test_cil_records_near_the_knee(self):
        # 2160p and 1080p samples straddle the steep logistic section and the clip at 100,
        # where five points cannot hold 0.5 VMAF.
        errs = self._cil_errors(generate_corpus(20, seed=5))
        top = errs[Resolution.R2160P] + errs[Resolution.R1080P]
        assert max(top) < 5.0
        assert np.median(top) < 1.0

    def test_mixed_resolutions(self):
        recs = [EncodeRecord("s", Resolution.R540P, 20, 800.0, 70.0),
                EncodeRecord("s", Resolution.R720P, 40, 200.0, 30.0)]
        with pytest.raises(ValidationError):
            fit_rq_curve(recs)

    def test_repeated_qp(self):
        recs = [EncodeRecord("s", Resolution.R540P, 20, 800.0, 70.0),
                EncodeRecord("t", Resolution.R540P, 20, 700.0, 60.0)]
        with pytest.raises(ValidationError):
            fit_rq_curve(recs)
