import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ladderkit.backend import SyntheticBackend, generate_corpus
from ladderkit.core import (CSV_COLUMNS, ConflictError, EncodeRecord, InsufficientDataError,
                            MeasurementSet, ParseError, Resolution, RQCurve, Sample,
                            ValidationError, load_measurements, save_measurements, validate_curve)


def _write_csv(path, rows):
    lines = [",".join(CSV_COLUMNS)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


class TestResolution:
    def test_ordering_by_pixel_count(self):
        assert Resolution.R540P < Resolution.R720P < Resolution.R1080P < Resolution.R2160P
        assert Resolution.descending()[0] is Resolution.R2160P

    def test_from_label_is_case_insensitive(self):
        assert Resolution.from_label(" 1080P ") is Resolution.R1080P

    def test_unknown_label(self):
        with pytest.raises(ValidationError):
            Resolution.from_label("480p")


class TestLoadMeasurements:
    def test_full_grid_single_sequence(self, tmp_path):
        rows = [("a", r.label, q, 1000.0 * (4 - i) / (q - 14), 90.0 - (q - 15) - i)
                for i, r in enumerate(Resolution.descending()) for q in range(15, 46)]
        mset = load_measurements(_write_csv(tmp_path / "m.csv", rows))
        assert len(mset) == 4
        assert all(len(mset[key]) == 31 for key in mset)
        assert mset.sequences == ["a"]

    def test_header_only_gives_empty_set_and_warns(self, tmp_path, caplog):
        path = _write_csv(tmp_path / "m.csv", [])
        with caplog.at_level(logging.WARNING):
            mset = load_measurements(path)
        assert len(mset) == 0
        assert "empty corpus" in caplog.text

    def test_vmaf_above_100_names_the_row(self, tmp_path):
        path = _write_csv(tmp_path / "m.csv", [("a", "540p", 20, 500, 80), ("a", "540p", 21, 400, 101)])
        with pytest.raises(ValidationError, match="line 3"):
            load_measurements(path)

    def test_duplicate_key_is_a_conflict(self, tmp_path):
        path = _write_csv(tmp_path / "m.csv", [("a", "540p", 20, 500, 80), ("a", "540p", 20, 400, 70)])
        with pytest.raises(ConflictError, match="line 3"):
            load_measurements(path)

    def test_non_integer_qp(self, tmp_path):
        path = _write_csv(tmp_path / "m.csv", [("a", "540p", 20.5, 500, 80)])
        with pytest.raises(ParseError) as exc:
            load_measurements(path)
        assert exc.value.line == 2

    def test_qp_outside_universe(self, tmp_path):
        path = _write_csv(tmp_path / "m.csv", [("a", "540p", 46, 500, 80)])
        with pytest.raises(ValidationError, match="QP universe"):
            load_measurements(path)

    def test_missing_column(self, tmp_path):
        (tmp_path / "m.csv").write_text("sequence,resolution,qp,vmaf\n")
        with pytest.raises(ParseError, match="bitrate_kbps"):
            load_measurements(tmp_path / "m.csv")

    def test_json_mirror(self, tmp_path):
        payload = {"records": [{"sequence": "a", "resolution": "720p", "qp": 30,
                                "bitrate_kbps": 1234.5, "vmaf": 77.25}]}
        (tmp_path / "m.json").write_text(json.dumps(payload))
        mset = load_measurements(tmp_path / "m.json")
        rec = mset.record("a", Resolution.R720P, 30)
        assert (rec.bitrate, rec.vmaf) == (1234.5, 77.25)


class TestRoundTrip:
    @pytest.mark.parametrize("suffix", [".csv", ".json"])
    def test_synthetic_corpus_bit_exact(self, tmp_path, suffix):
        mset = generate_corpus(2, seed=11, noise=0.3)
        back = load_measurements(save_measurements(mset, tmp_path / f"m{suffix}"))
        assert back.records() == mset.records()

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(1e-3, 1e6, allow_nan=False), st.floats(0, 100)),
                    min_size=1, max_size=31))
    def test_arbitrary_floats_survive(self, tmp_path_factory, values):
        recs = [EncodeRecord("s", Resolution.R1080P, 15 + i, r, v) for i, (r, v) in enumerate(values)]
        path = tmp_path_factory.mktemp("rt") / "m.csv"
        back = load_measurements(save_measurements(recs, path))
        assert back.records() == recs


def _curve(vmafs, rates=None, qp0=15):
    rates = rates if rates is not None else [float(100 - i) for i in range(len(vmafs))]
    return RQCurve("s", Resolution.R2160P,
                   tuple(Sample(qp0 + i, float(np.log(r)), v) for i, (r, v) in enumerate(zip(rates, vmafs))))


def _inversions(curve):
    """Samples that are dominated by some lower-QP sample (pairwise scan)."""
    s = curve.samples
    return sum(any(s[j].vmaf > s[i].vmaf or s[j].log_rate >= s[i].log_rate for i in range(j))
               for j in range(len(s)))


class TestValidateCurve:
    def test_monotone_curve_unchanged(self):
        c = _curve([99 - 2 * i for i in range(31)])
        out, rep = validate_curve(c, repair=True)
        assert out == c and rep.ok and not rep.removed

    def test_single_inversion_drops_higher_qp(self):
        vm = [90.0] * 15 + [80.0, 80.2] + [70.0 - i for i in range(14)]
        c = _curve(vm)
        assert c.samples[15].qp == 30
        out, rep = validate_curve(c, repair=True)
        assert rep.removed == [31]
        assert 31 not in out.qps and len(out) == 30

    def test_report_without_repair(self):
        c = _curve([80.0, 80.2, 79.0])
        out, rep = validate_curve(c)
        assert out is c
        assert rep.violations == [(16, "vmaf increases with qp")]

    def test_rate_not_decreasing(self):
        _, rep = validate_curve(_curve([80, 79, 78], rates=[100, 100, 90]), repair=True)
        assert rep.removed == [16]

    def test_too_short(self):
        with pytest.raises(InsufficientDataError):
            validate_curve(_curve([80]))

    @pytest.mark.parametrize("seed", range(5))
    def test_noisy_synthetic_curve(self, seed):
        mset = generate_corpus(1, seed=seed, noise=0.05)
        for key in mset:
            out, rep = validate_curve(mset[key], repair=True)
            v, lr = np.array(out.vmafs), np.array(out.log_rates)
            assert np.all(np.diff(v) <= 0) and np.all(np.diff(lr) < 0)
            # Rates are noise-free, so greedy removal matches the pairwise count.
            assert len(rep.removed) == _inversions(mset[key])

    def test_greedy_count_matches_pairwise_scan(self):
        # Greedy removal equals the number of samples dominated by an earlier kept sample;
        # for isolated inversions that is the pairwise count.
        vm = [95, 94, 94.5, 90, 89, 89.3, 85, 80, 80.1, 70]
        c = _curve(vm)
        _, rep = validate_curve(c, repair=True)
        assert len(rep.removed) == _inversions(c) == 3


class TestMeasurementSet:
    def test_conflict_on_duplicate_record(self):
        r = EncodeRecord("a", Resolution.R540P, 20, 100.0, 50.0)
        with pytest.raises(ConflictError):
            MeasurementSet([r, r])

    def test_subset_and_resolutions(self):
        mset = generate_corpus(3, seed=1)
        sub = mset.subset(["seq001"])
        assert sub.sequences == ["seq001"]
        assert sub.resolutions("seq001") == Resolution.descending()

    def test_synthetic_records_are_valid(self):
        backend = SyntheticBackend(generate_corpus(1, seed=2).truth)
        rec = backend.encode("seq000", Resolution.R720P, 30)
        rec.check()
