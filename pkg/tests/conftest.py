import sys

import numpy as np
import pytest

from ladderkit.backend import CurveParams, generate_corpus
from ladderkit.core import EncodeRecord, Resolution
from ladderkit.interp import fit_rq_curve


@pytest.fixture(scope="session")
def corpus10():
    """Noise-free synthetic corpus shared by the slower module tests."""
    return generate_corpus(10, seed=3)


def records_from_params(params: CurveParams, resolution=Resolution.R2160P, qps=range(15, 46),
                        sequence_id="s"):
    return [EncodeRecord(sequence_id, resolution, int(q), float(np.exp(params.log_rate(q))),
                         float(params.vmaf(q))) for q in qps]


def fit_from_params(params: CurveParams, resolution=Resolution.R2160P, qps=range(15, 46)):
    return fit_rq_curve(records_from_params(params, resolution, qps))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)
