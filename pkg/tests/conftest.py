import math

import numpy as np
import pytest

from dsbmm.metrics import spectrum0_ar
from dsbmm.rand import RngStream


@pytest.fixture
def rng():
    return RngStream(20240601, 0)


def mc_close(samples, target, k=3.0):
    """True when the sample mean is within k standard errors of ``target``."""
    samples = np.asarray(samples, dtype=float)
    se = samples.std(ddof=1) / np.sqrt(samples.size)
    return abs(samples.mean() - target) <= k * se


def chain_close(trace, target, k=3.0):
    """Mean of an autocorrelated trace within k spectral standard errors of target."""
    trace = np.asarray(trace, dtype=float)
    se = math.sqrt(spectrum0_ar(trace) / trace.size)
    return abs(trace.mean() - target) <= k * se


ACCEPTANCE = {}


def record(name, ok, detail=""):
    """Remember an acceptance outcome for the end-of-run summary."""
    ACCEPTANCE[name] = (bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda k: (len(k.split()[0]), k)):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
