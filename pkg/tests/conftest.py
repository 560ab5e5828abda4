import math

import numpy as np

from selssm.ssm import SsmParams


def random_params(rng, d, N, K=2, V=5, a_low=-1.0, a_high=0.2, p=None):
    """Random parameters with moderate scales, so scans over T <= 32 stay finite."""
    return SsmParams(
        a_diag=rng.uniform(a_low, a_high, size=(d, N)),
        w_b=rng.normal(size=(N, d)) / math.sqrt(d),
        w_c=rng.normal(size=(N, d)) / math.sqrt(d),
        p=float(rng.normal()) if p is None else p,
        q=rng.normal(size=d) / math.sqrt(d),
        readout=rng.normal(size=(K, d)),
        embedding=rng.normal(size=(V, d)),
    )


def scalar_params(a, w_b=1.0, w_c=1.0, readout=1.0, p=0.0, q=0.0):
    """d = N = K = V = 1 model."""
    return SsmParams(
        a_diag=[[a]], w_b=[[w_b]], w_c=[[w_c]], p=p, q=[q], readout=[[readout]], embedding=[[1.0]]
    )


def restricted_params(s, w=1.0):
    """Scalar model whose unit-step discretized state factor is 1 + s."""
    return scalar_params(math.log1p(s), readout=w)


# acceptance criterion number -> PASS/FAIL line, filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
