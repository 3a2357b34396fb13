import os

# one BLAS thread keeps reductions bit-reproducible across runs
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from upmixflow.tensor import Tape, Tensor, backward, numerical_grad


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    mask = ~np.isnan(b)
    a, b = a[mask], b[mask]
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_grads(build, tensors, h=1e-5, max_entries=None, rng=None, floor=1e-8):
    """Max normwise relative error between tape gradients and central differences.

    ``build`` maps the (live) tensors to a scalar loss Tensor.  ``floor`` bounds
    the per-tensor denominator from below, for tensors whose true gradient is 0.
    """
    with Tape() as tape:
        loss = build()
    grads = backward(loss, tape, wrt=tensors)
    worst = 0.0
    for name, t in tensors.items():
        index = None
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(t.size, size=max_entries, replace=False)
            index = [np.unravel_index(i, t.shape) for i in flat]
        num = numerical_grad(lambda: float(build().data), t.data, h=h, index=index)
        worst = max(worst, rel_err(grads[name].data, num, floor))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
