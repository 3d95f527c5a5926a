"""Shared oracles for the test-suite: central finite differences and relative error."""

from __future__ import annotations

import numpy as np
import pytest

from smac_lab.diffcore import ParamStore


def fd_grad(fn, store: ParamStore, eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of scalar ``fn(store)`` w.r.t. every entry of ``store``."""
    grads = {}
    for name in store.names():
        base = store[name].copy()
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += eps
            minus[idx] -= eps
            store[name] = plus
            f_plus = fn(store)
            store[name] = minus
            f_minus = fn(store)
            g[idx] = (f_plus - f_minus) / (2.0 * eps)
        store[name] = base
        grads[name] = g
    return grads


def rel_error(a: dict, b: dict) -> float:
    """max |a - b| / max(|a|, |b|, 1e-8) over the concatenated gradient vectors."""
    x = np.concatenate([np.ravel(a[k]) for k in sorted(a)])
    y = np.concatenate([np.ravel(b[k]) for k in sorted(a)])
    return float(np.max(np.abs(x - y)) / max(np.max(np.abs(x)), np.max(np.abs(y)), 1e-8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance report


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def report_criterion(request):
    """Record one pass/fail line per acceptance criterion; all lines are repeated in the summary."""

    def report(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.acceptance_lines.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
