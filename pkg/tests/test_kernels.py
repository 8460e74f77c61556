import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from looc import _kernels_py as py
from looc import kernels

cy = pytest.importorskip("looc._kernels", reason="compiled extension not built")


def _case(seed, rows=7, cols=5):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(rows, cols)) * 5
    p = py.softmax_rows(z, 1.0)
    p[0, 0] = 0.0
    p[0] /= p[0].sum()
    return z, p, rng.normal(size=(rows, cols)), rng.normal(size=rows)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1000.0))
def test_softmax_twins_agree(seed, t):
    z, p, g, _ = _case(seed)
    np.testing.assert_allclose(cy.softmax_rows(z, t), py.softmax_rows(z, t), rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(
        cy.softmax_rows_backward(p, g, t), py.softmax_rows_backward(p, g, t), rtol=1e-12, atol=1e-15
    )


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_entropy_twins_agree(seed):
    _, p, _, gh = _case(seed)
    np.testing.assert_allclose(cy.entropy_rows(p, 1e-12), py.entropy_rows(p, 1e-12), rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(
        cy.entropy_rows_backward(p, gh, 1e-12), py.entropy_rows_backward(p, gh, 1e-12), rtol=1e-13, atol=1e-15
    )


@settings(max_examples=100)
@given(st.lists(st.integers(0, 5), max_size=40), st.integers(0, 2**32 - 1))
def test_threshold_counts_twins_agree(raw, seed):
    scores = np.sort(np.asarray(raw, dtype=np.float64))[::-1].copy()
    pos = np.random.default_rng(seed).random(scores.size) < 0.5
    for a, b in zip(cy.threshold_counts(scores, pos), py.threshold_counts(scores, pos)):
        np.testing.assert_array_equal(a, b)


def test_threshold_counts_groups_ties():
    tp, fp = py.threshold_counts(np.array([3.0, 2.0, 2.0, 1.0]), np.array([True, True, False, False]))
    np.testing.assert_array_equal(tp, [0, 1, 2, 2])
    np.testing.assert_array_equal(fp, [0, 0, 1, 2])


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("flag,expected", [("1", "python"), ("0", "cython")])
def test_env_forces_fallback(flag, expected):
    env = dict(os.environ, LOOC_PURE_PYTHON=flag)
    out = subprocess.run(
        [sys.executable, "-c", "import looc; print(looc.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == expected
