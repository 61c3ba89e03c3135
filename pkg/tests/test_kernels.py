"""Both kernel backends must agree bit for bit."""
import importlib
import os
import subprocess
import sys

import numpy as np
import pytest

from drstage import kernels
from drstage.kernels import _pykernels as py

cy = pytest.importorskip("drstage.kernels._ckernels", reason="compiled extension not built")


def test_compiled_backend_selected():
    assert kernels.BACKEND == "cython"


def test_env_var_forces_fallback():
    code = "import drstage.kernels as k; print(k.BACKEND)"
    out = subprocess.run(
        [sys.executable, "-c", code], env={**os.environ, "DRSTAGE_PURE_PYTHON": "1"}, capture_output=True, text=True
    )
    assert out.stdout.strip() == "python"


@pytest.mark.parametrize("shape", [(1, 1, 3), (7, 5, 3), (40, 33, 3)])
def test_black_rows(rng, shape):
    for _ in range(20):
        px = rng.uniform(0, 255, size=shape) * (rng.random(shape[:1])[:, None, None] < 0.5)
        assert py.black_row_bounds(px, 10.0) == cy.black_row_bounds(px, 10.0)
    assert cy.black_row_bounds(np.zeros(shape), 10.0) == (0, 0)


@pytest.mark.parametrize("src,dst", [((2, 2), (4, 4)), ((13, 9), (5, 17)), ((60, 60), (518, 518)), ((518, 518), (37, 37))])
def test_resize(rng, src, dst):
    img = rng.uniform(0, 255, size=src + (3,))
    np.testing.assert_array_equal(py.resize_bilinear(img, *dst), cy.resize_bilinear(img, *dst))


def test_hue(rng):
    px = rng.uniform(0, 255, size=(30, 31, 3))
    px[0, :3] = [[10, 10, 10], [0, 0, 0], [255, 0, 255]]
    for shift in (-0.3, -0.02, 0.0, 0.013, 0.49):
        np.testing.assert_array_equal(py.hue_shift(px, shift), cy.hue_shift(px, shift))


def test_rank_sum_counts(rng):
    for _ in range(30):
        n = int(rng.integers(2, 25))
        n1 = int(rng.integers(1, n))
        vals = rng.integers(0, 6, size=n)
        from scipy.stats import rankdata

        doubled = np.rint(2 * rankdata(vals)).astype(np.int64)
        a, b = py.rank_sum_null_counts(doubled, n1), cy.rank_sum_null_counts(doubled, n1)
        np.testing.assert_array_equal(a, b)
        from math import comb

        assert int(a.sum()) == comb(n, n1)


def test_fallback_module_reload(monkeypatch):
    monkeypatch.setenv("DRSTAGE_PURE_PYTHON", "1")
    try:
        mod = importlib.reload(kernels)
        assert mod.BACKEND == "python"
        assert mod.resize_bilinear is py.resize_bilinear
    finally:
        monkeypatch.delenv("DRSTAGE_PURE_PYTHON")
        importlib.reload(kernels)
