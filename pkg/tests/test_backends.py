import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import random_instance
from srot import _simplex_py, solvers

_simplex = pytest.importorskip("srot._simplex")


class TestSimplexBackends:
    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("shape", [(1, 1), (3, 7), (12, 12), (25, 18)])
    def test_same_output(self, seed, shape):
        a, b, C = random_instance(np.random.default_rng(seed), *shape, uniform=seed % 2 == 0)
        C = C / C.max()
        py = _simplex_py.network_simplex(a, b, C, 10_000_000)
        cy = _simplex.network_simplex(a, b, C, 10_000_000)
        np.testing.assert_array_equal(py[0], cy[0])
        np.testing.assert_allclose(py[1], cy[1], atol=1e-12)
        np.testing.assert_allclose(py[2], cy[2], atol=1e-12)
        assert py[3:] == cy[3:]

    def test_degenerate_costs(self):
        # all costs equal: every feasible plan is optimal, ties must break identically
        a = b = np.full(6, 1 / 6)
        C = np.ones((6, 6))
        py = _simplex_py.network_simplex(a, b, C, 10_000_000)
        cy = _simplex.network_simplex(a, b, C, 10_000_000)
        np.testing.assert_array_equal(py[0], cy[0])

    def test_pivot_limit(self):
        a, b, C = random_instance(np.random.default_rng(0), 10, 10)
        assert _simplex_py.network_simplex(a, b, C, 1)[4] == 1
        assert _simplex.network_simplex(a, b, C, 1)[4] == 1

    def test_default_backend(self):
        assert solvers.SIMPLEX_BACKEND in ("cython", "python")

    def test_env_forces_python(self):
        env = dict(os.environ, SROT_PURE_PYTHON="1")
        out = subprocess.run([sys.executable, "-c", "import srot.solvers as s; print(s.SIMPLEX_BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "python"
