import os
import subprocess
import sys

import numpy as np
import pytest

from hkd import _lstm_py, kernels
from hkd.autodiff import ShapeError, row_stable_matmul

needs_compiled = pytest.mark.skipif(not kernels.compiled_available(), reason="compiled extension not built")


def _inputs(rng, B=3, T=5, D=4, H=6, dtype=np.float64):
    x = rng.normal(size=(B, T, D)).astype(dtype)
    w_ih = (rng.normal(size=(D, 4 * H)) * 0.5).astype(dtype)
    w_hh = (rng.normal(size=(H, 4 * H)) * 0.5).astype(dtype)
    b = (rng.normal(size=4 * H) * 0.1).astype(dtype)
    return x, w_ih, w_hh, b


def _run(backend, args, gh):
    kernels.use_backend(backend)
    try:
        h, cache = kernels.lstm_forward(*args)
        grads = kernels.lstm_backward(gh, args[0], args[1], args[2], cache)
    finally:
        kernels.use_backend("cython" if kernels.compiled_available() else "python")
    return h, grads


@needs_compiled
class TestBackendParity:
    @pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 2e-5)])
    @pytest.mark.parametrize("seed", range(3))
    def test_forward_and_backward_agree(self, dtype, tol, seed):
        rng = np.random.default_rng(seed)
        args = _inputs(rng, dtype=dtype)
        gh = rng.normal(size=(3, 5, 6)).astype(dtype)
        h_py, g_py = _run("python", args, gh)
        h_cy, g_cy = _run("cython", args, gh)
        assert h_cy.dtype == h_py.dtype == dtype
        np.testing.assert_allclose(h_cy, h_py, rtol=tol, atol=tol)
        for a, b in zip(g_cy, g_py):
            np.testing.assert_allclose(a, b, rtol=tol, atol=tol)

    def test_single_step_and_single_row(self):
        rng = np.random.default_rng(9)
        args = _inputs(rng, B=1, T=1)
        gh = rng.normal(size=(1, 1, 6))
        h_py, _ = _run("python", args, gh)
        h_cy, _ = _run("cython", args, gh)
        np.testing.assert_allclose(h_cy, h_py, atol=1e-12)


class TestPythonReference:
    def test_one_cell_by_hand(self):
        # H = 1, D = 1, all weights zero except the cell gate input weight.
        x = np.array([[[2.0]]])
        w_ih = np.array([[0.0, 0.0, 1.0, 0.0]])
        w_hh = np.zeros((1, 4))
        b = np.zeros(4)
        kernels.use_backend("python")
        try:
            h, _ = kernels.lstm_forward(x, w_ih, w_hh, b)
        finally:
            kernels.use_backend("cython" if kernels.compiled_available() else "python")
        # i = f = o = 0.5, g = tanh 2, c = 0.5 tanh 2, h = 0.5 tanh c
        c = 0.5 * np.tanh(2.0)
        assert h[0, 0, 0] == pytest.approx(0.5 * np.tanh(c), abs=1e-15)

    def test_gate_activations_in_range(self):
        rng = np.random.default_rng(1)
        x, w_ih, w_hh, b = _inputs(rng)
        xp = x @ w_ih + b
        _, _, gates, _ = _lstm_py.recur_forward(xp, w_hh)
        H = 6
        sig = np.concatenate([gates[..., : 2 * H], gates[..., 3 * H :]], axis=-1)
        assert (sig > 0).all() and (sig < 1).all()
        assert (np.abs(gates[..., 2 * H : 3 * H]) < 1).all()

    def test_shape_errors(self):
        rng = np.random.default_rng(2)
        x, w_ih, w_hh, b = _inputs(rng)
        with pytest.raises(ShapeError):
            kernels.lstm_forward(x[0], w_ih, w_hh, b)
        with pytest.raises(ShapeError):
            kernels.lstm_forward(x, w_ih, w_hh, b[:-1])

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            kernels.use_backend("fortran")


class TestRowStableMatmul:
    def test_single_row_matches_row_of_batch(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(7, 33))
        w = rng.normal(size=(33, 40))
        full = row_stable_matmul(a, w)
        for i in range(7):
            assert row_stable_matmul(a[i : i + 1], w).tobytes() == full[i : i + 1].tobytes()

    def test_leading_axes(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(2, 3, 5))
        w = rng.normal(size=(5, 4))
        np.testing.assert_allclose(row_stable_matmul(a, w), a @ w, atol=1e-13)


def test_env_var_forces_fallback():
    code = "import hkd.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, HKD_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_compiled
def test_default_backend_is_compiled():
    code = "import hkd.kernels as k; print(k.BACKEND)"
    env = {k: v for k, v in os.environ.items() if k != "HKD_PURE_PYTHON"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "cython"
