import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsderain import kernels


@settings(max_examples=30, deadline=None)
@given(h=st.integers(3, 12), w=st.integers(3, 12), kh=st.integers(1, 3), kw=st.integers(1, 3),
       seed=st.integers(0, 2**31 - 1))
def test_correlate_backends_agree(h, w, kh, kw, seed):
    r = np.random.default_rng(seed)
    img, kern = r.random((h, w, 2)), r.standard_normal((kh, kw))
    a = kernels.correlate_same(img, kern, backend="numba")
    b = kernels.correlate_same(img, kern, backend="numpy")
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_correlate_impulse_response(rng):
    img = np.zeros((7, 7))
    img[3, 3] = 1.0
    kern = rng.standard_normal((3, 3))
    out = kernels.correlate_same(img, kern)
    # correlation flips the kernel around the anchor
    np.testing.assert_allclose(out[2:5, 2:5], kern[::-1, ::-1])


def test_stamp_backends_agree(rng):
    segs = np.column_stack([rng.uniform(-5, 70, (40, 4)), rng.uniform(0.5, 2, 40), rng.uniform(0.1, 1, 40)])
    a, b = np.zeros((64, 64)), np.zeros((64, 64))
    kernels.stamp_segments(a, segs, backend="numba")
    kernels.stamp_segments(b, segs, backend="numpy")
    np.testing.assert_array_equal(a, b)


def test_stamp_horizontal_segment():
    canvas = np.zeros((9, 9))
    kernels.stamp_segments(canvas, np.array([[1.0, 4.0, 7.0, 4.0, 0.5, 0.3]]))
    expected = np.zeros((9, 9))
    expected[4, 1:8] = 0.3
    np.testing.assert_array_equal(canvas, expected)


def test_stamp_composites_by_max():
    canvas = np.zeros((5, 5))
    segs = np.array([[0.0, 2.0, 4.0, 2.0, 0.5, 0.2], [2.0, 0.0, 2.0, 4.0, 0.5, 0.6]])
    kernels.stamp_segments(canvas, segs)
    assert canvas[2, 2] == 0.6 and canvas[2, 0] == 0.2 and canvas[0, 2] == 0.6


def test_em_pass_backends_agree(rng):
    x = np.abs(rng.laplace(0, 0.1, 5000))
    a = kernels.laplace_em_pass(x, 0.3, 0.02, 0.7, 0.2, backend="numba")
    b = kernels.laplace_em_pass(x, 0.3, 0.02, 0.7, 0.2, backend="numpy")
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_em_pass_loglik_oracle(rng):
    x = np.abs(rng.laplace(0, 0.1, 200))
    pi1, s1, pi2, s2 = 0.4, 0.05, 0.6, 0.3
    dens = pi1 / (2 * s1) * np.exp(-x / s1) + pi2 / (2 * s2) * np.exp(-x / s2)
    loglik, r1, r1x, r2x = kernels.laplace_em_pass(x, pi1, s1, pi2, s2)
    assert loglik == pytest.approx(np.log(dens).sum(), rel=1e-12)
    resp = pi1 / (2 * s1) * np.exp(-x / s1) / dens
    assert r1 == pytest.approx(resp.sum(), rel=1e-12)
    assert r1x == pytest.approx((resp * x).sum(), rel=1e-12)
    assert r2x == pytest.approx(((1 - resp) * x).sum(), rel=1e-12)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.correlate_same(np.zeros((4, 4)), np.ones((1, 1)), backend="cuda")


def test_env_flag_selects_numpy():
    code = "from qsderain import _accel, kernels; print(_accel.USE_NUMBA, kernels._pick(None))"
    env = dict(os.environ, QSDERAIN_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "numpy"]
