import os
import subprocess
import sys

import numpy as np
import pytest

from ecvt import _kernels as k

needs_numba = pytest.mark.skipif(not k.HAVE_NUMBA, reason="numba not installed")


def _intervals(r, n):
    s = r.uniform(0, 30, n)
    return np.stack([s, s + r.uniform(0.2, 8, n)], axis=1)


@needs_numba
@pytest.mark.parametrize("seed", range(20))
def test_backends_agree(seed):
    r = np.random.default_rng(seed)
    a, b = _intervals(r, 7), _intervals(r, 5)
    np.testing.assert_allclose(k._tiou_matrix_nb_wrapped(a, b), k.tiou_matrix_np(a, b), atol=1e-15)

    labels = r.integers(1, 3, 7)
    order = np.argsort(-r.uniform(size=7), kind="stable")
    np.testing.assert_array_equal(k.nms_nb(a, labels, order, 0.4), k.nms_np(a, labels, order, 0.4))

    pv, gv = r.integers(0, 2, 7), r.integers(0, 2, 5)
    tp_np = k.greedy_match_np(a, pv, b, gv, 0.3)
    np.testing.assert_array_equal(k.greedy_match_nb(a, pv, b, gv, 0.3), tp_np)
    assert k.interpolated_ap_nb(tp_np, 5) == pytest.approx(k.interpolated_ap_np(tp_np, 5), abs=1e-15)


def test_nms_suppresses_same_label_only():
    iv = np.array([[0.0, 10.0], [0.0, 10.0], [0.5, 10.0]])
    keep = k.nms_np(iv, np.array([1, 1, 2]), np.array([0, 1, 2]), 0.5)
    assert keep.tolist() == [0, 2]


def test_disable_flag_selects_numpy_path():
    env = dict(os.environ, ECVT_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from ecvt import _kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
