import os
import subprocess
import sys

import numpy as np
import pytest

from isokann import _backend, kernels
from isokann.koopman import ShiftScaleParams
from isokann.model import init_model
from isokann.rng import stream_keys
from isokann.sampling import ConstantControl, optimal_control_from_chi
from isokann.sde import catalog_potential

pytestmark = pytest.mark.skipif(not _backend.NUMBA_AVAILABLE, reason="numba not installed")


def both(system, control, n=24, steps=100, seed=2, record=False):
    x0s = np.random.default_rng(seed).uniform(-1.5, 1.5, size=(n, system.dim))
    keys = stream_keys(seed, np.arange(n), 0)
    pc = None if control is None else control.packed(system.dim)
    args = (x0s, keys, 0.01, steps, system.sigma, system.kind, pc)
    return (kernels.simulate_batch(*args, record=record, backend="numba"),
            kernels.simulate_batch(*args, record=record, backend="numpy"))


@pytest.mark.parametrize("name", ["harmonic", "doublewell1d", "doublewell2d", "triplewell2d"])
@pytest.mark.parametrize("ctl", ["zero", "constant", "chi", "chi_td"])
def test_backends_agree(name, ctl):
    s = catalog_potential(name)
    control = None
    if ctl == "constant":
        control = ConstantControl(np.full(s.dim, 0.3))
    elif ctl.startswith("chi"):
        chi = init_model((s.dim, 16, 16, 1), 1)
        control = optimal_control_from_chi(chi, ShiftScaleParams(0.7, 0.1, 1.0), s.sigma,
                                           time_dependent=ctl == "chi_td")
    (e1, w1, f1, st1), (e2, w2, f2, st2) = both(s, control, record=True)
    np.testing.assert_array_equal(f1, f2)
    np.testing.assert_allclose(e1, e2, rtol=1e-9, atol=1e-11)
    np.testing.assert_allclose(w1, w2, rtol=1e-9, atol=1e-11)
    np.testing.assert_allclose(st1, st2, rtol=1e-9, atol=1e-11)
    if control is None:
        assert np.all(w1 == 0.0) and np.all(w2 == 0.0)


def test_divergence_flag_agrees():
    s = catalog_potential("doublewell1d")
    x0s = np.array([[0.0], [30.0], [-0.5]])
    keys = stream_keys(0, np.arange(3), 0)
    a = kernels.simulate_batch(x0s, keys, 0.1, 30, 1.0, s.kind, None, backend="numba")
    b = kernels.simulate_batch(x0s, keys, 0.1, 30, 1.0, s.kind, None, backend="numpy")
    np.testing.assert_array_equal(a[2], b[2])
    assert a[2][1] >= 1 and a[2][0] == -1 and np.isnan(a[0][1, 0])


def test_thread_count_does_not_change_results():
    s = catalog_potential("doublewell1d")
    chi = init_model((1, 16, 16, 1), 1)
    control = optimal_control_from_chi(chi, ShiftScaleParams(0.7, 0.1, 1.0), s.sigma)
    before = _backend.get_threads()
    try:
        _backend.set_threads(1)
        r1 = both(s, control, n=64)[0]
        _backend.set_threads(_backend.numba.config.NUMBA_NUM_THREADS)
        r2 = both(s, control, n=64)[0]
    finally:
        _backend.set_threads(before)
    for a, b in zip(r1[:3], r2[:3]):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("flag,expected", [("numpy", "numpy"), ("numba", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, ISOKANN_BACKEND=flag)
    r = subprocess.run([sys.executable, "-c", "import isokann; print(isokann.BACKEND)"],
                       env=env, capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip() == expected


def test_bad_env_flag_rejected():
    env = dict(os.environ, ISOKANN_BACKEND="cuda")
    r = subprocess.run([sys.executable, "-c", "import isokann"], env=env, capture_output=True, text=True)
    assert r.returncode != 0 and "ISOKANN_BACKEND" in r.stderr
