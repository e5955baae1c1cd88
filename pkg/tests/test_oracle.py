import logging
import math
from pathlib import Path

import numpy as np
import pytest

from isokann.errors import DegeneracyError
from isokann.io import read_csv
from isokann.oracle import (build_generator, dense_subdominant, generator_spectrum, oracle_chi,
                            ou_analytics, propagate)
from isokann.sde import catalog_potential

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def harmonic_op():
    return build_generator(catalog_potential("harmonic"), bounds=[(-6, 6)], n_nodes=400)


@pytest.fixture(scope="module")
def dw_op():
    return build_generator(catalog_potential("doublewell1d"))


def test_flat_potential_gives_laplacian_stencil():
    op = build_generator(catalog_potential("flat", sigma=math.sqrt(2)), n_nodes=60)
    h = op.h[0]
    for i in range(1, 59):
        row = op.L[i] * h * h
        assert row[i - 1] == pytest.approx(1.0) and row[i] == pytest.approx(-2.0)
        assert row[i + 1] == pytest.approx(1.0)
        assert np.count_nonzero(row) == 3


@pytest.mark.parametrize("name", ["harmonic", "doublewell1d", "doublewell2d", "triplewell2d"])
@pytest.mark.parametrize("upwind", [False, True])
def test_row_sums_vanish(name, upwind):
    s = catalog_potential(name)
    op = build_generator(s, n_nodes=50 if s.dim == 2 else 200, upwind=upwind)
    scale = s.sigma ** 2 / min(op.h) ** 2
    assert np.max(np.abs(op.L.sum(axis=1))) <= 1e-8 * scale
    assert np.max(np.abs(op.L @ np.ones(op.n))) <= 1e-8 * scale


def test_upwind_off_diagonals_non_negative():
    op = build_generator(catalog_potential("doublewell2d"), n_nodes=50, upwind=True)
    off = op.L - np.diag(np.diag(op.L))
    assert off.min() >= 0.0


def test_harmonic_generator_spectrum(harmonic_op):
    ev = generator_spectrum(harmonic_op, 3)
    assert ev[0] == pytest.approx(0.0, abs=1e-8)
    assert ev[1] == pytest.approx(-1.0, rel=0.02)


def test_build_generator_checks():
    s = catalog_potential("doublewell1d")
    with pytest.raises(ValueError):
        build_generator(s, n_nodes=49)
    with pytest.raises(ValueError):
        build_generator(catalog_potential("doublewell2d"), n_nodes=(60, 40))


def test_tight_bounds_warn(caplog):
    with caplog.at_level(logging.WARNING):
        build_generator(catalog_potential("doublewell1d"), bounds=[(-0.5, 2.5)], n_nodes=60)
    assert "boundary" in caplog.text


def test_propagate_constant_and_identity(dw_op):
    ones = np.ones(dw_op.n)
    np.testing.assert_allclose(propagate(dw_op, ones, 1.0), 1.0, atol=1e-8)
    f = np.sin(dw_op.points[:, 0])
    np.testing.assert_array_equal(propagate(dw_op, f, 0.0), f)
    np.testing.assert_array_equal(propagate(dw_op, f, 1.0, n_substeps=0), f)
    with pytest.raises(ValueError):
        propagate(dw_op, f, 1.0, n_substeps=5)


def test_propagate_harmonic_linear(harmonic_op):
    x = harmonic_op.points[:, 0]
    out = propagate(harmonic_op, x, 1.0)
    inner = np.abs(x) <= 3
    rel = np.abs(out[inner] - math.exp(-1) * x[inner]) / np.maximum(np.abs(x[inner]), 0.5)
    assert rel.max() < 0.01


def test_oracle_harmonic(harmonic_op):
    chi, p = oracle_chi(harmonic_op, 1.0)
    assert p.a == pytest.approx(math.exp(-1), rel=0.02)
    assert 0 <= chi.min() and chi.max() <= 1
    assert -math.log(p.a) == pytest.approx(1.0, rel=0.05)


def test_oracle_doublewell_reference_dataset(dw_op):
    chi, p = oracle_chi(dw_op, 1.0)
    header, rows = read_csv(DATA / "doublewell1d_oracle.csv")
    assert header == ["x", "chi_ref", "a", "b"]
    ref = np.array(rows, dtype=float)
    np.testing.assert_allclose(ref[:, 0], dw_op.points[:, 0], rtol=0, atol=1e-14)
    np.testing.assert_allclose(chi, ref[:, 1], atol=1e-8)
    assert p.a == pytest.approx(ref[0, 2], rel=1e-9)
    assert p.a == pytest.approx(dense_subdominant(dw_op, 1.0), rel=0.01)


@pytest.mark.parametrize("name", ["harmonic", "doublewell1d"])
def test_self_consistency_with_dense_eigenvalue(name):
    op = build_generator(catalog_potential(name))
    _, p = oracle_chi(op, 1.0)
    assert p.a == pytest.approx(dense_subdominant(op, 1.0), rel=0.01)


def test_fixed_point(dw_op):
    chi, _ = oracle_chi(dw_op, 1.0, tol=1e-10)
    again, _ = oracle_chi(dw_op, 1.0, tol=1e-10, max_iters=1, f0=chi)
    assert np.max(np.abs(again - chi)) < 1e-10


def test_grid_refinement():
    s = catalog_potential("doublewell1d")
    a200 = oracle_chi(build_generator(s, n_nodes=200), 1.0)[1].a
    a400 = oracle_chi(build_generator(s, n_nodes=400), 1.0)[1].a
    assert abs(a200 - a400) / a400 < 0.01


def test_flat_potential_is_degenerate():
    with pytest.raises(DegeneracyError):
        oracle_chi(build_generator(catalog_potential("flat"), n_nodes=60), 1.0)


def test_oracle_2d_smoke():
    op = build_generator(catalog_potential("doublewell2d"), n_nodes=50)
    chi, p = oracle_chi(op, 1.0, n_substeps=20)
    assert 0 < p.a < 1
    x = op.points
    # chi separates the two wells along x
    left = chi[np.argmin(np.sum((x - [-1, 0]) ** 2, axis=1))]
    right = chi[np.argmin(np.sum((x - [1, 0]) ** 2, axis=1))]
    assert abs(left - right) > 0.8


def test_ou_analytics():
    assert ou_analytics(2.5, 0.0, 1.3) == (2.5, 0.0)
    mean, var = ou_analytics(1.0, 1.0, math.sqrt(2))
    assert mean == pytest.approx(0.36788, abs=1e-5)
    assert var == pytest.approx(1 - math.exp(-2), rel=1e-12) and var == pytest.approx(0.86466, abs=1e-5)
    mean, var = ou_analytics(3.0, 60.0, 0.7)
    assert mean == pytest.approx(0.0, abs=1e-20) and var == pytest.approx(0.245)
    np.testing.assert_allclose(ou_analytics(np.array([1.0, 2.0]), 1.0, 1.0)[0],
                               np.array([1.0, 2.0]) * math.exp(-1))
    with pytest.raises(ValueError):
        ou_analytics(1.0, -1.0, 1.0)
