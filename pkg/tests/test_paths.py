import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fbdsde.paths import (BrownianEnsemble, ItoDecomposition, ProcessPath, TimeGrid, atomic_write, backward_ito_integral,
                          coarsen, forward_ito_integral, generate_ensemble, generate_nested_ensemble,
                          verify_ito_formula)


def test_grid_basics():
    g = TimeGrid(0.0, 1.0, 4)
    assert g.dt == 0.25
    np.testing.assert_allclose(g.times, [0, 0.25, 0.5, 0.75, 1.0])
    assert g.index_of(0.5) == 2
    assert g.tail(2) == TimeGrid(0.5, 1.0, 2)
    with pytest.raises(ValueError):
        g.index_of(0.3)


@pytest.mark.parametrize("args", [(1.0, 1.0, 5), (0.0, 1.0, 0), (0.0, math.inf, 5), (0.0, 1.0, 2.5)])
def test_grid_rejects_degenerate(args):
    with pytest.raises(ValueError):
        TimeGrid(*args)


def test_nested_ensemble_shares_b_within_scenario():
    ens = generate_nested_ensemble(TimeGrid(0, 1, 10), 3, 5, seed=1)
    dB = ens.nested(ens.dB)
    assert dB.shape == (3, 5, 10)
    assert np.all(dB == dB[:, :1, :])
    assert not np.allclose(dB[0, 0], dB[1, 0])
    # W paths inside a scenario are distinct
    assert len({tuple(r) for r in ens.dW[:5]}) == 5


def test_flat_ensemble_has_independent_b():
    ens = generate_ensemble(TimeGrid(0, 1, 4), 7, seed=2)
    assert ens.n_inner == 1 and ens.n_outer == 7
    assert len({tuple(r) for r in ens.dB}) == 7


def test_increments_are_read_only():
    ens = generate_nested_ensemble(TimeGrid(0, 1, 4), 2, 2, seed=0)
    with pytest.raises(ValueError):
        ens.dW[0, 0] = 1.0


@given(seed=st.integers(0, 2 ** 64 - 1), threads=st.sampled_from([2, 3, 8]))
def test_generation_independent_of_threads(seed, threads):
    g = TimeGrid(0, 1, 6)
    a = generate_nested_ensemble(g, 4, 3, seed)
    b = generate_nested_ensemble(g, 4, 3, seed, threads=threads)
    assert np.array_equal(a.dW, b.dW) and np.array_equal(a.dB, b.dB)
    fa, fb = generate_ensemble(g, 9000, seed), generate_ensemble(g, 9000, seed, threads=threads)
    assert np.array_equal(fa.dW, fb.dW)


def test_seed_validation():
    g = TimeGrid(0, 1, 2)
    for bad in (-1, 2 ** 64):
        with pytest.raises(ValueError):
            generate_nested_ensemble(g, 1, 1, bad)
    with pytest.raises(ValueError):
        generate_nested_ensemble(g, 0, 1, 0)
    with pytest.raises(ValueError):
        generate_ensemble(g, 0, 0)


def test_moments_of_increments():
    g = TimeGrid(0, 2.0, 20)
    ens = generate_ensemble(g, 20000, seed=5)
    for d in (ens.dW, ens.dB):
        assert abs(d.mean()) < 4 * math.sqrt(g.dt / d.size)
        assert abs(d.var() / g.dt - 1) < 4 * math.sqrt(2 / d.size)
    # independence of the two motions
    assert abs(np.mean(ens.W[:, -1] * ens.B[:, -1])) < 4 * g.T / math.sqrt(ens.n_paths)


def test_tail_and_coarsen_preserve_paths():
    ens = generate_nested_ensemble(TimeGrid(0, 1, 8), 2, 3, seed=4)
    t = ens.tail(3)
    assert t.grid == TimeGrid(0.375, 1.0, 5)
    np.testing.assert_array_equal(t.dW, ens.dW[:, 3:])
    c = coarsen(ens, 4)
    np.testing.assert_allclose(c.W[:, -1], ens.W[:, -1])
    np.testing.assert_allclose(c.B[:, 1], ens.B[:, 4])
    with pytest.raises(ValueError):
        coarsen(ens, 3)


def test_ito_integrals_conventions():
    g = TimeGrid(0, 1, 5)
    ens = generate_nested_ensemble(g, 2, 2, seed=3)
    W, B = ProcessPath(g, ens.W), ProcessPath(g, ens.B)
    fw = forward_ito_integral(W, ens).values
    # left endpoint: int W dW = (W^2 - sum dW^2) / 2 exactly
    np.testing.assert_allclose(fw[:, -1], 0.5 * (ens.W[:, -1] ** 2 - np.sum(ens.dW ** 2, axis=1)))
    bw = backward_ito_integral(B, ens).values
    assert np.all(bw[:, -1] == 0)
    # right endpoint on [0, T]: sum B_{k+1} dB_k = (B_T^2 + sum dB^2) / 2
    np.testing.assert_allclose(bw[:, 0], 0.5 * (ens.B[:, -1] ** 2 + np.sum(ens.dB ** 2, axis=1)))


def test_ito_integral_mismatch():
    ens = generate_nested_ensemble(TimeGrid(0, 1, 5), 1, 2, seed=0)
    with pytest.raises(ValueError):
        forward_ito_integral(ProcessPath.constant(TimeGrid(0, 1, 4), 2, 1.0), ens)


def test_process_path_validation():
    g = TimeGrid(0, 1, 2)
    with pytest.raises(ValueError):
        ProcessPath(g, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        ProcessPath(g, np.full((1, 3), np.nan))
    assert ProcessPath.constant(g, 3, 2.0).m2_norm() == pytest.approx(2.0)


def _constant_dec(g, P, beta, gamma, delta, a0=0.0):
    return ItoDecomposition(a0, ProcessPath.constant(g, P, beta), ProcessPath.constant(g, P, gamma),
                            ProcessPath.constant(g, P, delta))


@given(beta=st.floats(-2, 2), gamma=st.floats(-2, 2), delta=st.floats(-2, 2), a0=st.floats(-1, 1))
def test_ito_residual_for_constant_coefficients(beta, gamma, delta, a0):
    # constant coefficients: the residual is the discretized quadratic variation minus its limit
    g = TimeGrid(0, 1, 16)
    ens = generate_ensemble(g, 64, seed=1)
    rep = verify_ito_formula(_constant_dec(g, 64, beta, gamma, delta, a0), ens)
    dt, dW, dB = g.dt, ens.dW, ens.dB
    step = beta ** 2 * dt ** 2 + 2 * beta * delta * dt * dW + delta ** 2 * (dW ** 2 - dt) - gamma ** 2 * (dB ** 2 - dt)
    np.testing.assert_allclose(rep.pathwise_residual[:, 1:], np.cumsum(step, axis=1), atol=1e-9)
    assert np.all(rep.pathwise_residual[:, 0] == 0)


def test_ito_alpha_w_residual_shrinks_with_dt():
    fine = generate_ensemble(TimeGrid(0, 1, 64), 4000, seed=9)
    ms = []
    for f in (4, 2, 1):
        ens = coarsen(fine, f) if f > 1 else fine
        ms.append(verify_ito_formula(_constant_dec(ens.grid, ens.n_paths, 0, 0, 1), ens).mean_square_residual)
    assert ms[1] / ms[0] == pytest.approx(0.5, abs=0.15)
    assert ms[2] / ms[1] == pytest.approx(0.5, abs=0.15)


def test_ito_shape_checks():
    g = TimeGrid(0, 1, 4)
    with pytest.raises(ValueError):
        ItoDecomposition(0.0, ProcessPath.constant(g, 2, 0), ProcessPath.constant(g, 3, 0),
                         ProcessPath.constant(g, 2, 0))


def test_csv_and_binary_dumps(tmp_path):
    ens = generate_nested_ensemble(TimeGrid(0, 1, 3), 2, 2, seed=0)
    ens.to_csv(tmp_path / "inc.csv")
    lines = (tmp_path / "inc.csv").read_text().splitlines()
    assert lines[0] == "scenario,path,step,dW,dB" and len(lines) == 1 + 4 * 3
    assert float(lines[1].split(",")[3]) == ens.dW[0, 0]
    ens.to_binary(tmp_path / "inc.bin")
    raw = np.fromfile(tmp_path / "inc.bin", dtype="<f8")
    np.testing.assert_array_equal(raw[:12], ens.dW.ravel())
    assert not list(tmp_path.glob(".*tmp"))


def test_atomic_write_keeps_old_file_on_failure(tmp_path):
    target = tmp_path / "report.json"
    atomic_write(target, "old")
    with pytest.raises(TypeError):
        atomic_write(target, 12345)  # not text or bytes
    assert target.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["report.json"]


def test_ensemble_shape_validation():
    g = TimeGrid(0, 1, 2)
    with pytest.raises(ValueError):
        BrownianEnsemble(g, np.zeros((2, 2)), np.zeros((3, 2)), 0, 2, 1)
