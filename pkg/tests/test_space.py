import numpy as np
import pytest

from priorlearn.space import (
    Field,
    Grid,
    MassMatrix,
    inner_product,
    lift_measurements,
    load_field,
    relative_l2_error,
    resample,
    save_field,
)


def test_mass_matrix_integrates_sine_squared():
    grid = Grid(1, 200)
    mass = MassMatrix(grid)
    f = Field(grid, np.sin(np.pi * grid.axis_coords))
    assert inner_product(f, f, mass) == pytest.approx(0.5, abs=1e-4)


def test_mass_matrix_integrates_constant_exactly():
    for dim, n in [(1, 17), (2, 9)]:
        grid = Grid(dim, n)
        mass = MassMatrix(grid)
        one = Field(grid, np.ones(grid.n_nodes))
        assert inner_product(one, one, mass) == pytest.approx(1.0, abs=1e-12)


def test_mass_matrix_2d_integrates_product():
    grid = Grid(2, 60)
    mass = MassMatrix(grid)
    c = grid.coords()
    f = Field(grid, np.sin(np.pi * c[:, 0]) * np.sin(np.pi * c[:, 1]))
    assert inner_product(f, f, mass) == pytest.approx(0.25, abs=1e-3)


def test_lumped_mass_row_sums_match_consistent():
    grid = Grid(2, 7)
    cons = MassMatrix(grid).matrix.toarray()
    lump = MassMatrix(grid, lumped=True).matrix.toarray()
    np.testing.assert_allclose(np.diag(cons.sum(axis=1)), lump, atol=1e-14)


def test_lift_adjoint_identity():
    rng = np.random.default_rng(7)
    grid = Grid(1, 40)
    mass = MassMatrix(grid)
    s_op = rng.standard_normal((5, grid.n_nodes))
    for _ in range(100):
        u = Field(grid, rng.standard_normal(grid.n_nodes))
        d = rng.standard_normal(5)
        lifted = lift_measurements(d, s_op, mass)
        lhs = float((s_op @ u.values) @ d)
        rhs = inner_product(u, lifted, mass)
        assert abs(lhs - rhs) < 1e-10


def test_resample_exact_on_linear_functions():
    src = Grid(2, 13)
    tgt = Grid(2, 31)
    c = src.coords()
    f = Field(src, 2.0 * c[:, 0] - 3.0 * c[:, 1] + 0.5)
    g = resample(f, tgt)
    ct = tgt.coords()
    np.testing.assert_allclose(
        g.values, 2.0 * ct[:, 0] - 3.0 * ct[:, 1] + 0.5, atol=1e-12
    )


def test_resample_round_trip_on_nested_grids():
    src = Grid(1, 11)
    fine = Grid(1, 21)  # nodes of src are a subset of fine
    rng = np.random.default_rng(0)
    f = Field(src, rng.standard_normal(src.n_nodes))
    back = resample(resample(f, fine), src)
    np.testing.assert_allclose(back.values, f.values, atol=1e-12)


def test_relative_l2_error_scaling():
    grid = Grid(1, 50)
    mass = MassMatrix(grid)
    t = Field(grid, np.sin(np.pi * grid.axis_coords) + 1.0)
    e = Field(grid, 1.5 * t.values)
    assert relative_l2_error(e, t, mass) == pytest.approx(0.5, abs=1e-12)
    assert relative_l2_error(t, t, mass) == 0.0


def test_field_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    for dim, n in [(1, 33), (2, 9)]:
        grid = Grid(dim, n)
        f = Field(grid, rng.standard_normal(grid.n_nodes))
        path = str(tmp_path / f"field{dim}.bin")
        save_field(f, path)
        g = load_field(path)
        assert g.grid == grid
        np.testing.assert_array_equal(g.values, f.values)
