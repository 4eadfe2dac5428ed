import math

import numpy as np
import pytest

from panelflow.dynamics import ModelParams
from panelflow.plate_core import PlateState, bending_norm_sq, grad_norm_sq, l2_norm
from panelflow.stationary import (
    EquilibriaSet,
    FlowBox,
    StationaryPair,
    buckled_seed,
    buckling_load,
    buckling_modes,
    continuation,
    distance_to_equilibria,
    find_equilibria,
    linear_plate_solve,
    neumann_data,
    newton_tolerance,
    potential_D,
    read_box_field,
    solve_halfspace_neumann,
    solve_stationary,
    solve_stationary_flow,
    stationary_residual,
    write_box_field,
)

from .conftest import clamped_bump

BOX = FlowBox(a=2.0, zmax=2.0, m1=41, m2=41, m3=21)


class TestResidual:
    def test_zero_state_zero_load(self, grid15):
        r = stationary_residual(np.zeros(grid15.shape), ModelParams(U=0.4, b=3.0), grid15)
        assert np.abs(r).max() == 0.0

    def test_zero_state_returns_minus_load(self, grid15):
        p0 = clamped_bump(grid15) + 0.5
        r = stationary_residual(np.zeros(grid15.shape), ModelParams(U=0.4, p0=p0), grid15)
        np.testing.assert_array_equal(r, -p0)


class TestNewton:
    def test_trivial_unloaded_plate(self, grid15):
        pair = solve_stationary(ModelParams(flow_coupling=False), np.zeros(grid15.shape), grid15)
        assert pair.converged and pair.iterations <= 1
        assert np.abs(pair.u_hat).max() == 0.0

    def test_matches_linear_solve(self, grid15):
        # U = 0 still carries a nonzero frozen memory operator, so the
        # pure linear plate is the uncoupled one
        params = ModelParams(p0=0.1, flow_coupling=False)
        pair = solve_stationary(params, np.zeros(grid15.shape), grid15)
        assert np.abs(pair.u_hat - linear_plate_solve(0.1, grid15)).max() <= 1e-10

    def test_residual_of_solution(self, grid15):
        params = ModelParams(U=0.3, k=2.0, p0=0.5)
        pair = solve_stationary(params, np.zeros(grid15.shape), grid15)
        assert pair.converged
        tol = 1e-8 * (1 + l2_norm(params.pressure(grid15), grid15))
        assert np.abs(stationary_residual(pair.u_hat, params, grid15)).max() <= tol
        assert newton_tolerance(params, grid15) == pytest.approx(tol)

    def test_buckled_state(self, grid15):
        b = buckling_load(grid15) + 20.0
        params = ModelParams(b=b, flow_coupling=False)
        bump = clamped_bump(grid15)
        guess = bump * math.sqrt(10.0 / grad_norm_sq(bump, grid15))
        pair = solve_stationary(params, guess, grid15)
        assert pair.converged
        g2 = grad_norm_sq(pair.u_hat, grid15)
        assert 0 < g2 < b
        assert g2 == pytest.approx(20.0, rel=1e-6)

    def test_iteration_cap_reports_failure(self, grid15):
        params = ModelParams(U=0.3, p0=50.0, b=200.0)
        pair = solve_stationary(params, clamped_bump(grid15), grid15, max_iter=1)
        assert not pair.converged and pair.status in {"max_iter", "singular"}


class TestBuckling:
    def test_eigenpair(self, grid15):
        vals, modes = buckling_modes(grid15, 2)
        phi = modes[0].ravel()
        A, L = grid15.bilaplacian_matrix, grid15.laplacian_matrix
        np.testing.assert_allclose(A @ phi, vals[0] * (-(L @ phi)), atol=1e-8 * np.abs(A @ phi).max())
        assert vals[0] < vals[1]
        # continuum clamped-square value is about 52.3
        assert 45 < vals[0] < 56

    def test_seeds(self, grid15):
        lam = buckling_load(grid15)
        assert buckled_seed(grid15, lam - 1) == []
        plus, minus = buckled_seed(grid15, lam + 4)
        assert grad_norm_sq(plus, grid15) == pytest.approx(4.0)
        np.testing.assert_array_equal(minus, -plus)


class TestContinuation:
    def test_subcritical_single_trivial_branch(self, grid15):
        lam = buckling_load(grid15)
        sets = continuation(ModelParams(U=0.0, flow_coupling=False), ("b", np.linspace(-10, 0.9 * lam, 4)), grid15)
        assert [len(s) for s in sets] == [1, 1, 1, 1]
        assert all(np.abs(s.members[0].u_hat).max() == 0.0 for s in sets)

    def test_branches_appear_past_buckling(self, grid15):
        lam = buckling_load(grid15)
        sets = continuation(ModelParams(U=0.0, flow_coupling=False), ("b", [0.5 * lam, 0.9 * lam, 1.1 * lam, 1.5 * lam]),
                            grid15)
        counts = [len(s) for s in sets]
        assert counts[0] == 1 and counts[-1] >= 3
        assert {m.label for m in sets[-1].members} >= {"trivial", "plus", "minus"}

    def test_flow_sweep_is_continuous(self, grid15):
        params = ModelParams(b=buckling_load(grid15) + 20.0)
        values = np.linspace(0.0, 0.8, 9)
        sets = continuation(params, ("U", values), grid15)
        step = values[1] - values[0]
        for a, b in zip(sets, sets[1:]):
            assert len(b) >= 1
            for m in a.members:
                jump = min(np.abs(m.u_hat - n.u_hat).max() for n in b.members)
                assert jump <= 10 * step

    def test_non_monotone_sweep_rejected(self, grid15):
        with pytest.raises(ValueError):
            continuation(ModelParams(), ("b", [0, 2, 1]), grid15)

    def test_unknown_parameter(self, grid15):
        with pytest.raises(ValueError):
            continuation(ModelParams(), ("k", [0, 1]), grid15)


class TestDistance:
    def test_member_at_rest(self, grid15):
        members = [np.zeros(grid15.shape), clamped_bump(grid15), -clamped_bump(grid15)]
        d, j = distance_to_equilibria(PlateState(members[2], np.zeros(grid15.shape)), members, grid15)
        assert d == 0.0 and j == 2

    def test_norm_bounds(self, grid15):
        base = clamped_bump(grid15)
        e = clamped_bump(grid15, 3)
        delta = 1e-3
        eset = EquilibriaSet("b", 0.0, [StationaryPair(u_hat=base)])
        d, _ = distance_to_equilibria(base + delta * e, eset, grid15)
        ref = delta * math.sqrt(bending_norm_sq(e, grid15) + l2_norm(e, grid15) ** 2)
        assert 0.5 * ref <= d <= 2 * ref

    def test_empty_set(self, grid15):
        with pytest.raises(ValueError):
            distance_to_equilibria(np.zeros(grid15.shape), [], grid15)

    def test_found_equilibria_are_distinct(self, grid15):
        pairs = find_equilibria(ModelParams(b=buckling_load(grid15) + 20.0, flow_coupling=False), grid15)
        fields = [p.u_hat for p in pairs]
        assert len(fields) == 3
        for i in range(3):
            for j in range(i):
                assert np.abs(fields[i] - fields[j]).max() > 1e-4


class TestFlow:
    def test_zero_plate_gives_zero_flow(self, grid15):
        assert np.abs(solve_stationary_flow(np.zeros(grid15.shape), 0.5, BOX, grid15)).max() == 0.0

    def test_single_mode_closed_form(self):
        N, h = 64, 0.125
        x0 = y0 = -4.0
        period = N * h
        k1, k2 = 2 * np.pi * 2 / period, 2 * np.pi * 3 / period
        x = x0 + h * np.arange(N)
        y = y0 + h * np.arange(N)
        g = np.sin(k1 * (x[:, None] - x0)) * np.sin(k2 * (y[None, :] - y0))
        fld = solve_halfspace_neumann(g, 0.0, (h, h), (x0, y0))
        xs, ys, zs = np.linspace(-3, 3, 7), np.linspace(-2, 2.5, 5), np.array([0.0, 0.3, 1.0])
        got = fld.evaluate(xs, ys, zs)
        kk = math.hypot(k1, k2)
        gs = np.sin(k1 * (xs[:, None] - x0)) * np.sin(k2 * (ys[None, :] - y0))
        want = -gs[:, :, None] * np.exp(-kk * zs)[None, None, :] / kk
        assert np.abs(got - want).max() <= 1e-8

    def test_prandtl_glauert_stretch(self, grid15):
        U = 0.5
        beta = math.sqrt(1 - U * U)
        u = clamped_bump(grid15)
        _, flow = solve_stationary_flow(u, U, BOX, grid15, return_field=True)
        # Laplace problem for the same data on a lattice stretched by 1/β
        g, (h1, h2), (x0, y0) = neumann_data(u, U, grid15, BOX)
        ref = solve_halfspace_neumann(g, 0.0, (h1 / beta, h2), (x0 / beta, y0))
        x, y, z = np.linspace(-1, 2, 9), np.linspace(-0.5, 1.5, 7), np.array([0.0, 0.2, 0.8])
        got = flow.evaluate(x, y, z)
        want = ref.evaluate(x / beta, y, z)
        assert np.abs(got - want).max() <= 1e-6 * np.abs(want).max()
        # and it is not the unstretched solution
        plain = solve_halfspace_neumann(g, 0.0, (h1, h2), (x0, y0)).evaluate(x, y, z)
        assert np.abs(got - plain).max() > 1e-3 * np.abs(want).max()

    def test_padding_must_clear_the_plate(self, grid15):
        with pytest.raises(ValueError):
            solve_stationary_flow(clamped_bump(grid15), 0.5, FlowBox(a=0.9), grid15)

    @pytest.mark.parametrize("kwargs", [{"a": 0}, {"padding": 1.5}, {"m3": 1}])
    def test_box_validation(self, kwargs):
        with pytest.raises(ValueError):
            FlowBox(**kwargs)

    def test_box_field_round_trip(self, tmp_path, grid15):
        box = FlowBox(a=1.5, zmax=1.0, m1=9, m2=7, m3=5)
        vals = solve_stationary_flow(clamped_bump(grid15), 0.4, box, grid15)
        write_box_field(tmp_path / "phi.txt", vals, box, 0.4)
        back, box2, U = read_box_field(tmp_path / "phi.txt")
        np.testing.assert_array_equal(back, vals)
        assert box2 == box and U == 0.4


class TestFunctionalD:
    def test_zero_pair(self, grid15):
        zero = StationaryPair(u_hat=np.zeros(grid15.shape))
        assert potential_D(zero, ModelParams(U=0.3), grid15, BOX)["D"] == 0.0

    @pytest.fixture(scope="class")
    @staticmethod
    def loaded(grid15):
        params = ModelParams(U=0.3, p0=1.0)
        sets = continuation(params, ("p0", [0.25, 0.5, 1.0]), grid15)
        return params, sets[-1].members[0]

    def test_minimizer_along_a_ray(self, loaded, grid15):
        params, pair = loaded
        d0 = potential_D(pair, params, grid15, BOX)["D"]
        for s in (0.99, 1.01):
            assert d0 <= potential_D(StationaryPair(u_hat=s * pair.u_hat), params, grid15, BOX)["D"]

    def test_height_truncation(self, loaded, grid15):
        params, pair = loaded
        d1 = potential_D(pair, params, grid15, BOX)["D"]
        d2 = potential_D(pair, params, grid15, FlowBox(a=2.0, zmax=4.0, m1=41, m2=41, m3=41))["D"]
        assert abs(d1 - d2) <= 0.01 * abs(d2)
