import math

import numpy as np
import pytest

from panelflow.aero_delay import (
    DelayHistory,
    DelayKernel,
    ImmatureHistoryError,
    QuadratureSpec,
    compute_tstar,
    delay_bound_ratios,
    dump_history,
    eval_q,
    eval_q_dt,
    eval_q_dt_four_term,
    load_history,
)
from panelflow.plate_core import PlateState, build_grid

from .conftest import clamped_bump


def _zero_state(grid, t=0.0):
    z = np.zeros(grid.shape)
    return PlateState(z, z.copy(), t)


def test_tstar_at_rest_is_the_diagonal(grid15):
    assert compute_tstar(grid15, 0.0) == pytest.approx(math.sqrt(2), rel=1e-9)


def test_tstar_grows_with_flow_speed(grid15):
    speeds = [0.0, 0.2, 0.5, 0.8, 0.95]
    values = [compute_tstar(grid15, U) for U in speeds]
    assert values[2] > 2.0
    assert all(a < b for a, b in zip(values, values[1:]))


def test_tstar_rejects_supersonic(grid15):
    with pytest.raises(ValueError):
        compute_tstar(grid15, 1.0)


def test_quadrature_spec_validation():
    with pytest.raises(ValueError):
        QuadratureSpec(n_theta=15)
    with pytest.raises(ValueError):
        QuadratureSpec(n_s=4)
    assert QuadratureSpec(32, 64).refined(2) == QuadratureSpec(64, 128)


class TestHistory:
    def test_first_push(self, grid15):
        hist = DelayHistory(grid15, 1.0, 0.1)
        hist.push(_zero_state(grid15))
        assert len(hist) == 1 and not hist.is_mature(0.0)

    def test_non_uniform_push_rejected(self, grid15):
        hist = DelayHistory(grid15, 1.0, 0.1)
        hist.push(_zero_state(grid15))
        with pytest.raises(ValueError, match="non-uniform"):
            hist.push(_zero_state(grid15, 0.2))

    def test_shape_mismatch_rejected(self, grid15, grid31):
        hist = DelayHistory(grid15, 1.0, 0.1)
        with pytest.raises(ValueError):
            hist.push(_zero_state(grid31))

    def test_eviction_keeps_the_window(self, grid15):
        hist = DelayHistory(grid15, 1.0, 0.1)
        for n in range(60):
            hist.push(_zero_state(grid15, 0.1 * n))
        t = hist.last_time
        assert hist.first_time <= t - 1.0 + 1e-12
        assert hist.first_time >= t - 1.0 - 2 * 0.1 - 1e-12
        assert hist.is_mature(t)

    def test_immature_query_raises(self, grid15):
        hist = DelayHistory(grid15, compute_tstar(grid15, 0.3), 0.1)
        for n in range(5):
            hist.push(_zero_state(grid15, 0.1 * n))
        with pytest.raises(ImmatureHistoryError):
            eval_q(hist, 0.4, 0.3, QuadratureSpec(), grid15)

    def test_datum_covers_the_window(self, grid15):
        tstar = compute_tstar(grid15, 0.3)
        hist = DelayHistory.from_datum(grid15, tstar, 0.05, PlateState(clamped_bump(grid15), np.zeros(grid15.shape)))
        assert hist.is_mature(0.0)
        np.testing.assert_allclose(hist.field_at(-0.5 * tstar), clamped_bump(grid15), rtol=1e-14)

    def test_ramp_datum_starts_from_zero(self, grid15):
        u0 = clamped_bump(grid15)
        hist = DelayHistory.from_datum(grid15, 1.0, 0.1, PlateState(u0, np.zeros_like(u0)), eta="ramp")
        assert np.abs(hist.field_at(-1.0)).max() < 1e-12
        np.testing.assert_allclose(hist.field_at(-0.5), 0.5 * u0, atol=1e-12)

    def test_interpolation_is_linear(self, grid15):
        u0 = clamped_bump(grid15)
        hist = DelayHistory(grid15, 1.0, 0.1)
        hist.push(PlateState(0 * u0, 0 * u0, 0.0)).push(PlateState(u0, 0 * u0, 0.1))
        np.testing.assert_allclose(hist.field_at(0.025), 0.25 * u0, atol=1e-14)

    def test_round_trip(self, grid15, tmp_path):
        rng = np.random.default_rng(3)
        hist = DelayHistory(grid15, 0.3, 0.1)
        for n in range(6):
            hist.push(PlateState(rng.standard_normal(grid15.shape), rng.standard_normal(grid15.shape), 0.1 * n))
        back = load_history(dump_history(hist, tmp_path / "h"))
        np.testing.assert_array_equal(back.times, hist.times)
        for k in range(len(hist)):
            np.testing.assert_array_equal(back.snapshot(k).u, hist.snapshot(k).u)
            np.testing.assert_array_equal(back.snapshot(k).v, hist.snapshot(k).v)


def test_zero_history_gives_zero(grid15):
    tstar = compute_tstar(grid15, 0.4)
    hist = DelayHistory.from_datum(grid15, tstar, 0.05, _zero_state(grid15), eta="zero")
    quad = QuadratureSpec()
    assert np.abs(eval_q(hist, 0.0, 0.4, quad, grid15)).max() == 0.0
    assert np.abs(eval_q_dt(hist, 0.0, 0.4, quad, grid15)).max() == 0.0


def test_memory_term_is_linear(grid15):
    tstar = compute_tstar(grid15, 0.4)
    rng = np.random.default_rng(0)
    f, g = clamped_bump(grid15), clamped_bump(grid15, 3) * rng.uniform(0.5, 1.5, grid15.shape)
    quad = QuadratureSpec()

    def q_of(u):
        hist = DelayHistory.from_datum(grid15, tstar, 0.05, PlateState(u, np.zeros_like(u)))
        return eval_q(hist, 0.0, 0.4, quad, grid15)

    np.testing.assert_allclose(q_of(2 * f - 3 * g), 2 * q_of(f) - 3 * q_of(g), atol=1e-12)


def test_frozen_history_matches_refined_quadrature(grid31):
    u = clamped_bump(grid31) * (1 + np.linspace(0, 1, grid31.n1 + 2)[1:-1, None])
    quad = QuadratureSpec()
    coarse = DelayKernel(grid31, 0.5, quad).apply_frozen(u)
    fine = DelayKernel(grid31, 0.5, quad.refined(4)).apply_frozen(u)
    assert np.abs(coarse - fine).max() / np.abs(fine).max() <= 1e-3


def test_history_sum_agrees_with_frozen_kernel(grid15):
    u = clamped_bump(grid15)
    U, quad = 0.3, QuadratureSpec()
    kernel = DelayKernel(grid15, U, quad)
    hist = DelayHistory.from_datum(grid15, kernel.tstar, 0.02, PlateState(u, np.zeros_like(u)))
    np.testing.assert_allclose(kernel.q(hist, 0.0), kernel.apply_frozen(u), atol=1e-10 * np.abs(u).max())


def _oscillating_history(grid, U, omega=2.0):
    u_shape = clamped_bump(grid)

    def eta(s):
        return u_shape * math.cos(omega * s), -omega * u_shape * math.sin(omega * s)

    return DelayHistory.from_datum(grid, compute_tstar(grid, U), 0.02, PlateState(u_shape, 0 * u_shape), eta=eta)


def _angular_gap(grid, U=0.3):
    hist = _oscillating_history(grid, U)
    a = eval_q(hist, 0.0, U, QuadratureSpec(64, 256), grid)
    b = eval_q(hist, 0.0, U, QuadratureSpec(128, 256), grid)
    return np.abs(a - b).max(), np.abs(b).max()


@pytest.mark.xfail(strict=True, reason="bilinear sampling makes the angular integrand only piecewise smooth; "
                                       "the periodic rule converges algebraically, gap about 3e-4")
def test_angular_doubling_is_spectral(grid15):
    gap, scale = _angular_gap(grid15)
    assert gap <= 1e-6 * max(1.0, scale)


def test_angular_doubling_gap_is_small(grid31):
    gap, scale = _angular_gap(grid31)
    assert gap <= 1e-3 * scale


def test_frozen_history_has_no_rate(grid15):
    u = clamped_bump(grid15)
    hist = DelayHistory.from_datum(grid15, compute_tstar(grid15, 0.3), 0.05, PlateState(u, np.zeros_like(u)))
    assert np.abs(eval_q_dt(hist, 0.0, 0.3, QuadratureSpec(), grid15)).max() <= 1e-6


def test_rate_matches_centred_differences(grid15):
    from panelflow.harness.verify import q_rate_orders

    gaps, orders = q_rate_orders(grid15, 0.4, QuadratureSpec())
    assert np.all(np.diff(gaps) < 0)
    assert orders.min() >= 1.8


def test_four_term_rate_is_a_coarse_diagnostic(grid15):
    # the boundary-jump split converges only as the grid refines; it stays
    # finite and of the size of the exact rate, nothing stronger is claimed
    u = clamped_bump(grid15)
    omega, U = 2.0, 0.3
    tstar = compute_tstar(grid15, U)

    def eta(s):
        return u * math.sin(omega * s), omega * u * math.cos(omega * s)

    hist = DelayHistory.from_datum(grid15, tstar, 0.02, PlateState(0 * u, omega * u), eta=eta)
    exact = eval_q_dt(hist, 0.0, U, QuadratureSpec(), grid15)
    split = eval_q_dt_four_term(hist, 0.0, U, QuadratureSpec(), grid15)
    assert np.all(np.isfinite(split))
    assert np.abs(split).max() < 10 * np.abs(exact).max()


class TestBoundRatios:
    def test_zero_history_reports_nan(self, grid15):
        hist = DelayHistory.from_datum(grid15, compute_tstar(grid15, 0.3), 0.05, _zero_state(grid15), eta="zero")
        r = delay_bound_ratios(hist, 0.0, 0.3, grid15)
        assert math.isnan(r.ratio) and math.isnan(r.ratio_star)

    def test_frozen_ratios_are_finite_and_grid_stable(self):
        out = []
        for n in (31, 63):
            grid = build_grid(1.0, 1.0, n, n)
            u = clamped_bump(grid)
            hist = DelayHistory.from_datum(grid, compute_tstar(grid, 0.3), 0.05, PlateState(u, np.zeros_like(u)))
            r = delay_bound_ratios(hist, 0.0, 0.3, grid, QuadratureSpec(32, 64))
            assert 0 < r.ratio < math.inf and 0 < r.ratio_star < math.inf
            out.append(r.ratio)
        assert abs(out[0] - out[1]) / out[1] <= 0.2
