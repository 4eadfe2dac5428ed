"""Invariant checks shared by the ``verify`` experiment and the test suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from ..aero_delay import DelayHistory, DelayKernel, QuadratureSpec, compute_tstar
from ..dynamics import ModelParams, PlateStepper, simulate, simulate_decomposed
from ..flow_reconstruct import trace_identity_check
from ..plate_core import PlateGrid, PlateState
from .config import ExperimentConfig
from .presets import initial_state


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""
    wall_time: float = 0.0

    def row(self):
        return [self.name, self.value, self.threshold, "PASS" if self.passed else "FAIL", self.detail, self.wall_time]


CHECK_COLUMNS = ("check", "value", "threshold", "verdict", "detail", "wall_time")


def energy_drift(u0: np.ndarray, grid: PlateGrid, dt: float, T: float) -> float:
    """Relative change of the plate energy for the undamped, uncoupled plate."""
    params = ModelParams(U=0.0, k=0.0, b=0.0, p0=0.0, dt=dt, T=T, flow_coupling=False)
    rec = simulate(PlateState(u0, np.zeros_like(u0), 0.0), "frozen", params, grid,
                   sample_every=max(1, int(round(T / dt))), early_stop=False)
    e = rec.array("E_pl")
    return abs(e[-1] - e[0]) / abs(e[0])


def smooth_probe_field(grid: PlateGrid) -> np.ndarray:
    X, Y = grid.mesh()
    return (np.sin(np.pi * X / grid.L1) * np.sin(np.pi * Y / grid.L2)) ** 2 * (1 + X / grid.L1)


def quadrature_refinement(grid: PlateGrid, U: float, quad: QuadratureSpec, factor: int = 4) -> float:
    """Relative max-norm gap of the frozen-history q against a refined quadrature."""
    f = smooth_probe_field(grid)
    ref = DelayKernel(grid, U, QuadratureSpec(factor * quad.n_theta, factor * quad.n_s)).apply_frozen(f)
    q = DelayKernel(grid, U, quad).apply_frozen(f)
    return float(np.abs(q - ref).max() / np.abs(ref).max())


def q_rate_orders(grid: PlateGrid, U: float, quad: QuadratureSpec, dts=(0.04, 0.02, 0.01, 0.005),
                  omega: float = 3.0):
    """Gap between the exact q rate and centred differences of q, per dt.

    The history is u = G sin(ωt) sampled at the step.  Returns the gaps and
    the observed orders between consecutive halvings.
    """
    f = smooth_probe_field(grid)
    kernel = DelayKernel(grid, U, quad)
    t0 = 1.0

    def state(t):
        return PlateState(f * np.sin(omega * t), f * omega * np.cos(omega * t), t)

    gaps = []
    for dt in dts:
        hist = DelayHistory.from_datum(grid, kernel.tstar, dt, state(t0),
                                       eta=lambda s: (state(t0 + s).u, state(t0 + s).v))
        qs = [kernel.q(hist, t0)]
        rate = None
        for j in (1, 2):
            t = t0 + j * dt
            hist.push(state(t))
            qs.append(kernel.q(hist, t))
            if j == 1:
                rate = kernel.q_velocity(hist, t)
        fd = (qs[2] - qs[0]) / (2 * dt)
        gaps.append(float(np.abs(fd - rate).max()))
    gaps = np.array(gaps)
    return gaps, np.log2(gaps[:-1] / gaps[1:])


def decomposition_ratio(u0: np.ndarray, params: ModelParams, beta_z: float, grid: PlateGrid, eta="frozen",
                        sample_every: int = 10):
    rec = simulate_decomposed(PlateState(u0, np.zeros_like(u0), 0.0), eta, params, beta_z, grid, sample_every)
    scale = rec.max_u_norm
    return (rec.max_split_error / scale if scale > 0 else rec.max_split_error), rec


def run_to(u0: np.ndarray, params: ModelParams, grid: PlateGrid, t_end: float, eta="frozen"):
    """Plain stepping to ``t_end``; returns the final state and the history."""
    tstar = compute_tstar(grid, params.U)
    init = PlateState(u0, np.zeros_like(u0), 0.0)
    hist = DelayHistory.from_datum(grid, tstar, params.dt, init, eta)
    stepper = PlateStepper(grid, params, hist)
    st = init
    for _ in range(int(round(t_end / params.dt))):
        st = stepper.step(st)
    return st, hist


def trace_residuals(u0: np.ndarray, params: ModelParams, grid: PlateGrid, refine: int = 2):
    """Trace identity at t = 2t* with the default and a refined quadrature."""
    tstar = compute_tstar(grid, params.U)
    st, hist = run_to(u0, params, grid, 2 * tstar)
    q = params.quad
    coarse = trace_identity_check(hist, st.t, params.U, q, grid).relative
    fine = trace_identity_check(hist, st.t, params.U, QuadratureSpec(refine * q.n_theta, refine * q.n_s), grid).relative
    return coarse, fine


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def verify_suite(cfg: ExperimentConfig) -> list[CheckResult]:
    """Conservation, decomposition exactness, quadrature oracles and the trace identity."""
    grid = cfg.grid.build()
    m = cfg.model
    u0 = initial_state(cfg.initial if cfg.initial != "zero" else "mode11", grid, cfg.amplitude, cfg.seed).u
    T = cfg.options.verify_T
    out = []

    drift, w = _timed(lambda: energy_drift(u0, grid, min(m.dt, 1e-3), T))
    out.append(CheckResult("energy_conservation", drift, 1e-4, drift <= 1e-4, f"T={T}", w))

    (ratio, _), w = _timed(lambda: decomposition_ratio(u0, replace(m, T=T, flow_coupling=True), cfg.options.beta_z,
                                                       grid, cfg.eta, cfg.options.sample_every))
    out.append(CheckResult("decomposition_exactness", ratio, 1e-10, ratio <= 1e-10, f"T={T}", w))

    rel, w = _timed(lambda: quadrature_refinement(grid, m.U, m.quad))
    out.append(CheckResult("quadrature_refinement", rel, 1e-3, rel <= 1e-3, "4x refined", w))

    (gaps, orders), w = _timed(lambda: q_rate_orders(grid, m.U, m.quad))
    worst = float(orders.min())
    out.append(CheckResult("q_rate_order", worst, 1.8, worst >= 1.8,
                           "orders " + " ".join(f"{o:.3f}" for o in orders), w))

    (coarse, fine), w = _timed(lambda: trace_residuals(u0, replace(m, flow_coupling=True), grid))
    ok = coarse <= 5e-2 and fine < coarse
    out.append(CheckResult("trace_identity", coarse, 5e-2, ok, f"refined {fine:.3e}", w))
    return out
