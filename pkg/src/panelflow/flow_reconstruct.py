"""Flow potential reconstructed from the plate history.

For t past the memory horizon the flow driven by the plate is

    φ(x, t) = -χ(t - z)/(2π) ∫_z^{t*} ∫_0^{2π} H(x - κ1, y - κ2, t - s) dθ ds,
    H = u_t + U u_x,  κ1 = U s + r sin θ,  κ2 = r cos θ,  r = √(s² - z²).

The substitution s = z cosh σ turns r into z sinh σ and removes the square
root singularity at s = z from both φ and φ_t.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aero_delay import (
    GUARD,
    DelayHistory,
    QuadratureSpec,
    extended,
    get_kernel,
)
from .plate_core import PlateGrid, inner, l2_norm

_CHUNK = 1_500_000  # samples per vectorized batch


@dataclass
class FlowSampleSet:
    points: np.ndarray  # (N, 3)
    values: np.ndarray  # φ
    dvalues: np.ndarray  # φ_t
    t: float
    axes: tuple | None = None  # (x, y, z) when the points form a tensor grid

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if np.any(self.points[:, 2] < 0):
            raise ValueError("flow samples must lie in z >= 0")
        if not (np.all(np.isfinite(self.values)) and np.all(np.isfinite(self.dvalues))):
            raise ValueError("non-finite flow samples")


@dataclass(frozen=True)
class LocalEnergyBall:
    rho: float
    resolution: int = 17  # samples per lateral axis
    center: tuple = (0.5, 0.5)

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.resolution < 3:
            raise ValueError("resolution must be at least 3")

    def axes(self):
        cx, cy = self.center
        n = self.resolution
        nz = max(2, (n + 1) // 2)
        return (
            np.linspace(cx - self.rho, cx + self.rho, n),
            np.linspace(cy - self.rho, cy + self.rho, n),
            np.linspace(0.0, self.rho, nz),
        )


# -- pointwise sampling of the history ---------------------------------------

class _GuardedHistory:
    """Zero-extended H for every stored snapshot, sampled with its bilinear interpolant."""

    def __init__(self, hist: DelayHistory, U: float, grid: PlateGrid):
        self.hist, self.grid, self.U = hist, grid, U
        W1, W2 = grid.n1 + 2 * GUARD, grid.n2 + 2 * GUARD
        self.shape = (W1, W2)
        cap = hist.capacity
        self.H = np.zeros((cap, W1, W2))
        dx = grid.dx_matrix
        for k in range(len(hist)):
            slot = (hist._first + k) % cap
            u, v = hist._u[slot], hist._v[slot]
            h = v + U * (dx @ u.ravel()).reshape(grid.shape)
            self.H[slot] = extended(h, grid)

    def sample(self, x, y, tau):
        """H, ∂xH, ∂yH, ∂τH of the trilinear interpolant at (x, y, τ)."""
        g = self.grid
        lo, hi, lam = self.hist._locate(tau)
        r0, r1 = self.hist._rate_slots(tau)
        p1 = x / g.h1 - 1 + GUARD
        p2 = y / g.h2 - 1 + GUARD
        i1 = np.floor(p1).astype(np.int64)
        i2 = np.floor(p2).astype(np.int64)
        f1, f2 = p1 - i1, p2 - i2
        W1, W2 = self.shape
        val, ddx, ddy, ddt = (np.zeros(x.shape) for _ in range(4))
        arr = self.H
        rate = 1.0 / self.hist.dt
        for a1, w1, s1 in ((0, 1 - f1, -1.0), (1, f1, 1.0)):
            for a2, w2, s2 in ((0, 1 - f2, -1.0), (1, f2, 1.0)):
                j1, j2 = i1 + a1, i2 + a2
                ok = (j1 >= 0) & (j1 < W1) & (j2 >= 0) & (j2 < W2)
                j1c = np.where(ok, j1, 0)
                j2c = np.where(ok, j2, 0)
                node = np.where(ok, (1 - lam) * arr[lo, j1c, j2c] + lam * arr[hi, j1c, j2c], 0.0)
                val += w1 * w2 * node
                ddx += (s1 / g.h1) * w2 * node
                ddy += w1 * (s2 / g.h2) * node
                ddt += w1 * w2 * rate * np.where(ok, arr[r1, j1c, j2c] - arr[r0, j1c, j2c], 0.0)
        return val, ddx, ddy, ddt


def _s_nodes(z: float, tstar: float, n_s: int):
    """Nodes s ∈ [z, t*] with weights for ds, r ds/dσ-free forms.

    Returns s, r = √(s² - z²), w_phi (weights for ∫·ds) and w_drift
    (weights for ∫ s/r · ds).  For z = 0 both reduce to the plain trapezoid.
    """
    if z >= tstar:
        e = np.zeros(0)
        return e, e, e, e
    if z == 0.0:
        s = np.linspace(0.0, tstar, n_s + 1)
        w = np.full(n_s + 1, tstar / n_s)
        w[[0, -1]] *= 0.5
        return s, s, w, w
    smax = math.acosh(tstar / z)
    sig = np.linspace(0.0, smax, n_s + 1)
    w = np.full(n_s + 1, smax / n_s)
    w[[0, -1]] *= 0.5
    s = z * np.cosh(sig)
    r = z * np.sinh(sig)
    # ds = r dσ and (s/r) ds = s dσ
    return s, r, w * r, w * s


def _evaluate(hist, points, t, U, quad, grid, want_phi=True, want_dt=True, literal=False):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(points[:, 2] < 0):
        raise ValueError("points must satisfy z >= 0")
    hist.require_mature(t)
    tstar = hist.tstar
    gh = _GuardedHistory(hist, U, grid)
    th = quad.theta
    sin_t, cos_t = np.sin(th), np.cos(th)
    nth = th.size
    phi = np.zeros(len(points))
    dphi = np.zeros(len(points))
    for idx, (x, y, z) in enumerate(points):
        if t - z < 0 or z >= tstar:
            continue  # Heaviside, or the drifted footprint never reaches this height
        s, r, w_phi, w_drift = _s_nodes(z, tstar, quad.n_s)
        # (θ, s) grid of sample positions
        X = x - (U * s[None, :] + r[None, :] * sin_t[:, None])
        Y = y - r[None, :] * cos_t[:, None]
        T = np.broadcast_to(t - s[None, :], X.shape)
        H, Hx, Hy, Ht = (a.reshape(X.shape) for a in gh.sample(X.ravel(), Y.ravel(), T.ravel()))
        if want_phi:
            phi[idx] = -float(np.sum(H.mean(axis=0) * w_phi))
        if want_dt:
            # s = t* and s = z boundary terms (the latter is θ-independent)
            end = H[:, -1].mean()
            start = H[:, 0].mean()
            if literal:
                drift_u = U * Hx.mean(axis=0)
                drift_m = (sin_t[:, None] * Hx + cos_t[:, None] * Hy).mean(axis=0)
                bulk = float(np.sum(drift_u * w_phi + drift_m * w_drift))
            else:
                # along a ray G(s) = H(x - κ(s), t - s) has κ'·∇H = -G' - ∂τH, so the
                # drift integrals are -(G(t*) - G(z)) - ∫∂τH, exact on the interpolant
                bulk = -(end - start) - float(np.sum(Ht.mean(axis=0) * w_phi))
            dphi[idx] = end - start + bulk
    return phi, dphi


def eval_phi(hist: DelayHistory, point, t: float, U: float, quad: QuadratureSpec, grid: PlateGrid) -> float:
    return float(_evaluate(hist, [point], t, U, quad, grid, want_dt=False)[0][0])


def eval_phi_t(hist: DelayHistory, point, t: float, U: float, quad: QuadratureSpec, grid: PlateGrid,
               literal: bool = False) -> float:
    """φ_t from the two boundary-in-s terms and the two drift integrals.

    The gradient of the bilinear interpolant jumps at cell lines, so a plain
    quadrature of the drift integrals (``literal=True``) leaves an O(Δs)
    error per crossing that does not settle under refinement.  By default
    the drift integrals are taken through the path identity instead.
    """
    return float(_evaluate(hist, [point], t, U, quad, grid, want_phi=False, literal=literal)[1][0])


def sample_flow(hist: DelayHistory, points, t: float, U: float, quad: QuadratureSpec, grid: PlateGrid,
                axes=None) -> FlowSampleSet:
    phi, dphi = _evaluate(hist, points, t, U, quad, grid)
    return FlowSampleSet(np.asarray(points, dtype=float), phi, dphi, t, axes)


def sample_ball(hist: DelayHistory, ball: LocalEnergyBall, t: float, U: float, quad: QuadratureSpec,
                grid: PlateGrid) -> FlowSampleSet:
    x, y, z = ball.axes()
    P = np.stack(np.meshgrid(x, y, z, indexing="ij"), axis=-1).reshape(-1, 3)
    return sample_flow(hist, P, t, U, quad, grid, axes=(x, y, z))


# -- energies ---------------------------------------------------------------------

def _trap_weights(ax):
    d = np.diff(ax)
    w = np.zeros(ax.size)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def local_flow_energy(samples: FlowSampleSet, ball: LocalEnergyBall) -> float:
    """∫_{K_ρ ∩ {z ≥ 0}} |∇φ|² + |φ_t|² on the structured sample grid."""
    if samples.axes is None:
        raise ValueError("local energy needs samples on a tensor grid")
    x, y, z = samples.axes
    cx, cy = ball.center
    tol = 1e-12 * max(1.0, ball.rho)
    if (x[0] > cx - ball.rho + tol or x[-1] < cx + ball.rho - tol or y[0] > cy - ball.rho + tol
            or y[-1] < cy + ball.rho - tol or z[0] > tol or z[-1] < ball.rho - tol):
        raise ValueError("sample grid does not cover the half-ball")
    shape = (x.size, y.size, z.size)
    phi = samples.values.reshape(shape)
    dphi = samples.dvalues.reshape(shape)
    gx, gy, gz = np.gradient(phi, x, y, z, edge_order=2)
    dens = gx**2 + gy**2 + gz**2 + dphi**2
    X, Y, Z = np.meshgrid(x, y, z, indexing="ij")
    inside = (X - cx) ** 2 + (Y - cy) ** 2 + Z**2 <= ball.rho**2 * (1 + 1e-12)
    w = _trap_weights(x)[:, None, None] * _trap_weights(y)[None, :, None] * _trap_weights(z)[None, None, :]
    return float(np.sum(w * inside * dens))


def interaction_energy(u, phi_trace, U: float, grid: PlateGrid) -> float:
    """2U ⟨tr φ, u_x⟩ over the plate."""
    ux = (grid.dx_matrix @ np.asarray(u, dtype=float).ravel()).reshape(grid.shape)
    return 2.0 * U * inner(np.asarray(phi_trace, dtype=float), ux, grid)


# -- trace identity -------------------------------------------------------------------

@dataclass
class TraceCheck:
    residual: np.ndarray
    relative: float
    lhs: np.ndarray
    rhs: np.ndarray


def trace_identity_check(hist: DelayHistory, t: float, U: float, quad: QuadratureSpec,
                         grid: PlateGrid) -> TraceCheck:
    """Compare tr[(∂t + U∂x)φ] with -(∂t + U∂x)u - q on the plate.

    At z = 0 the drift is the same for every node, so φ and the drift
    integrals of φ_t reuse the lattice convolution of the memory term.
    """
    kernel = get_kernel(grid, U, quad)
    hist.require_mature(t)
    dx = grid.dx_matrix
    g1 = GUARD

    def conv(channel, family=None):
        return kernel.to_guarded(kernel.history_sum_hat(hist, t, channel, family=family))

    phi = -(conv("v0") + U * conv("ux0"))
    phi_x = (phi[g1 + 1 : g1 + 1 + grid.n1, g1 : g1 + grid.n2] - phi[g1 - 1 : g1 - 1 + grid.n1, g1 : g1 + grid.n2]) / (
        2 * grid.h1
    )
    drift = conv("v0", "drift1") + U * conv("ux0", "drift1")
    drift = drift[g1 : g1 + grid.n1, g1 : g1 + grid.n2]

    def H_at(tau):
        u, v = hist.field_at(tau, "u"), hist.field_at(tau, "v")
        return v + U * (dx @ u.ravel()).reshape(grid.shape)

    H_now = H_at(t)
    end = kernel.end_average(extended(H_at(t - hist.tstar), grid))
    phi_t = end - H_now + drift
    lhs = phi_t + U * phi_x
    rhs = -H_now - kernel.q(hist, t)
    res = lhs - rhs
    rn = l2_norm(rhs, grid)
    resn = l2_norm(res, grid)
    if rn == 0.0 and resn == 0.0:
        rel = 0.0
    else:
        rel = resn / (rn + np.finfo(float).eps)
    return TraceCheck(res, rel, lhs, rhs)


# -- sample dumps --------------------------------------------------------------------

def write_flow_samples(path, samples: FlowSampleSet, U: float, quad: QuadratureSpec) -> None:
    """Rows ``x y z phi phi_t`` under a header with t, U and the quadrature."""
    lines = [
        f"# t {samples.t:.17g} U {U:.17g} n_theta {quad.n_theta} n_s {quad.n_s}",
        "# x y z phi phi_t",
    ]
    for (x, y, z), p, d in zip(samples.points, samples.values, samples.dvalues):
        lines.append(f"{x:.17g} {y:.17g} {z:.17g} {p:.17g} {d:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_flow_samples(path) -> tuple[FlowSampleSet, dict]:
    text = Path(path).read_text().splitlines()
    head = text[0].lstrip("#").split()
    meta = {k: float(v) for k, v in zip(head[::2], head[1::2])}
    rows = np.loadtxt(text[2:], ndmin=2) if len(text) > 2 else np.zeros((0, 5))
    return FlowSampleSet(rows[:, :3], rows[:, 3], rows[:, 4], meta["t"]), meta


def read_points(path) -> np.ndarray:
    """Evaluation points, one ``x y z`` row per line, ``#`` comments allowed."""
    pts = np.loadtxt(path, comments="#", ndmin=2)
    if pts.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 columns (x y z), found {pts.shape[1]}")
    return pts
