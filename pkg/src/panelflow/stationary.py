"""Equilibria of the reduced plate, the stationary flow and the functional D.

At rest the memory term sees a frozen history, so the stationary equation
of the reduced plate is

    Δ²u + [b - ||∇u||²]Δu + U u_x + Q u = p0,

with Q the frozen delay operator.  It is solved by Newton's method with a
dense Jacobian (grids here are at most a few thousand nodes).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.fft as sfft
import scipy.linalg as sla
from scipy.sparse.linalg import spsolve

from .aero_delay import get_kernel
from .dynamics import ModelParams
from .plate_core import (
    PlateGrid,
    PlateState,
    bending_norm_sq,
    grad_norm_sq,
    inner,
    l2_norm,
    plate_energy,
)

MAX_NEWTON = 50
NEWTON_TOL = 1e-8
DEDUP_TOL = 1e-4


def _flat(M, f, grid):
    return (M @ np.asarray(f, dtype=float).ravel()).reshape(grid.shape)


def stationary_residual(u, params: ModelParams, grid: PlateGrid) -> np.ndarray:
    """Δ²u + f_B(u) + U u_x + Q u - p0 (flow terms only with coupling on)."""
    u = np.asarray(u, dtype=float)
    coeff = params.b - grad_norm_sq(u, grid)
    r = _flat(grid.bilaplacian_matrix, u, grid) + coeff * _flat(grid.laplacian_matrix, u, grid)
    r = r - params.pressure(grid)
    if params.flow_coupling:
        kernel = get_kernel(grid, params.U, params.quad)
        r = r + params.U * _flat(grid.dx_matrix, u, grid) + kernel.apply_frozen(u)
    return r


def _linear_part(params: ModelParams, grid: PlateGrid) -> np.ndarray:
    A = grid.bilaplacian_matrix.toarray()
    if params.flow_coupling:
        A = A + params.U * grid.dx_matrix.toarray() + get_kernel(grid, params.U, params.quad).frozen_matrix()
    return A


def stationary_jacobian(u, params: ModelParams, grid: PlateGrid, linear: np.ndarray | None = None) -> np.ndarray:
    """J w = Δ²w + [b - ||∇u||²]Δw - 2(∇u, ∇w)Δu + U w_x + Q w."""
    L = grid.laplacian_matrix
    lu = L @ np.asarray(u, dtype=float).ravel()
    coeff = params.b - grad_norm_sq(u, grid)
    J = (_linear_part(params, grid) if linear is None else linear).copy()
    J += coeff * L.toarray()
    # ||∇u||² = -h1h2 uᵀLu, so -2(∇u,∇w) = 2 h1h2 (Lu)ᵀw
    J += 2 * grid.cell_area * np.outer(lu, lu)
    return J


@dataclass
class StationaryPair:
    u_hat: np.ndarray
    phi_hat: np.ndarray | None = None
    residual_norm: float = float("nan")
    converged: bool = False
    iterations: int = 0
    history: list = field(default_factory=list)
    box: "FlowBox | None" = None
    label: str = ""
    status: str = ""

    def summary(self, grid: PlateGrid) -> dict:
        return {
            "label": self.label,
            "converged": self.converged,
            "residual": self.residual_norm,
            "u_norm": l2_norm(self.u_hat, grid),
            "du_norm": math.sqrt(bending_norm_sq(self.u_hat, grid)),
            "grad_sq": grad_norm_sq(self.u_hat, grid),
            "iterations": self.iterations,
        }


def newton_tolerance(params: ModelParams, grid: PlateGrid) -> float:
    return NEWTON_TOL * (1 + l2_norm(params.pressure(grid), grid))


def solve_stationary(params: ModelParams, guess, grid: PlateGrid, max_iter: int = MAX_NEWTON,
                     tol: float | None = None) -> StationaryPair:
    """Newton with Armijo backtracking on ½||r||²; max-norm stopping test.

    Returns the best iterate; ``converged`` is False after ``max_iter``
    iterations or a singular Jacobian (``status`` says which).
    """
    tol = newton_tolerance(params, grid) if tol is None else tol
    u = np.array(guess, dtype=float).reshape(grid.shape)
    linear = _linear_part(params, grid)
    r = stationary_residual(u, params, grid)
    rn = float(np.abs(r).max())
    hist = [rn]
    best = (rn, u.copy())
    it = 0
    status = "max_iter"
    while it < max_iter:
        if rn <= tol:
            status = "converged"
            break
        J = stationary_jacobian(u, params, grid, linear)
        try:
            step = sla.solve(J, -r.ravel(), check_finite=True)
        except (sla.LinAlgError, ValueError):
            status = "singular"
            break
        step = step.reshape(grid.shape)
        merit = 0.5 * float(np.sum(r * r))
        lam = 1.0
        while True:
            trial = u + lam * step
            rt = stationary_residual(trial, params, grid)
            mt = 0.5 * float(np.sum(rt * rt))
            # directional derivative of the merit along a Newton step is -2·merit
            if mt <= (1 - 2e-4 * lam) * merit or lam < 1e-6:
                break
            lam *= 0.5
        u, r = trial, rt
        rn = float(np.abs(r).max())
        hist.append(rn)
        it += 1
        if rn < best[0]:
            best = (rn, u.copy())
    else:
        if rn <= tol:
            status = "converged"
    rn, u = best
    return StationaryPair(u_hat=u, residual_norm=rn, converged=rn <= tol, iterations=it,
                          history=hist, status="converged" if rn <= tol else status)


# -- buckling ---------------------------------------------------------------------

def buckling_modes(grid: PlateGrid, count: int = 1):
    """Smallest eigenpairs of Δ²φ = λ(-Δ)φ on the grid."""
    A = grid.bilaplacian_matrix.toarray()
    B = -grid.laplacian_matrix.toarray()
    vals, vecs = sla.eigh(A, B, subset_by_index=[0, count - 1])
    modes = []
    for j in range(count):
        phi = vecs[:, j].reshape(grid.shape)
        phi = phi / l2_norm(phi, grid)
        if phi.ravel()[np.argmax(np.abs(phi))] < 0:
            phi = -phi
        modes.append(phi)
    return vals, modes


def buckling_load(grid: PlateGrid) -> float:
    return float(buckling_modes(grid, 1)[0][0])


def buckled_seed(grid: PlateGrid, b: float):
    """±a·φ₁ with ||∇(aφ₁)||² = b - λ₁, the exact single-mode Berger state."""
    vals, modes = buckling_modes(grid, 1)
    excess = b - vals[0]
    if excess <= 0:
        return []
    amp = math.sqrt(excess / grad_norm_sq(modes[0], grid))
    return [amp * modes[0], -amp * modes[0]]


# -- equilibria sets and continuation ---------------------------------------------

@dataclass
class EquilibriaSet:
    parameter: str
    value: float
    members: list = field(default_factory=list)
    terminated: bool = False

    def __len__(self):
        return len(self.members)

    def fields(self):
        return [m.u_hat for m in self.members]


def _dedup(pairs, tol=DEDUP_TOL):
    out = []
    for p in pairs:
        if all(np.abs(p.u_hat - q.u_hat).max() > tol for q in out):
            out.append(p)
    return out


def _label(pair: StationaryPair, grid: PlateGrid) -> str:
    if np.abs(pair.u_hat).max() < DEDUP_TOL:
        return "trivial"
    vals, modes = buckling_modes(grid, 1)
    return "plus" if inner(pair.u_hat, modes[0], grid) >= 0 else "minus"


def _with_param(params: ModelParams, name: str, value: float, grid: PlateGrid) -> ModelParams:
    if name == "b":
        return replace(params, b=value)
    if name == "U":
        return replace(params, U=value)
    if name == "p0":
        base = np.asarray(params.p0, dtype=float)
        shape = base / (np.abs(base).max() or 1.0) if base.ndim else np.ones(grid.shape)
        return replace(params, p0=value * shape)
    raise ValueError(f"cannot sweep parameter {name!r}; choose b, p0 or U")


def find_equilibria(params: ModelParams, grid: PlateGrid, guesses=(), seed: bool = True) -> list:
    """Newton from the given guesses, their negations, zero and buckling seeds."""
    cand = [np.zeros(grid.shape)]
    for g in guesses:
        cand += [np.asarray(g, dtype=float), -np.asarray(g, dtype=float)]
    if seed:
        cand += buckled_seed(grid, params.b)
    found = []
    for g in cand:
        pair = solve_stationary(params, g, grid)
        if pair.converged:
            found.append(pair)
    found = _dedup(found)
    for p in found:
        p.label = _label(p, grid)
    return found


def continuation(params: ModelParams, sweep, grid: PlateGrid) -> list:
    """Follow equilibria along ``sweep = (name, values)`` with name in {b, p0, U}.

    Each point starts Newton from the previous solutions, their negations,
    zero and (above the buckling load) the ± buckling-mode seeds.
    """
    name, values = sweep
    values = list(values)
    diffs = np.diff(values)
    if len(values) > 1 and not (np.all(diffs > 0) or np.all(diffs < 0)):
        raise ValueError("sweep values must be strictly monotone")
    out = []
    prev = []
    for val in values:
        p = _with_param(params, name, val, grid)
        found = find_equilibria(p, grid, guesses=prev)
        out.append(EquilibriaSet(name, float(val), found, terminated=not found))
        prev = [m.u_hat for m in found] or prev
    return out


def distance_to_equilibria(state, eqset, grid: PlateGrid) -> tuple[float, int]:
    """min over members of (||Δ(u-û)||² + ||u-û||² + ||u_t||²)^½ and its index."""
    members = eqset.fields() if isinstance(eqset, EquilibriaSet) else [
        m.u_hat if isinstance(m, StationaryPair) else np.asarray(m) for m in eqset
    ]
    if not members:
        raise ValueError("empty equilibria set")
    if isinstance(state, PlateState):
        u, kin = state.u, l2_norm(state.v, grid) ** 2
    else:
        u, kin = np.asarray(state, dtype=float), 0.0
    d = [bending_norm_sq(u - m, grid) + l2_norm(u - m, grid) ** 2 + kin for m in members]
    j = int(np.argmin(d))
    return math.sqrt(d[j]), j


# -- stationary flow ----------------------------------------------------------------

@dataclass(frozen=True)
class FlowBox:
    """Sampling box [-a, a]² × [0, zmax] in plate coordinates.

    The lateral periodic domain used by the FFT has width ``padding·2a``.
    """

    a: float = 2.0
    zmax: float = 2.0
    m1: int = 41
    m2: int = 41
    m3: int = 21
    padding: float = 2.0

    def __post_init__(self):
        if self.a <= 0 or self.zmax <= 0:
            raise ValueError("box sizes must be positive")
        if self.padding < 2:
            raise ValueError("padding must be at least 2")
        if min(self.m1, self.m2, self.m3) < 2:
            raise ValueError("need at least two samples per axis")

    def check_contains(self, grid: PlateGrid) -> None:
        if not (self.a > grid.L1 and self.a > grid.L2):
            raise ValueError("flow box must strictly contain the plate")

    def axes(self):
        return (
            np.linspace(-self.a, self.a, self.m1),
            np.linspace(-self.a, self.a, self.m2),
            np.linspace(0.0, self.zmax, self.m3),
        )


@dataclass
class HalfSpaceField:
    """Solution of the stretched half-space problem as lateral Fourier modes.

    φ(x, y, z) = Σ C(ξ) e^{-κ(ξ) z} e^{i ξ·(x - x0, y - y0)},
    κ = ((1 - U²) ξ1² + ξ2²)^½.
    """

    coef: np.ndarray  # full complex spectrum (N1, N2), fft order
    xi1: np.ndarray
    xi2: np.ndarray
    kappa: np.ndarray
    origin: tuple
    period: tuple

    def _phase(self, pts, xi, o):
        return np.exp(1j * np.outer(np.asarray(pts) - o, xi))

    def evaluate(self, x, y, z, deriv: str = "") -> np.ndarray:
        """Field (or ∂x, ∂y, ∂z with ``deriv``) on the tensor grid x × y × z."""
        E1 = self._phase(x, self.xi1, self.origin[0])
        E2 = self._phase(y, self.xi2, self.origin[1])
        base = self.coef
        if deriv == "x":
            base = base * (1j * self.xi1[:, None])
        elif deriv == "y":
            base = base * (1j * self.xi2[None, :])
        out = np.empty((len(x), len(y), len(z)))
        for k, zz in enumerate(np.atleast_1d(z)):
            c = base * np.exp(-self.kappa * zz)
            if deriv == "z":
                c = -self.kappa * c
            out[:, :, k] = (E1 @ c @ E2.T).real
        return out

    def energy_density_modes(self) -> float:
        """∫_{period}∫_0^∞ |∇φ|² from the mode sum (Parseval check)."""
        area = self.period[0] * self.period[1]
        k2 = self.xi1[:, None] ** 2 + self.xi2[None, :] ** 2 + self.kappa**2
        with np.errstate(divide="ignore", invalid="ignore"):
            per = np.where(self.kappa > 0, k2 / (2 * self.kappa), 0.0)
        return float(area * np.sum(np.abs(self.coef) ** 2 * per))


def _lattice(grid: PlateGrid, box: FlowBox):
    width = box.padding * 2 * box.a
    N1 = sfft.next_fast_len(int(math.ceil(width / grid.h1)))
    N2 = sfft.next_fast_len(int(math.ceil(width / grid.h2)))
    # plate nodes i·h1 are lattice nodes; the lattice is centred on the box
    x0 = -(N1 // 2) * grid.h1
    y0 = -(N2 // 2) * grid.h2
    return N1, N2, x0, y0


def solve_halfspace_neumann(data: np.ndarray, U: float, spacing, origin) -> HalfSpaceField:
    """Solve (1-U²)φ_xx + φ_yy + φ_zz = 0, ∂zφ = g on z = 0, φ → 0 as z → ∞.

    ``data`` is g on a periodic lattice with the given spacing and origin.
    The zero mode is set to zero.
    """
    if not 0 <= U < 1:
        raise ValueError("0 <= U < 1 required")
    N1, N2 = data.shape
    h1, h2 = spacing
    xi1 = 2 * np.pi * sfft.fftfreq(N1, d=h1)
    xi2 = 2 * np.pi * sfft.fftfreq(N2, d=h2)
    kappa = np.sqrt((1 - U * U) * xi1[:, None] ** 2 + xi2[None, :] ** 2)
    ghat = sfft.fft2(data) / (N1 * N2)
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(kappa > 0, -ghat / kappa, 0.0)
    return HalfSpaceField(coef, xi1, xi2, kappa, tuple(origin), (N1 * h1, N2 * h2))


def neumann_data(u_hat: np.ndarray, U: float, grid: PlateGrid, box: FlowBox):
    """U ∂x u extended by zero, on the padded lattice."""
    box.check_contains(grid)
    N1, N2, x0, y0 = _lattice(grid, box)
    g = np.zeros((N1, N2))
    i0 = int(round(-x0 / grid.h1)) + 1
    j0 = int(round(-y0 / grid.h2)) + 1
    ux = _flat(grid.dx_matrix, u_hat, grid)
    g[i0 : i0 + grid.n1, j0 : j0 + grid.n2] = U * ux
    # support must stay clear of the periodic seam
    margin = 0.1 * N1 * grid.h1
    if x0 + margin > 0 or x0 + N1 * grid.h1 - margin < grid.L1 or y0 + margin > 0 or y0 + N2 * grid.h2 - margin < grid.L2:
        raise ValueError("padding too small: Neumann data reaches the periodic boundary")
    return g, (grid.h1, grid.h2), (x0, y0)


def solve_stationary_flow(u_hat, U: float, box: FlowBox, grid: PlateGrid, return_field: bool = False):
    """Stationary flow potential sampled on the box grid (m1, m2, m3).

    The symbol κ = ((1-U²)ξ1² + ξ2²)^½ is the Prandtl–Glauert stretch
    x' = x/√(1-U²) written in Fourier variables.
    """
    g, spacing, origin = neumann_data(np.asarray(u_hat, dtype=float), U, grid, box)
    fld = solve_halfspace_neumann(g, U, spacing, origin)
    phi = fld.evaluate(*box.axes())
    return (phi, fld) if return_field else phi


def _trapz_weights(n, length):
    w = np.full(n, length / (n - 1))
    w[[0, -1]] *= 0.5
    return w


def flow_energy_terms(fld: HalfSpaceField, box: FlowBox):
    """(||∇φ||², ||∂xφ||²) over the box by trapezoid quadrature."""
    x, y, z = box.axes()
    w = (
        _trapz_weights(box.m1, 2 * box.a)[:, None, None]
        * _trapz_weights(box.m2, 2 * box.a)[None, :, None]
        * _trapz_weights(box.m3, box.zmax)[None, None, :]
    )
    px = fld.evaluate(x, y, z, "x")
    py = fld.evaluate(x, y, z, "y")
    pz = fld.evaluate(x, y, z, "z")
    grad2 = float(np.sum(w * (px * px + py * py + pz * pz)))
    return grad2, float(np.sum(w * px * px))


def potential_D(pair: StationaryPair, params: ModelParams, grid: PlateGrid, box: FlowBox) -> dict:
    """D(u, φ) with flow integrals truncated to the box.

    φ is re-solved from ``pair.u_hat`` so the trace term uses exact mode
    sums at the plate nodes.
    """
    u = pair.u_hat
    rep = plate_energy(PlateState(u, np.zeros_like(u)), params.b, params.p0, grid)
    g, spacing, origin = neumann_data(u, params.U, grid, box)
    fld = solve_halfspace_neumann(g, params.U, spacing, origin)
    grad2, dx2 = flow_energy_terms(fld, box)
    trace = fld.evaluate(grid.x, grid.y, [0.0])[:, :, 0]
    ux = _flat(grid.dx_matrix, u, grid)
    coupling = params.U * inner(ux, trace, grid)
    D = rep.bending + rep.Pi + 0.5 * grad2 - 0.5 * params.U**2 * dx2 + coupling
    return {
        "D": D,
        "bending": rep.bending,
        "Pi": rep.Pi,
        "flow_grad": grad2,
        "flow_dx": dx2,
        "coupling": coupling,
        "box": {"a": box.a, "zmax": box.zmax, "m1": box.m1, "m2": box.m2, "m3": box.m3},
    }


def attach_flow(pair: StationaryPair, U: float, box: FlowBox, grid: PlateGrid) -> StationaryPair:
    pair.phi_hat = solve_stationary_flow(pair.u_hat, U, box, grid)
    pair.box = box
    return pair


def linear_plate_solve(p0, grid: PlateGrid) -> np.ndarray:
    """Δ²u = p0 with clamped edges (sparse direct)."""
    rhs = np.broadcast_to(np.asarray(p0, dtype=float), grid.shape).ravel()
    return spsolve(grid.bilaplacian_matrix.tocsc(), rhs).reshape(grid.shape)


def write_box_field(path, values: np.ndarray, box: FlowBox, U: float) -> None:
    """Box samples under the header ``m1 m2 m3 a zmax U``, row-major."""
    values = np.asarray(values, dtype=float)
    if values.shape != (box.m1, box.m2, box.m3):
        raise ValueError(f"expected shape {(box.m1, box.m2, box.m3)}, got {values.shape}")
    lines = [f"{box.m1} {box.m2} {box.m3} {box.a!r} {box.zmax!r} {float(U)!r}"]
    lines.extend(f"{x:.17g}" for x in values.ravel())
    Path(path).write_text("\n".join(lines) + "\n")


def read_box_field(path) -> tuple[np.ndarray, FlowBox, float]:
    tokens = Path(path).read_text().split()
    m1, m2, m3 = (int(x) for x in tokens[:3])
    a, zmax, U = (float(x) for x in tokens[3:6])
    vals = np.array([float(x) for x in tokens[6:]])
    if vals.size != m1 * m2 * m3:
        raise ValueError(f"{path}: expected {m1 * m2 * m3} values, found {vals.size}")
    return vals.reshape(m1, m2, m3), FlowBox(a=a, zmax=zmax, m1=m1, m2=m2, m3=m3), U
