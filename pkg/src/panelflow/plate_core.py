"""Clamped rectangular plate: grid, finite-difference operators, Berger force, energies.

Fields live on the interior nodes of a uniform grid and are stored as
``(n1, n2)`` arrays indexed ``[i, j] -> (x_{i+1}, y_{j+1})``; flattening is
row-major.  Boundary nodes carry ``u = 0`` and the clamped condition
``du/dn = 0`` enters through the mirror ghost ``u(-h) = u(h)``.

Discrete norms use trapezoid weights over the full grid.  With this choice
the bending energy is an exact quadratic form of the 13-point operator:

    ||Δu||² = h1 h2 uᵀ A u,    ||∇u||² = -h1 h2 uᵀ L u,

where ``A`` is the clamped bilaplacian and ``L`` the 5-point Dirichlet
Laplacian.  The Berger force ``[b - ||∇u||²] L u`` is then the exact
gradient of the discrete potential, which keeps energy identities tight.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

MIN_NODES = 8


@dataclass(frozen=True)
class PlateGrid:
    L1: float
    L2: float
    n1: int
    n2: int

    def __post_init__(self):
        if not (self.L1 > 0 and self.L2 > 0):
            raise ValueError(f"side lengths must be positive, got {self.L1}, {self.L2}")
        if self.n1 < MIN_NODES or self.n2 < MIN_NODES:
            raise ValueError(
                f"need at least {MIN_NODES} interior nodes per axis, got {self.n1}x{self.n2}"
            )

    @property
    def h1(self) -> float:
        return self.L1 / (self.n1 + 1)

    @property
    def h2(self) -> float:
        return self.L2 / (self.n2 + 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n1, self.n2)

    @property
    def size(self) -> int:
        return self.n1 * self.n2

    @property
    def cell_area(self) -> float:
        return self.h1 * self.h2

    @property
    def x(self) -> np.ndarray:
        return self.h1 * np.arange(1, self.n1 + 1)

    @property
    def y(self) -> np.ndarray:
        return self.h2 * np.arange(1, self.n2 + 1)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y, indexing="ij")

    def sample(self, func) -> np.ndarray:
        """Evaluate ``func(X, Y)`` on the interior nodes."""
        X, Y = self.mesh()
        return np.asarray(func(X, Y), dtype=float)

    # -- sparse operators -------------------------------------------------
    @cached_property
    def _d2(self):
        return _second_diff(self.n1, self.h1), _second_diff(self.n2, self.h2)

    @cached_property
    def laplacian_matrix(self) -> sp.csr_matrix:
        d1, d2 = self._d2
        return (sp.kron(d1, sp.identity(self.n2)) + sp.kron(sp.identity(self.n1), d2)).tocsr()

    @cached_property
    def bilaplacian_matrix(self) -> sp.csr_matrix:
        d1, d2 = self._d2
        c1 = _clamped_fourth_diff(self.n1, self.h1)
        c2 = _clamped_fourth_diff(self.n2, self.h2)
        A = (
            sp.kron(c1, sp.identity(self.n2))
            + 2.0 * sp.kron(d1, d2)
            + sp.kron(sp.identity(self.n1), c2)
        )
        return A.tocsr()

    @cached_property
    def dx_matrix(self) -> sp.csr_matrix:
        return sp.kron(_first_diff(self.n1, self.h1), sp.identity(self.n2)).tocsr()

    @cached_property
    def dy_matrix(self) -> sp.csr_matrix:
        return sp.kron(sp.identity(self.n1), _first_diff(self.n2, self.h2)).tocsr()

    @cached_property
    def dxy_matrix(self) -> sp.csr_matrix:
        return sp.kron(_first_diff(self.n1, self.h1), _first_diff(self.n2, self.h2)).tocsr()


def _second_diff(n, h):
    e = np.ones(n)
    return sp.diags([e[:-1], -2 * e, e[:-1]], [-1, 0, 1]) / h**2


def _first_diff(n, h):
    e = np.ones(n - 1)
    return sp.diags([-e, e], [-1, 1]) / (2 * h)


def _clamped_fourth_diff(n, h):
    # (u_{i-2} - 4u_{i-1} + 6u_i - 4u_{i+1} + u_{i+2})/h^4 with u_0 = 0 and ghost u_{-1} = u_1
    d2 = _second_diff(n, h)
    c = (d2 @ d2).tolil()
    c[0, 0] += 2.0 / h**4
    c[n - 1, n - 1] += 2.0 / h**4
    return c.tocsr()


def build_grid(L1: float, L2: float, n1: int, n2: int) -> PlateGrid:
    return PlateGrid(float(L1), float(L2), int(n1), int(n2))


@dataclass
class PlateState:
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.u.shape != self.v.shape:
            raise ValueError(f"u {self.u.shape} and v {self.v.shape} differ in shape")

    @classmethod
    def zeros(cls, grid: PlateGrid, t: float = 0.0) -> "PlateState":
        return cls(np.zeros(grid.shape), np.zeros(grid.shape), t)

    def copy(self) -> "PlateState":
        return PlateState(self.u.copy(), self.v.copy(), self.t)


@dataclass(frozen=True)
class EnergyReport:
    kinetic: float
    bending: float
    Pi: float
    Pi_star: float
    E_pl: float
    E_star: float


# -- operators ------------------------------------------------------------

_KINDS = ("laplacian", "bilaplacian", "dx", "dy", "dxy")


def _check_field(f, grid):
    f = np.asarray(f, dtype=float)
    if f.shape != grid.shape:
        raise ValueError(f"field shape {f.shape} does not match grid {grid.shape}")
    return f


def apply_operator(kind: str, f, grid: PlateGrid) -> np.ndarray:
    """Apply a second-order centered difference operator on interior nodes.

    ``bilaplacian`` uses the clamped ghost extension; every other kind
    extends ``f`` by zero across the boundary.
    """
    mats = {
        "laplacian": "laplacian_matrix",
        "bilaplacian": "bilaplacian_matrix",
        "dx": "dx_matrix",
        "dy": "dy_matrix",
        "dxy": "dxy_matrix",
    }
    if kind not in mats:
        raise ValueError(f"unknown operator kind {kind!r}; expected one of {_KINDS}")
    f = _check_field(f, grid)
    M = getattr(grid, mats[kind])
    return (M @ f.ravel()).reshape(grid.shape)


def second_derivatives(f, grid: PlateGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(f_xx, f_xy, f_yy) on interior nodes with zero Dirichlet extension."""
    p = np.pad(f, 1)
    h1, h2 = grid.h1, grid.h2
    fxx = (p[2:, 1:-1] - 2 * p[1:-1, 1:-1] + p[:-2, 1:-1]) / h1**2
    fyy = (p[1:-1, 2:] - 2 * p[1:-1, 1:-1] + p[1:-1, :-2]) / h2**2
    fxy = (p[2:, 2:] - p[2:, :-2] - p[:-2, 2:] + p[:-2, :-2]) / (4 * h1 * h2)
    return fxx, fxy, fyy


def first_derivatives(f, grid: PlateGrid) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(f, 1)
    fx = (p[2:, 1:-1] - p[:-2, 1:-1]) / (2 * grid.h1)
    fy = (p[1:-1, 2:] - p[1:-1, :-2]) / (2 * grid.h2)
    return fx, fy


def inner(f, g, grid: PlateGrid) -> float:
    return float(grid.cell_area * np.vdot(f, g))


def l2_norm(f, grid: PlateGrid) -> float:
    return float(np.sqrt(grid.cell_area * np.vdot(f, f)))


def laplacian(f, grid: PlateGrid) -> np.ndarray:
    return apply_operator("laplacian", f, grid)


def grad_norm_sq(u, grid: PlateGrid) -> float:
    """||∇u||² from one-sided differences over every cell edge."""
    p = np.pad(u, 1)
    gx = np.diff(p, axis=0)[:, 1:-1] / grid.h1
    gy = np.diff(p, axis=1)[1:-1, :] / grid.h2
    return float(grid.cell_area * (np.sum(gx * gx) + np.sum(gy * gy)))


def bending_norm_sq(u, grid: PlateGrid) -> float:
    """||Δu||² with the clamped trapezoid convention (= h1 h2 uᵀAu)."""
    lap = clamped_laplacian_full(u, grid)
    w = trapezoid_weights(grid)
    return float(grid.cell_area * np.sum(w * lap * lap))


def trapezoid_weights(grid: PlateGrid) -> np.ndarray:
    wx = np.ones(grid.n1 + 2)
    wx[[0, -1]] = 0.5
    wy = np.ones(grid.n2 + 2)
    wy[[0, -1]] = 0.5
    return np.outer(wx, wy)


def clamped_laplacian_full(u, grid: PlateGrid) -> np.ndarray:
    """Laplacian on the full ``(n1+2, n2+2)`` grid using mirror ghosts.

    Edge values reduce to ``2 u_1 / h²`` (the normal second derivative);
    corners vanish.
    """
    u = _check_field(u, grid)
    out = np.zeros((grid.n1 + 2, grid.n2 + 2))
    out[1:-1, 1:-1] = laplacian(u, grid)
    out[0, 1:-1] = 2 * u[0, :] / grid.h1**2
    out[-1, 1:-1] = 2 * u[-1, :] / grid.h1**2
    out[1:-1, 0] = 2 * u[:, 0] / grid.h2**2
    out[1:-1, -1] = 2 * u[:, -1] / grid.h2**2
    return out


def grad_laplacian_norm(u, grid: PlateGrid) -> float:
    """||∇Δu||, the discrete surrogate used for the H³ norm."""
    lap = clamped_laplacian_full(u, grid)
    gx = np.diff(lap, axis=0) / grid.h1
    gy = np.diff(lap, axis=1) / grid.h2
    # edges along the boundary lines carry half weight
    gx[:, [0, -1]] *= np.sqrt(0.5)
    gy[[0, -1], :] *= np.sqrt(0.5)
    return float(np.sqrt(grid.cell_area * (np.sum(gx * gx) + np.sum(gy * gy))))


def h2_surrogate_sq(u, grid: PlateGrid) -> float:
    """||Δu||² + ||u||², the discrete H² surrogate."""
    return bending_norm_sq(u, grid) + l2_norm(u, grid) ** 2


def berger_force(state: PlateState, b: float, grid: PlateGrid) -> np.ndarray:
    """f_B(u) = [b - ||∇u||²] Δu."""
    u = _check_field(state.u, grid)
    if b < 0:
        warnings.warn("b < 0 is the dissipative regime; results outside b >= 0 are untested",
                      stacklevel=2)
    return (b - grad_norm_sq(u, grid)) * laplacian(u, grid)


def plate_energy(state: PlateState, b: float, p0, grid: PlateGrid) -> EnergyReport:
    u = _check_field(state.u, grid)
    v = _check_field(state.v, grid)
    p0 = np.broadcast_to(np.asarray(p0, dtype=float), grid.shape)
    g2 = grad_norm_sq(u, grid)
    kinetic = 0.5 * l2_norm(v, grid) ** 2
    bending = 0.5 * bending_norm_sq(u, grid)
    pi_star = 0.25 * g2 * g2
    pi = pi_star - 0.5 * b * g2 - inner(p0, u, grid)
    return EnergyReport(
        kinetic=kinetic,
        bending=bending,
        Pi=pi,
        Pi_star=pi_star,
        E_pl=kinetic + bending + pi,
        E_star=kinetic + bending + pi_star,
    )


# -- field snapshot files -------------------------------------------------

def write_field(path, f, grid: PlateGrid, t: float = 0.0) -> None:
    f = _check_field(f, grid)
    lines = [f"{grid.n1} {grid.n2} {grid.L1!r} {grid.L2!r} {float(t)!r}"]
    lines.extend(f"{x:.17g}" for x in f.ravel())
    Path(path).write_text("\n".join(lines) + "\n")


def read_field(path) -> tuple[np.ndarray, PlateGrid, float]:
    tokens = Path(path).read_text().split()
    if len(tokens) < 5:
        raise ValueError(f"{path}: missing header 'n1 n2 L1 L2 t'")
    n1, n2 = int(tokens[0]), int(tokens[1])
    L1, L2, t = float(tokens[2]), float(tokens[3]), float(tokens[4])
    values = np.array([float(s) for s in tokens[5:]])
    if values.size != n1 * n2:
        raise ValueError(f"{path}: expected {n1 * n2} values, found {values.size}")
    grid = build_grid(L1, L2, n1, n2)
    return values.reshape(n1, n2), grid, t
