"""Named initial displacements.

Every preset carries the clamped envelope x²(L1-x)²y²(L2-y)², so u and its
normal derivative vanish on the edge, and is scaled to unit peak.
"""
from __future__ import annotations

import numpy as np

from ..plate_core import PlateGrid, PlateState

KMIN_PRESETS = ("mode11", "skew", "random-smooth")


def _envelope(grid: PlateGrid) -> np.ndarray:
    X, Y = grid.mesh()
    return X**2 * (grid.L1 - X) ** 2 * Y**2 * (grid.L2 - Y) ** 2


def _unit_peak(f: np.ndarray) -> np.ndarray:
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def mode11(grid: PlateGrid) -> np.ndarray:
    return _unit_peak(_envelope(grid))


def skew(grid: PlateGrid) -> np.ndarray:
    """Bump pushed toward the leading edge and one side."""
    X, Y = grid.mesh()
    xc, yc = 0.3 * grid.L1, 0.65 * grid.L2
    width = 0.2 * min(grid.L1, grid.L2)
    bump = np.exp(-((X - xc) ** 2 + (Y - yc) ** 2) / (2 * width**2))
    return _unit_peak(_envelope(grid) * bump)


def random_smooth(grid: PlateGrid, seed: int, modes: int = 4) -> np.ndarray:
    """Low sine modes with Gaussian coefficients decaying like 1/(m² + n²)."""
    rng = np.random.default_rng(seed)
    X, Y = grid.mesh()
    field = np.zeros(grid.shape)
    for m in range(1, modes + 1):
        for n in range(1, modes + 1):
            a = rng.standard_normal() / (m * m + n * n)
            field += a * np.sin(m * np.pi * X / grid.L1) * np.sin(n * np.pi * Y / grid.L2)
    # offset keeps the mode-(1,1) content from cancelling out entirely
    return _unit_peak(_envelope(grid) * (1.0 + field / np.abs(field).max()))


def initial_field(name: str, grid: PlateGrid, amplitude: float = 1.0, seed: int = 0) -> np.ndarray:
    if name == "mode11":
        base = mode11(grid)
    elif name == "skew":
        base = skew(grid)
    elif name == "random-smooth":
        base = random_smooth(grid, seed)
    elif name == "zero":
        base = np.zeros(grid.shape)
    else:
        raise KeyError(f"unknown preset {name!r}")
    return amplitude * base


def initial_state(name: str, grid: PlateGrid, amplitude: float = 1.0, seed: int = 0) -> PlateState:
    u = initial_field(name, grid, amplitude, seed)
    return PlateState(u, np.zeros_like(u), 0.0)
