"""Flow-memory term of the reduced plate: horizon t*, history buffer, q and dq/dt.

The aerodynamic potential is

    q(x, t) = 1/(2π) ∫_0^{t*} ds ∫_0^{2π} dθ [M_θ² u]_ext(x - (U + sin θ)s, y - s cos θ, t - s),
    M_θ = sin θ ∂x + cos θ ∂y.

Second derivatives are taken on the grid, extended by zero and sampled at
the drifted points by bilinear interpolation.  For a fixed quadrature node
``(θ, s)`` the drift is the same for every grid point, so the resampling is
a discrete convolution with a four-tap kernel.  The time ``t - s`` is
resolved by linear interpolation between snapshots, so every node splits
its taps between two neighbouring snapshots.  Summing all taps that land on
the same snapshot gives one kernel per snapshot offset ("lattice kernel"),
applied with zero-padded FFTs against cached snapshot spectra.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.fft as sfft
from scipy.optimize import minimize_scalar

from .plate_core import (
    PlateGrid,
    PlateState,
    bending_norm_sq,
    grad_norm_sq,
    grad_laplacian_norm,
    l2_norm,
    read_field,
    second_derivatives,
    write_field,
)

TIME_TOL = 1e-9


# -- memory horizon ---------------------------------------------------------

def _exit_time(theta, U, L1, L2):
    d1 = U + np.sin(theta)
    d2 = np.cos(theta)
    return (L1 * np.abs(d1) + L2 * np.abs(d2)) / (d1 * d1 + d2 * d2)


def compute_tstar(grid: PlateGrid, U: float, n_scan: int = 4096) -> float:
    """Time after which every drifted copy of the rectangle has left it.

    For direction θ the drift velocity is ``d = (U + sin θ, cos θ)`` and a
    point crosses the whole rectangle after ``width(d)/|d|²`` where
    ``width(d) = L1|d1| + L2|d2|``.  The maximum over θ is found by a dense
    scan refined with a bounded scalar search.
    """
    if not 0 <= U < 1:
        raise ValueError(f"subsonic range 0 <= U < 1 required, got U={U}")
    L1, L2 = grid.L1, grid.L2
    theta = np.linspace(0.0, 2 * np.pi, n_scan, endpoint=False)
    # kinks of |d1|, |d2| are candidate maximizers too
    kinks = [np.pi / 2, 3 * np.pi / 2, math.asin(-U) % (2 * np.pi), (np.pi + math.asin(U)) % (2 * np.pi)]
    vals = _exit_time(theta, U, L1, L2)
    best = float(vals.max())
    step = 2 * np.pi / n_scan
    for i in np.argsort(vals)[-8:]:
        res = minimize_scalar(
            lambda th: -_exit_time(th, U, L1, L2),
            bounds=(theta[i] - step, theta[i] + step),
            method="bounded",
            options={"xatol": 1e-13},
        )
        best = max(best, -float(res.fun))
    for th in kinks:
        best = max(best, float(_exit_time(th, U, L1, L2)))
    return best


# -- quadrature and history --------------------------------------------------

@dataclass(frozen=True)
class QuadratureSpec:
    n_theta: int = 64
    n_s: int = 256

    def __post_init__(self):
        if self.n_theta < 16 or self.n_theta % 2:
            raise ValueError(f"n_theta must be even and >= 16, got {self.n_theta}")
        if self.n_s < 8:
            raise ValueError(f"n_s must be >= 8, got {self.n_s}")

    def refined(self, factor: int = 2) -> "QuadratureSpec":
        return QuadratureSpec(self.n_theta * factor, self.n_s * factor)

    @property
    def theta(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.n_theta) / self.n_theta

    def s_nodes(self, tstar: float) -> tuple[np.ndarray, np.ndarray]:
        s = np.linspace(0.0, tstar, self.n_s + 1)
        w = np.full(self.n_s + 1, tstar / self.n_s)
        w[[0, -1]] *= 0.5
        return s, w


class ImmatureHistoryError(ValueError):
    """The history does not cover the memory window requested."""


GUARD = 2  # boundary node plus one zero layer on each side


def _fft_shape(grid: PlateGrid) -> tuple[int, int]:
    # linear convolution of a width-w field with offsets |o| <= w - 1
    w1, w2 = grid.n1 + 2 * GUARD, grid.n2 + 2 * GUARD
    return (sfft.next_fast_len(2 * w1 - 1, real=True), sfft.next_fast_len(2 * w2 - 1, real=True))


def _interior(full: np.ndarray) -> np.ndarray:
    return full[..., GUARD:-GUARD, GUARD:-GUARD]


def m2_fields(f: np.ndarray, grid: PlateGrid) -> np.ndarray:
    """(f_xx, f_xy, f_yy) on the guarded grid, extended by zero outside Ω.

    The zero extension jumps at Γ wherever the normal second derivative is
    nonzero.  Boundary nodes carry the mean of the two one-sided limits
    (half the clamped one-sided value ``(8 f_1 - f_2)/(2h²)``), which makes
    bilinear sampling across the jump second-order accurate in integrals.
    Tangential and mixed derivatives vanish on the edges of a clamped field.
    """
    out = np.zeros((3, grid.n1 + 2 * GUARD, grid.n2 + 2 * GUARD))
    for c, d in enumerate(second_derivatives(f, grid)):
        _interior(out[c])[...] = d
    h1s, h2s = grid.h1**2, grid.h2**2
    b1, b2 = GUARD - 1, -GUARD
    out[0, b1, GUARD:-GUARD] = (8 * f[0] - f[1]) / (4 * h1s)
    out[0, b2, GUARD:-GUARD] = (8 * f[-1] - f[-2]) / (4 * h1s)
    out[2, GUARD:-GUARD, b1] = (8 * f[:, 0] - f[:, 1]) / (4 * h2s)
    out[2, GUARD:-GUARD, b2] = (8 * f[:, -1] - f[:, -2]) / (4 * h2s)
    return out


def extended(f: np.ndarray, grid: PlateGrid) -> np.ndarray:
    """A field vanishing on Γ, extended by zero onto the guarded grid."""
    out = np.zeros((grid.n1 + 2 * GUARD, grid.n2 + 2 * GUARD))
    _interior(out)[...] = f
    return out


def _dx(f, grid):
    return (grid.dx_matrix @ f.ravel()).reshape(grid.shape)


# name -> (fields from (u, v), component count, kernel family)
_CHANNELS = {
    "m2u": (lambda st, g: m2_fields(st[0], g), 3, "m2"),
    "m2v": (lambda st, g: m2_fields(st[1], g), 3, "m2"),
    "v0": (lambda st, g: extended(st[1], g)[None], 1, "one"),
    "ux0": (lambda st, g: extended(_dx(st[0], g), g)[None], 1, "one"),
}


class DelayHistory:
    """Uniformly spaced ring buffer of past plate fields.

    Snapshot ``k`` (absolute index) lives at time ``origin + k*dt``.  Spectra of
    derivative fields are computed lazily per slot and invalidated on write.
    """

    def __init__(self, grid: PlateGrid, tstar: float, dt: float, retain: float = 0.0):
        if dt <= 0:
            raise ValueError("dt must be positive")
        if retain < 0:
            raise ValueError("retain must be nonnegative")
        self.grid = grid
        self.tstar = float(tstar)
        self.dt = float(dt)
        self.retain = float(retain)  # extra past kept beyond the memory window
        self.capacity = int(math.ceil((self.tstar + self.retain) / self.dt)) + 6
        self._u = np.zeros((self.capacity, *grid.shape))
        self._v = np.zeros((self.capacity, *grid.shape))
        self._origin = None
        self._first = 0
        self._count = 0
        self._fft_shape = _fft_shape(grid)
        self._spectra: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    # -- construction ----------------------------------------------------
    @classmethod
    def from_datum(cls, grid, tstar, dt, initial: PlateState, eta="frozen", retain: float = 0.0):
        """History over ``[t0 - t* - retain, t0]`` ending at ``initial``.

        ``eta`` is ``"frozen"`` (u ≡ u0, v ≡ 0 before t0), ``"zero"``,
        ``"ramp"`` (linear growth from 0 at t0 - t* to u0), or a callable
        ``eta(s) -> (u, v)`` for ``s`` in ``[-t* - retain, 0)``.
        """
        hist = cls(grid, tstar, dt, retain)
        nback = int(math.ceil((tstar + retain) / dt - 1e-9))
        u0 = np.asarray(initial.u, dtype=float)
        for m in range(nback, 0, -1):
            s = -m * dt
            if callable(eta):
                u, v = eta(s)
            elif eta == "frozen":
                u, v = u0, np.zeros_like(u0)
            elif eta == "zero":
                u, v = np.zeros_like(u0), np.zeros_like(u0)
            elif eta == "ramp":
                frac = max(0.0, 1.0 + s / tstar)
                u, v = frac * u0, (u0 / tstar if frac > 0 else np.zeros_like(u0))
            else:
                raise ValueError(f"unknown delay datum {eta!r}")
            hist.push(PlateState(u, v, initial.t + s))
        hist.push(initial)
        return hist

    # -- bookkeeping -----------------------------------------------------
    def __len__(self):
        return self._count

    def time_of(self, k: int) -> float:
        return self._origin + k * self.dt

    @property
    def first_time(self) -> float:
        return self.time_of(self._first)

    @property
    def last_time(self) -> float:
        return self.time_of(self._first + self._count - 1)

    @property
    def times(self) -> np.ndarray:
        return self._origin + self.dt * np.arange(self._first, self._first + self._count)

    @property
    def span(self) -> float:
        return 0.0 if self._count == 0 else self.last_time - self.first_time

    def is_mature(self, t: float | None = None) -> bool:
        if self._count == 0:
            return False
        t = self.last_time if t is None else t
        tol = TIME_TOL * max(1.0, abs(t)) + 1e-12 * self.dt
        return t - self.tstar >= self.first_time - tol and t <= self.last_time + tol

    def require_mature(self, t: float) -> None:
        if not self.is_mature(t):
            raise ImmatureHistoryError(
                f"history covers [{self.first_time if self._count else float('nan'):.6g}, "
                f"{self.last_time if self._count else float('nan'):.6g}], "
                f"needs [{t - self.tstar:.6g}, {t:.6g}]"
            )

    def push(self, state: PlateState) -> "DelayHistory":
        if state.u.shape != self.grid.shape:
            raise ValueError("state does not match the history grid")
        if self._count == 0:
            self._origin = float(state.t)
            self._first = 0
            k = 0
        else:
            expected = self.last_time + self.dt
            if abs(state.t - expected) > 1e-12 * self.dt + TIME_TOL * abs(expected) * 1e-3:
                raise ValueError(
                    f"non-uniform push: got t={state.t!r}, expected {expected!r}"
                )
            k = self._first + self._count
            # keep everything newer than t - t* - 2dt
            cutoff = state.t - self.tstar - self.retain - 2 * self.dt
            while self._count and self.time_of(self._first) < cutoff - 1e-12 * self.dt:
                self._first += 1
                self._count -= 1
            if self._count >= self.capacity:
                raise RuntimeError("history capacity exceeded")
        self._write(k, state)
        self._count += 1
        return self

    def replace_last(self, state: PlateState) -> None:
        """Overwrite the newest snapshot (same time) with a new state."""
        if self._count == 0 or abs(state.t - self.last_time) > 1e-9 * self.dt:
            raise ValueError("replace_last needs a state at the newest snapshot time")
        self._write(self._first + self._count - 1, state)

    def pop_last(self) -> None:
        if self._count == 0:
            raise IndexError("empty history")
        self._count -= 1

    def _write(self, k, state):
        slot = k % self.capacity
        self._u[slot] = state.u
        self._v[slot] = state.v
        for _, valid in self._spectra.values():
            valid[slot] = False

    def snapshot(self, k: int) -> PlateState:
        """Snapshot by position in the buffer (0 = oldest, -1 = newest)."""
        if k < 0:
            k += self._count
        if not 0 <= k < self._count:
            raise IndexError(k)
        slot = (self._first + k) % self.capacity
        return PlateState(self._u[slot].copy(), self._v[slot].copy(), self.time_of(self._first + k))

    def latest(self) -> PlateState:
        return self.snapshot(-1)

    # -- time interpolation ---------------------------------------------
    def _locate(self, tau: np.ndarray):
        """Slots and weights for linear interpolation at times ``tau``."""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        pos = (tau - self._origin) / self.dt
        k = np.floor(pos + 1e-9).astype(np.int64)
        lam = pos - k
        lam[np.abs(lam) < 1e-9] = 0.0
        last = self._first + self._count - 1
        at_end = k >= last
        k[at_end] = last
        lam[at_end] = 0.0
        if np.any(k < self._first) or np.any(lam < -1e-9):
            raise ImmatureHistoryError("requested time precedes the stored history")
        lam = np.clip(lam, 0.0, 1.0)
        k_hi = np.minimum(k + 1, last)
        return k % self.capacity, k_hi % self.capacity, lam

    def _rate_slots(self, tau: np.ndarray):
        """Slots bounding the snapshot interval used for ∂τ at ``tau`` (newest time: backward)."""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        k = np.floor((tau - self._origin) / self.dt + 1e-9).astype(np.int64)
        k = np.clip(k, self._first, self._first + self._count - 2)
        return k % self.capacity, (k + 1) % self.capacity

    def field_at(self, tau: float, which: str = "u") -> np.ndarray:
        lo, hi, lam = self._locate(np.array([tau]))
        arr = self._u if which == "u" else self._v
        return (1 - lam[0]) * arr[lo[0]] + lam[0] * arr[hi[0]]

    def fields_at(self, taus, which: str = "u") -> np.ndarray:
        lo, hi, lam = self._locate(taus)
        arr = self._u if which == "u" else self._v
        return (1 - lam)[:, None, None] * arr[lo] + lam[:, None, None] * arr[hi]

    def spectra(self, channel: str, slots: np.ndarray) -> np.ndarray:
        func, ncomp, _ = _CHANNELS[channel]
        if channel not in self._spectra:
            M1, M2 = self._fft_shape
            self._spectra[channel] = (
                np.zeros((self.capacity, ncomp, M1, M2 // 2 + 1), dtype=complex),
                np.zeros(self.capacity, dtype=bool),
            )
        store, valid = self._spectra[channel]
        need = np.unique(slots[~valid[slots]])
        for slot in need:
            fields = func((self._u[slot], self._v[slot]), self.grid)
            store[slot] = sfft.rfft2(fields, s=self._fft_shape)
            valid[slot] = True
        return store


def push_snapshot(hist: DelayHistory, state: PlateState) -> DelayHistory:
    return hist.push(state)


HISTORY_INDEX = "index.txt"


def dump_history(hist: DelayHistory, directory) -> Path:
    """Write every snapshot as u/v field files plus an index of times."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"tstar {hist.tstar!r}", f"dt {hist.dt!r}", f"retain {hist.retain!r}"]
    for k, t in enumerate(hist.times):
        st = hist.snapshot(k)
        write_field(out / f"u_{k:05d}.txt", st.u, hist.grid, t)
        write_field(out / f"v_{k:05d}.txt", st.v, hist.grid, t)
        lines.append(f"{k:05d} {float(t):.17g}")
    (out / HISTORY_INDEX).write_text("\n".join(lines) + "\n")
    return out


def load_history(directory) -> DelayHistory:
    src = Path(directory)
    rows = (src / HISTORY_INDEX).read_text().split("\n")
    meta = dict(r.split() for r in rows[:3])
    entries = [r.split() for r in rows[3:] if r.strip()]
    if not entries:
        raise ValueError(f"{src}: history index lists no snapshots")
    hist = None
    for tag, t in entries:
        u, grid, _ = read_field(src / f"u_{tag}.txt")
        v, _, _ = read_field(src / f"v_{tag}.txt")
        if hist is None:
            hist = DelayHistory(grid, float(meta["tstar"]), float(meta["dt"]), float(meta["retain"]))
        hist.push(PlateState(u, v, float(t)))
    return hist




# -- convolution kernels -----------------------------------------------------
#
# Output node i reads the zero-extended field at i + δ (grid units).  With
# δ = i0 + f the bilinear sample is (1-f)·F[i+i0] + f·F[i+i0+1], i.e. a
# convolution out = K ⊛ F with K[-i0] += 1-f and K[-i0-1] += f.

def _channel_weights(theta: np.ndarray, U: float, family: str) -> np.ndarray:
    s, c = np.sin(theta), np.cos(theta)
    base = np.stack([s * s, 2 * s * c, c * c])
    if family == "m2":
        return base
    if family == "m2drift":
        return np.concatenate([(U + s) * base, c * base])
    if family == "one":
        return np.ones((1, theta.size))
    if family == "drift1":
        # (U + sin θ)∂x + cos θ ∂y of the interpolant, as x- and y-tap weights
        return np.stack([U + s, c])
    raise KeyError(family)


# families whose weights come as (x-derivative rows, y-derivative rows)
_DRIFT_FAMILIES = ("m2drift", "drift1")


class _TapAccumulator:
    """Real-space kernel taps on offsets ``|o| <= W - 1`` for several blocks."""

    def __init__(self, grid: PlateGrid, nblocks: int, ncomp: int):
        self.W1 = grid.n1 + 2 * GUARD
        self.W2 = grid.n2 + 2 * GUARD
        self.grid = grid
        self.nblocks = nblocks
        self.ncomp = ncomp
        self.data = np.zeros((nblocks, ncomp, 2 * self.W1 - 1, 2 * self.W2 - 1))

    def add(self, blocks, d1, d2, weights, deriv: str = ""):
        """Bilinear taps for drifts ``(d1, d2)`` (physical units).

        ``blocks`` and ``d1, d2`` are 1-D of equal length; ``weights`` has
        shape ``(ncomp, len(d1))``.  With ``deriv`` = "x" or "y" the taps
        give that derivative of the bilinear interpolant instead of its value.
        """
        g = self.grid
        p1 = -np.asarray(d1) / g.h1
        p2 = -np.asarray(d2) / g.h2
        i1 = np.floor(p1).astype(np.int64)
        i2 = np.floor(p2).astype(np.int64)
        f1, f2 = p1 - i1, p2 - i2
        if deriv == "x":
            x_taps = ((0, -np.ones_like(f1) / g.h1), (1, np.ones_like(f1) / g.h1))
        else:
            x_taps = ((0, 1 - f1), (1, f1))
        if deriv == "y":
            y_taps = ((0, -np.ones_like(f2) / g.h2), (1, np.ones_like(f2) / g.h2))
        else:
            y_taps = ((0, 1 - f2), (1, f2))
        flat = self.data.reshape(self.nblocks, self.ncomp, -1)
        span2 = 2 * self.W2 - 1
        for a1, w1 in x_taps:
            for a2, w2 in y_taps:
                o1 = -(i1 + a1)
                o2 = -(i2 + a2)
                keep = (np.abs(o1) < self.W1) & (np.abs(o2) < self.W2)
                if not keep.any():
                    continue
                idx = (o1[keep] + self.W1 - 1) * span2 + (o2[keep] + self.W2 - 1)
                tw = (w1 * w2)[keep]
                b = np.asarray(blocks)[keep]
                for c in range(self.ncomp):
                    np.add.at(flat[:, c], (b, idx), weights[c][keep] * tw)

    def spectra(self, fft_shape) -> np.ndarray:
        M1, M2 = fft_shape
        out = np.empty((self.nblocks, self.ncomp, M1, M2 // 2 + 1), dtype=complex)
        r1 = np.arange(-(self.W1 - 1), self.W1) % M1
        r2 = np.arange(-(self.W2 - 1), self.W2) % M2
        buf = np.zeros((self.ncomp, M1, M2))
        for b in range(self.nblocks):
            buf[:] = 0.0
            buf[:, r1[:, None], r2[None, :]] = self.data[b]
            out[b] = sfft.rfft2(buf)
        return out


@dataclass(frozen=True)
class LatticeKernel:
    """Delay kernel folded onto the snapshot lattice.

    Block ``m`` multiplies the snapshot ``m`` steps before the anchor
    snapshot; the evaluation time is ``anchor_time - phase*dt``.
    """

    spectra: np.ndarray  # (n_offsets, ncomp, M1, M2//2+1)
    dt: float
    phase: float
    channel_kind: str

    @property
    def n_offsets(self) -> int:
        return self.spectra.shape[0]


class DelayKernel:
    """Quadrature of the memory integral for one grid, Mach number and quadrature rule."""

    def __init__(self, grid: PlateGrid, U: float, quad: QuadratureSpec, tstar: float | None = None):
        self.grid = grid
        self.U = float(U)
        self.quad = quad
        self.tstar = compute_tstar(grid, U) if tstar is None else float(tstar)
        self.fft_shape = _fft_shape(grid)
        self._lattices: dict = {}
        self._frozen_hat = None
        self._frozen_matrix = None

    # -- kernel construction ----------------------------------------------
    def _nodes(self, family: str):
        th = self.quad.theta
        s, ws = self.quad.s_nodes(self.tstar)
        T, S = np.meshgrid(th, s, indexing="ij")
        W = np.broadcast_to(ws, T.shape)
        cw = _channel_weights(th, self.U, family) / self.quad.n_theta
        cw = np.repeat(cw[:, :, None], len(s), axis=2)
        d1 = (self.U + np.sin(T)) * S
        d2 = np.cos(T) * S
        return S.ravel(), d1.ravel(), d2.ravel(), (cw * W[None]).reshape(cw.shape[0], -1)

    def lattice(self, dt: float, phase: float = 0.0, channel: str = "m2u", family: str | None = None) -> LatticeKernel:
        kind = family or _CHANNELS[channel][2]
        key = (round(dt / 1e-15), round(phase * 1e12), kind)
        lat = self._lattices.get(key)
        if lat is not None:
            return lat
        if not 0.0 <= phase < 1.0:
            raise ValueError("phase must lie in [0, 1)")
        s, d1, d2, w = self._nodes(kind)
        pos = phase + s / dt
        m = np.floor(pos + 1e-9).astype(np.int64)
        lam = np.clip(pos - m, 0.0, 1.0)
        nblocks = int(m.max()) + 2
        nz = lam > 0
        if kind in _DRIFT_FAMILIES:
            half = w.shape[0] // 2
            parts = [("x", w[:half]), ("y", w[half:])]
        else:
            half = w.shape[0]
            parts = [("", w)]
        acc = _TapAccumulator(self.grid, nblocks, half)
        for deriv, ww in parts:
            acc.add(m, d1, d2, ww * (1 - lam), deriv)
            acc.add(m[nz] + 1, d1[nz], d2[nz], ww[:, nz] * lam[nz], deriv)
        spec = acc.spectra(self.fft_shape)
        # drop trailing empty blocks
        used = np.flatnonzero(np.abs(acc.data).reshape(nblocks, -1).max(axis=1) > 0)
        spec = spec[: (used.max() + 1 if used.size else 1)]
        lat = LatticeKernel(spec, float(dt), float(phase), kind)
        if len(self._lattices) > 16:
            self._lattices.pop(next(iter(self._lattices)))
        self._lattices[key] = lat
        return lat

    def _single_s(self, s_value: float, family: str = "m2") -> np.ndarray:
        """Spectrum of the θ-averaged kernel at one fixed ``s``."""
        th = self.quad.theta
        cw = _channel_weights(th, self.U, family) / self.quad.n_theta
        acc = _TapAccumulator(self.grid, 1, cw.shape[0])
        acc.add(np.zeros(th.size, dtype=np.int64), (self.U + np.sin(th)) * s_value, np.cos(th) * s_value, cw)
        return acc.spectra(self.fft_shape)[0]

    @property
    def frozen_hat(self) -> np.ndarray:
        if self._frozen_hat is None:
            s, d1, d2, w = self._nodes("m2")
            acc = _TapAccumulator(self.grid, 1, 3)
            acc.add(np.zeros(s.size, dtype=np.int64), d1, d2, w)
            self._frozen_hat = acc.spectra(self.fft_shape)[0]
        return self._frozen_hat

    # -- evaluation ----------------------------------------------------------
    def to_guarded(self, acc_hat: np.ndarray) -> np.ndarray:
        """Convolution output on the whole guarded grid."""
        full = sfft.irfft2(acc_hat, s=self.fft_shape)
        return full[: self.grid.n1 + 2 * GUARD, : self.grid.n2 + 2 * GUARD]

    def end_average(self, f_ext: np.ndarray) -> np.ndarray:
        """θ-average of a guarded field sampled at the drift of s = t*."""
        return self._to_field(np.einsum("cab,cab->ab", self._single_s(self.tstar, "one"),
                                        sfft.rfft2(f_ext[None], s=self.fft_shape)))

    def _to_field(self, acc_hat: np.ndarray) -> np.ndarray:
        full = sfft.irfft2(acc_hat, s=self.fft_shape)
        return full[GUARD : GUARD + self.grid.n1, GUARD : GUARD + self.grid.n2]

    def _apply_fields(self, kernel_hat: np.ndarray, fields: np.ndarray) -> np.ndarray:
        fh = sfft.rfft2(fields, s=self.fft_shape)
        return np.einsum("cab,cab->ab", kernel_hat, fh)

    def _anchor(self, hist: DelayHistory, t: float):
        pos = (t - hist._origin) / hist.dt
        k = int(math.ceil(pos - 1e-9))
        phase = k - pos
        if abs(phase) < 1e-9:
            phase = 0.0
        return k, phase

    def history_sum_hat(self, hist: DelayHistory, t: float, channel: str = "m2u", skip: int = 0,
                        family: str | None = None) -> np.ndarray:
        """Fourier-space memory sum at time ``t`` over lattice blocks ``>= skip``."""
        if not math.isclose(hist.tstar, self.tstar, rel_tol=1e-12):
            raise ValueError("history horizon does not match the kernel")
        k, phase = self._anchor(hist, t)
        lat = self.lattice(hist.dt, phase, channel, family)
        last = hist._first + hist._count - 1
        nb = lat.n_offsets
        lo_abs = k - (nb - 1)
        hi_abs = k - skip
        if hi_abs > last:
            raise ImmatureHistoryError(f"time {t:.6g} is beyond the newest snapshot")
        if lo_abs < hist._first:
            hist.require_mature(t)
            raise ImmatureHistoryError(
                f"history starts at {hist.first_time:.6g}, memory at t={t:.6g} reaches {hist.time_of(lo_abs):.6g}"
            )
        total = np.zeros(lat.spectra.shape[-2:], dtype=complex)
        if hi_abs < lo_abs:
            return total
        abs_idx = np.arange(hi_abs, lo_abs - 1, -1)  # block skip, skip+1, ...
        slots = abs_idx % hist.capacity
        store = hist.spectra(channel, slots)
        blocks = lat.spectra[skip:]
        # slots run backwards through the ring; split into contiguous runs
        breaks = np.flatnonzero(np.diff(slots) != -1) + 1
        start = 0
        for stop in list(breaks) + [len(slots)]:
            s0, s1 = slots[start], slots[stop - 1]
            view = store[s1 : s0 + 1][::-1]
            total += np.einsum("mcab,mcab->ab", blocks[start:stop], view)
            start = stop
        return total

    def q(self, hist: DelayHistory, t: float) -> np.ndarray:
        return self._to_field(self.history_sum_hat(hist, t, "m2u"))

    def q_velocity(self, hist: DelayHistory, t: float) -> np.ndarray:
        return self._to_field(self.history_sum_hat(hist, t, "m2v"))

    def head(self, dt: float, u: np.ndarray) -> np.ndarray:
        """Contribution of a snapshot placed exactly at the evaluation time."""
        lat = self.lattice(dt, 0.0, "m2u")
        return self._to_field(self._apply_fields(lat.spectra[0], m2_fields(u, self.grid)))

    def apply_frozen(self, u: np.ndarray) -> np.ndarray:
        """q for a history frozen at ``u`` (the stationary delay operator)."""
        return self._to_field(self._apply_fields(self.frozen_hat, m2_fields(u, self.grid)))

    def frozen_matrix(self) -> np.ndarray:
        if self._frozen_matrix is None:
            n = self.grid.size
            cols = np.empty((n, n))
            e = np.zeros(n)
            for j in range(n):
                e[j] = 1.0
                cols[:, j] = self.apply_frozen(e.reshape(self.grid.shape)).ravel()
                e[j] = 0.0
            self._frozen_matrix = cols
        return self._frozen_matrix

    def local_term(self, u: np.ndarray) -> np.ndarray:
        """θ-average of M²_θ u at s = 0."""
        return self._to_field(self._apply_fields(self._single_s(0.0), m2_fields(u, self.grid)))

    def q_dt_four_term(self, hist: DelayHistory, t: float) -> np.ndarray:
        """dq/dt from the boundary-in-s terms and the two drift integrals.

        d/dt of the integrand equals -d/ds minus the drift derivative, so
        dq/dt = [M²u](t) - [M²u]_ext(· - d t*, t - t*) - ∫∫ d·∇[M²u]_ext.
        """
        now = hist.field_at(t, "u")
        past = hist.field_at(t - self.tstar, "u")
        end = self._to_field(self._apply_fields(self._single_s(self.tstar), m2_fields(past, self.grid)))
        drift = self._to_field(self.history_sum_hat(hist, t, "m2u", family="m2drift"))
        return self.local_term(now) - end - drift


@lru_cache(maxsize=16)
def get_kernel(grid: PlateGrid, U: float, quad: QuadratureSpec) -> DelayKernel:
    return DelayKernel(grid, U, quad)


def eval_q(hist: DelayHistory, t: float, U: float, quad: QuadratureSpec, grid: PlateGrid) -> np.ndarray:
    """Aerodynamic delay potential q at time ``t``."""
    return get_kernel(grid, U, quad).q(hist, t)


def eval_q_dt(hist: DelayHistory, t: float, U: float, quad: QuadratureSpec, grid: PlateGrid) -> np.ndarray:
    """Time derivative of q, evaluated as q applied to the velocity history.

    q is linear and its kernel does not depend on t, so this is the exact
    derivative of the discrete quadrature.
    """
    return get_kernel(grid, U, quad).q_velocity(hist, t)


def eval_q_dt_four_term(hist, t, U, quad, grid) -> np.ndarray:
    return get_kernel(grid, U, quad).q_dt_four_term(hist, t)


# -- delay estimates ----------------------------------------------------------

@dataclass(frozen=True)
class DelayBoundRatios:
    q_norm: float
    lower_integral: float
    ratio: float
    q_h1_norm: float  # ||∇q||-type left side for the higher estimate
    upper_integral: float
    ratio_star: float


def _ratio(a: float, b: float) -> float:
    if b == 0.0:
        return float("nan") if a == 0.0 else float("inf")
    return a / b


def _window_integral(hist: DelayHistory, t: float, func) -> float:
    taus = hist.times
    mask = (taus >= t - hist.tstar - 1e-9 * hist.dt) & (taus <= t + 1e-9 * hist.dt)
    taus = taus[mask]
    vals = np.array([func(hist.field_at(tau, "u")) for tau in taus])
    if taus.size < 2:
        return 0.0
    return float(np.trapezoid(vals, taus)) if hasattr(np, "trapezoid") else float(np.trapz(vals, taus))


def delay_bound_ratios(hist: DelayHistory, t: float, U: float, grid: PlateGrid,
                       quad: QuadratureSpec | None = None) -> DelayBoundRatios:
    """Both sides of the two delay estimates and their ratios.

    First: ||q(t)|| against t*·∫||Δu||.  Second: ||q(t)||_{H¹} against
    t*·∫||u||₃ with the discrete surrogate ||∇Δu|| for the H³ norm.  A 0/0
    ratio is reported as nan.
    """
    quad = quad or QuadratureSpec()
    hist.require_mature(t)
    q = eval_q(hist, t, U, quad, grid)
    qn = l2_norm(q, grid)
    q1 = math.sqrt(qn**2 + grad_norm_sq(q, grid))
    lower = hist.tstar * _window_integral(hist, t, lambda f: math.sqrt(bending_norm_sq(f, grid)))
    upper = hist.tstar * _window_integral(hist, t, lambda f: grad_laplacian_norm(f, grid))
    return DelayBoundRatios(qn, lower, _ratio(qn, lower), q1, upper, _ratio(q1, upper))
