"""Empirical bracket for the smallest damping that makes every run settle.

The predicate at a damping value k is "every preset run converged by the
horizon".  It is a conjunction over data, so adding presets can only raise
the reported value.  The bracket is empirical and tied to grid, horizon,
tolerances and delay datum; it is not a bound for the continuous model.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..dynamics import simulate
from ..plate_core import l2_norm
from ..stationary import find_equilibria
from .config import ExperimentConfig
from .presets import KMIN_PRESETS, initial_state

BISECTION_STEPS = 8
WORKERS_ENV = "PANELFLOW_WORKERS"


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


@dataclass
class KminReport:
    k_lo: float
    k_hi: float
    k_min: float | None
    status: str  # "ok" or "bracket-invalid"
    presets: list
    verdicts: dict = field(default_factory=dict)  # k -> {preset: verdict}
    runs: list = field(default_factory=list)
    monotone: bool = True
    horizon: float = 0.0
    tolerances: dict = field(default_factory=dict)
    eta: str = "frozen"
    equilibria: int = 0

    @property
    def bracket(self) -> tuple[float, float]:
        return self.k_lo, self.k_hi

    def passed(self, k: float) -> bool:
        return all(v == "converged" for v in self.verdicts[k].values())

    def as_dict(self) -> dict:
        return {
            "status": self.status,
            "bracket": [self.k_lo, self.k_hi],
            "k_min_empirical": self.k_min,
            "presets": self.presets,
            "verdicts": [{"k": k, "all_converged": self.passed(k), "runs": v}
                         for k, v in sorted(self.verdicts.items())],
            "monotone": self.monotone,
            "horizon": self.horizon,
            "tolerances": self.tolerances,
            "delay_datum": self.eta,
            "equilibria_found": self.equilibria,
            "runs": self.runs,
            "note": "empirical bracket on this grid and horizon, not a bound for the continuous model",
        }


def _member(job):
    cfg, k, preset, eq = job
    grid = cfg.grid.build()
    params = replace(cfg.model, k=k)
    init = initial_state(preset, grid, cfg.amplitude, cfg.seed)
    rec = simulate(init, cfg.eta, params, grid, cfg.options.sample_every, equilibria=eq or None)
    fs = rec.final_state
    return {
        "k": k,
        "preset": preset,
        "verdict": rec.verdict,
        "final_time": fs.t,
        "ut_final": l2_norm(fs.v, grid),
        "dist_final": rec.dist_eq[-1] if eq else float("nan"),
        "wall_time": rec.wall_time,
    }


def _evaluate(cfg, ks, presets, eq, workers):
    jobs = [(cfg, k, p, eq) for k in ks for p in presets]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(_member, jobs))
    return [_member(j) for j in jobs]


def find_kmin(base: ExperimentConfig, k_lo: float, k_hi: float, n_data: int,
              workers: int | None = None) -> KminReport:
    """Bisect on k between ``k_lo`` and ``k_hi`` over the first ``n_data`` presets.

    Runs at ``k_hi`` first; if any preset fails there the report says
    ``bracket-invalid``.  If every preset already settles at ``k_lo`` the
    value reported is ``k_lo``.  Otherwise 8 bisection steps follow and
    k_min is the smallest tested value that passed.
    """
    if not k_lo < k_hi:
        raise ValueError(f"need k_lo < k_hi, got {k_lo} and {k_hi}")
    if not 1 <= n_data <= len(KMIN_PRESETS):
        raise ValueError(f"n_data must lie in 1..{len(KMIN_PRESETS)}")
    workers = worker_count() if workers is None else workers
    presets = list(KMIN_PRESETS[:n_data])
    grid = base.grid.build()
    eq = [m.u_hat for m in find_equilibria(base.model, grid)]
    report = KminReport(
        k_lo, k_hi, None, "ok", presets,
        horizon=base.model.T,
        tolerances={"tol_v": base.model.tol_v, "tol_r": base.model.tol_r},
        eta=base.eta,
        equilibria=len(eq),
    )

    def record(ks):
        for r in _evaluate(base, ks, presets, eq, workers):
            report.runs.append(r)
            report.verdicts.setdefault(r["k"], {})[r["preset"]] = r["verdict"]
        return [report.passed(k) for k in ks]

    if not record([k_hi])[0]:
        report.status = "bracket-invalid"
        return report
    if record([k_lo])[0]:
        report.k_min = k_lo  # no failing value found inside the bracket
        return report
    lo, hi = k_lo, k_hi
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if record([mid])[0]:
            hi = mid
        else:
            lo = mid
    report.k_lo, report.k_hi, report.k_min = lo, hi, hi
    tested = sorted(report.verdicts)
    flags = np.array([report.passed(k) for k in tested])
    # monotone means no failure above a success
    first_pass = int(np.argmax(flags)) if flags.any() else len(flags)
    report.monotone = bool(flags[first_pass:].all())
    return report
