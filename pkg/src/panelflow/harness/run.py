"""Experiment dispatch: each pipeline writes CSV/JSON/field files and returns an exit status."""
from __future__ import annotations

import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..aero_delay import dump_history
from ..dynamics import CSV_COLUMNS, fit_log_slope, hadamard_probe, simulate, simulate_decomposed
from ..flow_reconstruct import (
    LocalEnergyBall,
    local_flow_energy,
    read_points,
    sample_ball,
    sample_flow,
    write_flow_samples,
)
from ..plate_core import write_field
from ..stationary import (
    FlowBox,
    buckling_load,
    continuation,
    find_equilibria,
    potential_D,
    solve_stationary_flow,
    write_box_field,
)
from .config import ExperimentConfig, config_comment_block, serialize_config
from .kmin import find_kmin
from .presets import initial_state
from .records import write_csv, write_json
from .verify import CHECK_COLUMNS, run_to, verify_suite

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_TIMEOUT = 3

_VERDICT_EXIT = {"converged": EXIT_OK, "completed": EXIT_OK, "timeout": EXIT_TIMEOUT}


def verdict_status(verdict: str) -> int:
    return _VERDICT_EXIT.get(verdict, EXIT_FAILED)


class _Run:
    """Output directory bound to one config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.grid = cfg.grid.build()
        self.out = Path(cfg.output)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.txt").write_text(serialize_config(cfg))

    @property
    def preamble(self) -> str:
        return config_comment_block(self.cfg)

    def summary(self, name: str, verdict: str, body: dict) -> int:
        doc = {"experiment": self.cfg.experiment, "verdict": verdict, **body, "config": self.cfg.echo()}
        write_json(self.out / name, doc)
        return verdict_status(verdict)

    def initial(self):
        return initial_state(self.cfg.initial, self.grid, self.cfg.amplitude, self.cfg.seed)

    def equilibria(self):
        return find_equilibria(self.cfg.model, self.grid)


def _simulate(run: _Run, **_) -> int:
    cfg, grid = run.cfg, run.grid
    eq = run.equilibria()
    rec = simulate(run.initial(), cfg.eta, cfg.model, grid, cfg.options.sample_every,
                   equilibria=[m.u_hat for m in eq] or None)
    write_csv(run.out / "trajectory.csv", CSV_COLUMNS, rec.rows(), run.preamble)
    fs = rec.final_state
    write_field(run.out / "final_u.txt", fs.u, grid, fs.t)
    write_field(run.out / "final_v.txt", fs.v, grid, fs.t)
    if rec.history is not None:
        dump_history(rec.history, run.out / "history")
    body = rec.summary()
    body.pop("verdict")
    body["equilibria_found"] = len(eq)
    return run.summary("summary.json", rec.verdict, body)


def _decompose(run: _Run, **_) -> int:
    cfg, grid = run.cfg, run.grid
    rec = simulate_decomposed(run.initial(), cfg.eta, cfg.model, cfg.options.beta_z, grid, cfg.options.sample_every)
    cols = ("t", "z_energy", "w_energy", "lap_wt", "bilap_w", "u_norm", "split_error")
    data = [rec.times, rec.z_energy, rec.w_energy, rec.lap_wt, rec.bilap_w, rec.u_norm, rec.split_error]
    write_csv(run.out / "decomposition.csv", cols, zip(*data), run.preamble)
    t = np.asarray(rec.times)
    window = t >= cfg.options.fit_start - 1e-12
    body = {
        "beta_z": cfg.options.beta_z,
        "max_split_error": rec.max_split_error,
        "max_u_norm": rec.max_u_norm,
        "split_ratio": rec.max_split_error / rec.max_u_norm if rec.max_u_norm > 0 else 0.0,
        "wall_time": rec.wall_time,
    }
    if window.sum() >= 3 and min(np.asarray(rec.z_energy)[window]) > 0:
        slope, r2 = fit_log_slope(t[window], np.asarray(rec.z_energy)[window])
        body["z_decay"] = {"fit_start": cfg.options.fit_start, "slope": slope, "r2": r2}
        for name in ("lap_wt", "bilap_w"):
            vals = np.asarray(getattr(rec, name))[window]
            body[f"{name}_growth"] = float(vals.max() / vals[0]) if vals[0] > 0 else float("nan")
    return run.summary("summary.json", rec.verdict, body)


def _flow_box(cfg: ExperimentConfig) -> FlowBox:
    m = cfg.options.flow_box_m
    return FlowBox(a=cfg.options.flow_box_a, zmax=cfg.options.flow_box_zmax, m1=m, m2=m, m3=m // 2 + 1)


def _pair_record(pair, cfg, grid, box):
    rec = {"parameters": cfg.model.echo(), **pair.summary(grid), "status": pair.status}
    if box is not None and cfg.model.flow_coupling:
        rec["functional_D"] = potential_D(pair, cfg.model, grid, box)
    return rec


def _stationary(run: _Run, **_) -> int:
    cfg, grid = run.cfg, run.grid
    pairs = run.equilibria()
    box = _flow_box(cfg)
    try:
        box.check_contains(grid)
    except ValueError:
        box = None
    manifest = []
    for i, pair in enumerate(pairs):
        write_field(run.out / f"equilibrium_{i:02d}.txt", pair.u_hat, grid)
        if box is not None and cfg.model.flow_coupling:
            phi = solve_stationary_flow(pair.u_hat, cfg.model.U, box, grid)
            write_box_field(run.out / f"equilibrium_{i:02d}_flow.txt", phi, box, cfg.model.U)
        manifest.append(_pair_record(pair, cfg, grid, box))
    write_json(run.out / "equilibria.json", manifest)
    verdict = "completed" if pairs else "failed"
    return run.summary("summary.json", verdict, {"count": len(pairs), "buckling_load": buckling_load(grid)})


def _continuation(run: _Run, **_) -> int:
    cfg, grid = run.cfg, run.grid
    o = cfg.options
    values = np.linspace(o.sweep_start, o.sweep_stop, o.sweep_count)
    sets = continuation(cfg.model, (o.sweep_param, values), grid)
    doc = []
    for es in sets:
        doc.append({
            "parameter": es.parameter,
            "value": es.value,
            "count": len(es),
            "terminated": es.terminated,
            "members": [{**m.summary(grid), "status": m.status} for m in es.members],
        })
    write_json(run.out / "branches.json", doc)
    write_csv(run.out / "branch_counts.csv", (o.sweep_param, "count"), [(es.value, len(es)) for es in sets],
              run.preamble)
    verdict = "completed" if not any(es.terminated for es in sets) else "failed"
    return run.summary("summary.json", verdict, {
        "buckling_load": buckling_load(grid),
        "counts": [len(es) for es in sets],
        "values": list(values),
    })


def _sweep_damping(run: _Run, klo: float, khi: float, ndata: int, **_) -> int:
    report = find_kmin(run.cfg, klo, khi, ndata)
    doc = report.as_dict()
    verdict = "completed" if report.status == "ok" else "failed"
    write_json(run.out / "kmin.json", {**doc, "config": run.cfg.echo()})
    rows = [(r["k"], r["preset"], r["verdict"], r["final_time"], r["ut_final"], r["dist_final"]) for r in report.runs]
    write_csv(run.out / "kmin_runs.csv", ("k", "preset", "verdict", "final_time", "ut_final", "dist_final"), rows,
              run.preamble)
    return run.summary("summary.json", verdict, {"status": report.status, "bracket": [report.k_lo, report.k_hi],
                                                  "k_min_empirical": report.k_min})


def _verify(run: _Run, **_) -> int:
    results = verify_suite(run.cfg)
    write_csv(run.out / "verify.csv", CHECK_COLUMNS, [r.row() for r in results], run.preamble)
    table = [dict(zip(CHECK_COLUMNS, r.row())) for r in results]
    verdict = "completed" if all(r.passed for r in results) else "failed"
    return run.summary("verify.json", verdict, {"checks": table})


def _reconstruct(run: _Run, time: float, points: str, **_) -> int:
    cfg, grid = run.cfg, run.grid
    if time < cfg.options.t_rho:
        raise ValueError(f"evaluation time {time} precedes the declared near-field clearing time t_rho={cfg.options.t_rho}")
    pts = read_points(points)
    st, hist = run_to(run.initial().u, replace(cfg.model, flow_coupling=True), grid, time, cfg.eta)
    samples = sample_flow(hist, pts, st.t, cfg.model.U, cfg.model.quad, grid)
    write_flow_samples(run.out / f"flow_t{st.t:.6f}.txt", samples, cfg.model.U, cfg.model.quad)
    ball = LocalEnergyBall(cfg.options.rho, cfg.options.ball_resolution,
                           (0.5 * grid.L1, 0.5 * grid.L2))
    energy = local_flow_energy(sample_ball(hist, ball, st.t, cfg.model.U, cfg.model.quad, grid), ball)
    return run.summary("summary.json", "completed", {
        "time": st.t,
        "points": len(pts),
        "t_rho": cfg.options.t_rho,
        "near_field_assumption": "near-field part taken as zero for t >= t_rho",
        "local_energy": {"rho": ball.rho, "center": list(ball.center), "value": energy},
    })


def _hadamard(run: _Run, delta: float, **_) -> int:
    cfg, grid = run.cfg, run.grid
    o = cfg.options
    rec = hadamard_probe(run.initial(), delta, cfg.model, o.hadamard_T, grid, o.halvings, o.sample_every, cfg.eta)
    cols = ["t"] + [f"ratio_{i}" for i in range(len(rec.deltas))]
    rows = [[t, *rec.ratios[:, j]] for j, t in enumerate(rec.times)]
    write_csv(run.out / "hadamard.csv", cols, rows, run.preamble)
    finite = bool(np.all(np.isfinite(rec.ratios)))
    return run.summary("summary.json", "completed" if finite else "failed", {
        "deltas": rec.deltas,
        "spread": rec.spread,
        "growth_rate": rec.growth_rate,
        "growth_r2": rec.growth_r2,
    })


_PIPELINES = {
    "simulate": _simulate,
    "decompose": _decompose,
    "stationary": _stationary,
    "continuation": _continuation,
    "sweep-damping": _sweep_damping,
    "verify": _verify,
    "reconstruct": _reconstruct,
    "hadamard": _hadamard,
}


def run_experiment(cfg: ExperimentConfig, **extra) -> int:
    """Run ``cfg.experiment``; extra keyword arguments carry CLI-only inputs."""
    return _PIPELINES[cfg.experiment](_Run(cfg), **extra)
