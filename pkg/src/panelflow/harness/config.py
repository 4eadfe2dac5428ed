"""Flat ``key = value`` experiment configuration.

One assignment per line, ``#`` starts a comment.  Unknown keys, repeated
keys and values of the wrong type are errors that name the key and line.
Every key has a documented default except ``experiment``, ``n1`` and ``n2``.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..aero_delay import QuadratureSpec
from ..dynamics import TOL_R, TOL_V, ModelParams
from ..plate_core import PlateGrid, build_grid

EXPERIMENTS = (
    "simulate",
    "decompose",
    "stationary",
    "continuation",
    "sweep-damping",
    "verify",
    "reconstruct",
    "hadamard",
)
PRESETS = ("mode11", "skew", "random-smooth", "zero")
DATUMS = ("frozen", "zero", "ramp")
SWEEPABLE = ("b", "p0", "U")


class ConfigError(ValueError):
    """Bad configuration; ``key`` and ``line`` locate the offending entry."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None, source: str | None = None):
        where = [part for part in (source, None if line is None else f"line {line}") if part]
        prefix = ", ".join(where)
        if key is not None:
            prefix = f"{prefix}: key '{key}'" if prefix else f"key '{key}'"
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.key = key
        self.line = line
        self.source = source


@dataclass(frozen=True)
class GridSpec:
    n1: int
    n2: int
    L1: float = 1.0
    L2: float = 1.0

    def build(self) -> PlateGrid:
        return build_grid(self.L1, self.L2, self.n1, self.n2)


@dataclass(frozen=True)
class RunOptions:
    """Experiment-specific knobs; each experiment reads only its own."""

    sample_every: int = 10
    beta_z: float = 50.0
    fit_start: float = 5.0
    sweep_param: str = "b"
    sweep_start: float = 0.0
    sweep_stop: float = 100.0
    sweep_count: int = 11
    t_rho: float = 0.0
    rho: float = 0.25
    ball_resolution: int = 9
    hadamard_T: float = 2.0
    halvings: int = 2
    verify_T: float = 1.0
    flow_box_a: float = 2.0
    flow_box_zmax: float = 2.0
    flow_box_m: int = 41


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    grid: GridSpec
    model: ModelParams
    initial: str = "mode11"
    amplitude: float = 0.01
    eta: str = "frozen"
    output: str = "out"
    seed: int = 0
    options: RunOptions = field(default_factory=RunOptions)

    def with_model(self, **changes) -> "ExperimentConfig":
        return replace(self, model=replace(self.model, **changes))

    def echo(self) -> dict:
        """Every effective setting as a flat key -> value mapping."""
        return {key: getter(self) for key, (_, _, getter, _) in _SCHEMA.items()}


# key -> (type, default, getter, doc).  A default of None marks a required key.
def _model(name):
    return lambda c: getattr(c.model, name)


def _opt(name):
    return lambda c: getattr(c.options, name)


_MODEL_DEFAULTS = ModelParams()
_OPTION_DEFAULTS = RunOptions()

_SCHEMA: dict = {
    "experiment": (str, None, lambda c: c.experiment, "one of " + ", ".join(EXPERIMENTS)),
    "n1": (int, None, lambda c: c.grid.n1, "interior nodes along x"),
    "n2": (int, None, lambda c: c.grid.n2, "interior nodes along y"),
    "L1": (float, 1.0, lambda c: c.grid.L1, "plate length along x"),
    "L2": (float, 1.0, lambda c: c.grid.L2, "plate length along y"),
    "U": (float, _MODEL_DEFAULTS.U, _model("U"), "flow speed, 0 <= U < 1"),
    "k": (float, _MODEL_DEFAULTS.k, _model("k"), "imposed damping"),
    "beta": (float, _MODEL_DEFAULTS.beta, _model("beta"), "static damping"),
    "b": (float, _MODEL_DEFAULTS.b, _model("b"), "in-plane Berger load"),
    "p0": (float, 0.0, _model("p0"), "constant surface pressure"),
    "dt": (float, _MODEL_DEFAULTS.dt, _model("dt"), "time step"),
    "T": (float, _MODEL_DEFAULTS.T, _model("T"), "horizon"),
    "n_theta": (int, _MODEL_DEFAULTS.quad.n_theta, lambda c: c.model.quad.n_theta, "angular nodes"),
    "n_s": (int, _MODEL_DEFAULTS.quad.n_s, lambda c: c.model.quad.n_s, "delay nodes"),
    "flow_coupling": (bool, True, _model("flow_coupling"), "switch the three flow terms"),
    "tol_v": (float, TOL_V, _model("tol_v"), "velocity tolerance for convergence"),
    "tol_r": (float, TOL_R, _model("tol_r"), "residual tolerance for convergence"),
    "smoothing_steps": (int, _MODEL_DEFAULTS.smoothing_steps, _model("smoothing_steps"), "implicit start-up steps"),
    "initial": (str, "mode11", lambda c: c.initial, "initial displacement preset"),
    "amplitude": (float, 0.01, lambda c: c.amplitude, "peak initial displacement"),
    "eta": (str, "frozen", lambda c: c.eta, "delay datum: frozen, zero or ramp"),
    "output": (str, "out", lambda c: c.output, "output directory"),
    "seed": (int, 0, lambda c: c.seed, "seed for random-smooth"),
}
_TYPES = {"int": int, "float": float, "str": str}
_OPTION_DOCS = {
    "sample_every": "steps between recorded samples",
    "beta_z": "extra static damping of the z-system (decompose)",
    "fit_start": "start of the decay-fit window (decompose)",
    "sweep_param": "continuation parameter: b, p0 or U",
    "sweep_start": "first continuation value",
    "sweep_stop": "last continuation value",
    "sweep_count": "number of continuation values",
    "t_rho": "near-field clearing time (reconstruct)",
    "rho": "radius of the local energy ball (reconstruct)",
    "ball_resolution": "nodes per axis in the energy ball (reconstruct)",
    "hadamard_T": "horizon of the Hadamard probe",
    "halvings": "number of perturbation halvings (hadamard)",
    "verify_T": "horizon of the verify runs",
    "flow_box_a": "half-width of the stationary flow box",
    "flow_box_zmax": "height of the stationary flow box",
    "flow_box_m": "nodes per horizontal axis of the flow box",
}
for _f in fields(RunOptions):
    _SCHEMA[_f.name] = (_TYPES.get(_f.type, _f.type), getattr(_OPTION_DEFAULTS, _f.name), _opt(_f.name),
                        _OPTION_DOCS[_f.name])

KEYS = tuple(_SCHEMA)


def _convert(kind, raw: str):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"expected an integer, got {raw!r}") from None
    if kind is float:
        try:
            val = float(raw)
        except ValueError:
            raise ValueError(f"expected a number, got {raw!r}") from None
        if not math.isfinite(val):
            raise ValueError(f"expected a finite number, got {raw!r}")
        return val
    if not raw:
        raise ValueError("empty value")
    return raw


def _parse_lines(text: str, source: str) -> tuple[dict, dict]:
    values, lines = {}, {}
    for no, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", None, no, source)
        key, val = (part.strip() for part in body.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError("unknown key", key, no, source)
        if key in values:
            raise ConfigError(f"repeated key (first on line {lines[key]})", key, no, source)
        try:
            values[key] = _convert(_SCHEMA[key][0], val)
        except ValueError as exc:
            raise ConfigError(str(exc), key, no, source) from None
        lines[key] = no
    return values, lines


def _check_writable(path: Path) -> bool:
    probe = path.resolve()
    while not probe.exists():
        probe = probe.parent
    return probe.is_dir() and os.access(probe, os.W_OK)


def build_config(values: dict, lines: dict | None = None, source: str | None = None) -> ExperimentConfig:
    """Fill defaults, check invariants and assemble the nested config."""
    lines = lines or {}
    merged = {}
    for key, (kind, default, _, _) in _SCHEMA.items():
        if key in values:
            merged[key] = values[key]
        elif default is None:
            raise ConfigError("required key is missing", key, None, source)
        else:
            merged[key] = default

    def bad(key, msg):
        return ConfigError(msg, key, lines.get(key), source)

    if merged["experiment"] not in EXPERIMENTS:
        raise bad("experiment", f"unknown experiment {merged['experiment']!r}; choose from {', '.join(EXPERIMENTS)}")
    if merged["initial"] not in PRESETS:
        raise bad("initial", f"unknown preset {merged['initial']!r}; choose from {', '.join(PRESETS)}")
    if merged["eta"] not in DATUMS:
        raise bad("eta", f"unknown delay datum {merged['eta']!r}; choose from {', '.join(DATUMS)}")
    if merged["sweep_param"] not in SWEEPABLE:
        raise bad("sweep_param", f"cannot sweep {merged['sweep_param']!r}; choose from {', '.join(SWEEPABLE)}")
    for key in ("sample_every", "sweep_count", "n_theta", "n_s", "ball_resolution", "flow_box_m"):
        if merged[key] < 1:
            raise bad(key, "must be positive")
    if merged["halvings"] < 1:
        raise bad("halvings", "need at least one halving")
    if not _check_writable(Path(merged["output"])):
        raise bad("output", f"directory {merged['output']!r} is not writable")
    try:
        grid = GridSpec(merged["n1"], merged["n2"], merged["L1"], merged["L2"])
        grid.build()
    except ValueError as exc:
        raise bad("n1", str(exc)) from None
    try:
        model = ModelParams(
            U=merged["U"], k=merged["k"], beta=merged["beta"], b=merged["b"], p0=merged["p0"],
            dt=merged["dt"], T=merged["T"], quad=QuadratureSpec(merged["n_theta"], merged["n_s"]),
            flow_coupling=merged["flow_coupling"], tol_v=merged["tol_v"], tol_r=merged["tol_r"],
            smoothing_steps=merged["smoothing_steps"],
        )
    except ValueError as exc:
        key = next((k for k in ("U", "k", "beta", "dt", "T") if k in str(exc)), "U")
        raise bad(key, str(exc)) from None
    options = RunOptions(**{f.name: merged[f.name] for f in fields(RunOptions)})
    return ExperimentConfig(
        experiment=merged["experiment"], grid=grid, model=model, initial=merged["initial"],
        amplitude=merged["amplitude"], eta=merged["eta"], output=merged["output"], seed=merged["seed"],
        options=options,
    )


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    values, lines = _parse_lines(text, source)
    return build_config(values, lines, source)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} not found")
    return parse_config_text(path.read_text(), str(path))


def format_value(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return f"{val:.17g}"
    return str(val)


def serialize_config(cfg: ExperimentConfig) -> str:
    """All keys with their effective values; reparses to an equal config."""
    return "".join(f"{key} = {format_value(val)}\n" for key, val in cfg.echo().items())


def config_comment_block(cfg: ExperimentConfig, prefix: str = "# ") -> str:
    return "".join(f"{prefix}{line}\n" for line in serialize_config(cfg).splitlines())
