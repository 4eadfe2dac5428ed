"""Clamped Berger plate in a subsonic flow, reduced to a delay equation.

Modules: ``plate_core`` (grid, operators, energies), ``aero_delay`` (the
memory term and its history), ``dynamics`` (time stepping and diagnostics),
``stationary`` (equilibria and the stationary flow), ``flow_reconstruct``
(flow potential from plate history) and ``harness`` (configs and CLI).
"""

__version__ = "0.1.0"
