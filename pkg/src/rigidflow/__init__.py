"""Compressible viscous flow coupled to a rigid ball in a periodic-free box,
with a frame-aligning twin harness that audits relative-energy stability.

Exports resolve lazily so the command line can pin thread pools before the
numeric stack loads.
"""
from __future__ import annotations

__version__ = "0.1.0"

_EXPORTS = {
    # grids / fluid
    "UniformGrid": "grids",
    "quintic_step": "grids",
    "FluidParams": "fluid",
    "FluidState": "fluid",
    "step_fluid": "fluid",
    "admissible_dt": "fluid",
    "TestFunction": "fluid",
    "weak_residuals": "fluid",
    # kinematics
    "Ball": "kinematics",
    "BodyState": "kinematics",
    "Isometry": "kinematics",
    "Trajectory": "kinematics",
    "rigid_velocity": "kinematics",
    "step_body": "kinematics",
    "solve_o_delta": "kinematics",
    "uniform_ball_body": "kinematics",
    # coupling
    "CouplingConfig": "coupling",
    "CoupledDiagnostics": "coupling",
    "coupled_step": "coupling",
    "gap_monitor": "coupling",
    "icosphere": "coupling",
    "surface_loads": "coupling",
    # transform
    "CutoffSpec": "transform",
    "FlowMap": "transform",
    "ComposedMaps": "transform",
    "PulledBack": "transform",
    "assemble_tensors": "transform",
    "blend_mollified": "transform",
    "blended_velocity": "transform",
    "check_margins": "transform",
    "compose_maps": "transform",
    "cutoff_value": "transform",
    "identity_residual": "transform",
    "lemma31_ratios": "transform",
    "map_deviation_norms": "transform",
    "padded_labels": "transform",
    "pull_back": "transform",
    "round_trip_error": "transform",
    "source_f": "transform",
    "source_g": "transform",
    "transformed_residuals": "transform",
    # energy
    "EnergyReport": "energy",
    "RelativeEnergy": "energy",
    "RemainderTerms": "energy",
    "StabilityReport": "energy",
    "relative_energy": "energy",
    "remainder": "energy",
    "stability_monitor": "energy",
    "budget_violation": "energy",
    # manufactured solutions
    "ConvergenceTable": "manufactured",
    "TransformedCase": "manufactured",
    "ForcedFluidCase": "manufactured",
    "convergence_study": "manufactured",
    "observed_order": "manufactured",
    # harness
    "ScenarioConfig": "harness",
    "TwinSettings": "harness",
    "MmsSettings": "harness",
    "RunArtifact": "harness",
    "TwinResult": "harness",
    "TwinVerdict": "harness",
    "InitialData": "harness",
    "run_scenario": "harness",
    "twin_experiment": "harness",
    "manufactured_verification": "harness",
    "emit_reports": "harness",
    "report_from_dir": "harness",
    "write_field_dump": "harness",
    "read_field_dump": "harness",
    # errors
    "ConfigError": "errors",
    "CflError": "errors",
    "NumericError": "errors",
    "TransformError": "errors",
}


def __getattr__(name: str):
    try:
        module = _EXPORTS[name]
    except KeyError:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}") from None
    import importlib

    value = getattr(importlib.import_module(f".{module}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
