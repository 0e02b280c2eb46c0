"""Ship maneuver planning: lattice planner plus envelope-constrained improvement."""

__version__ = "0.1.0"
