"""Motion planning for modular limb robots that carry, throw, and walk boxes.

The planner splits a mixed-integer nonlinear trajectory problem into a
mixed-integer quadratic half (discrete roles, latching logic, linear box
dynamics) and a nonlinear half (chain kinematics, rotation validity,
separating-plane collision avoidance), then drives the two copies of the
decision vector to consensus with a weighted ADMM loop.
"""

__version__ = "0.1.0"

from .scene import ScenarioConfig, load_scenario, parse_scenario, serialize_scenario
from .variables import VariableRegistry, VarVector, build_registry

__all__ = [
    "__version__",
    "ScenarioConfig",
    "parse_scenario",
    "load_scenario",
    "serialize_scenario",
    "VariableRegistry",
    "VarVector",
    "build_registry",
]
