"""City-scale vehicular network simulator and V2X protocol library."""

__version__ = "0.1.0"

from .errors import SimError  # noqa: E402
from .geo import GeoPosition, StationType, VehicleState  # noqa: E402
from .scenario import Scenario, load_scenario, parse_scenario, shipped_scenario_path  # noqa: E402

__all__ = [
    "__version__", "SimError", "GeoPosition", "StationType", "VehicleState",
    "Scenario", "load_scenario", "parse_scenario", "shipped_scenario_path",
]
