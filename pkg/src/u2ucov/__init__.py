"""Coverage of UAV-to-UAV links underlaying a cellular uplink.

Closed-form (stochastic geometry) and Monte Carlo evaluation of the SINR
at a typical U2U receiver and at a typical base station, with height
dependent LoS channels, a downtilted BS array and fractional power control.
"""
__version__ = "0.1.0"

from .config import ConfigError, ScenarioParams, load_scenario  # noqa: E402

__all__ = ["ConfigError", "ScenarioParams", "load_scenario", "__version__"]
