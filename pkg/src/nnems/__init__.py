"""Neural-network energy management for islanded PV-battery microgrids."""

__version__ = "0.1.0"
