"""Wide/multiple field-of-view differential absorption lidar: forward Monte Carlo
simulation, semi-parametric plume reconstruction and detection statistics."""

__version__ = "0.1.0"
SCHEMA_VERSION = "1.0"
