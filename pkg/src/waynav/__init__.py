"""Few-shot waypoint detection and conditioned steering in a corridor simulator."""

__version__ = "0.1.0"
