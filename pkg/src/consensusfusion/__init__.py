"""Cross-sensor consistency metrics, consensus-based sensor selection, and
loosely coupled fixed-lag fusion on synthetic multi-sensor scenarios."""

__version__ = "0.1.0"
