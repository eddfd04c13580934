"""Pose forecasting transformer with a motion severity classification head."""

__version__ = "0.1.0"
