"""Risk-shaped model-based RL on desk-scale traffic scenarios."""

__version__ = "0.1.0"
