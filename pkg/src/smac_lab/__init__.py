"""Safe reinforcement learning with a safety modulator and a distributional critic."""

__version__ = "0.1.0"
