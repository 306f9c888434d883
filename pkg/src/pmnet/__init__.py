"""Event-driven simulation and receding-horizon control for persistent
monitoring of target networks by mobile agent teams."""

__version__ = "0.1.0"
