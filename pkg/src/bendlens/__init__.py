"""bendlens: simulated bend-resistant multimode-fiber imaging pipeline."""

__version__ = "0.1.0"
