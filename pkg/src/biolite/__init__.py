"""Training and inference engine for a lightweight three-class U-Net (background / bioink / nozzle)."""

__version__ = "0.1.0"
